//! NPY v1.0 reader/writer for little-endian float arrays in C order.
//!
//! Reading accepts `<f4` and `<f8`; writing always emits `<f8` so a
//! save/load round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

#[derive(Debug, PartialEq)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(file))
}

pub fn read_tensor<R: Read>(reader: &mut R) -> Result<ArrayD<f64>> {
    let header = read_header(reader)?;
    let count: usize = header.shape.iter().product();
    let nbytes = count * header.dtype.size();
    let mut payload = Vec::with_capacity(nbytes);
    reader
        .take(nbytes as u64)
        .read_to_end(&mut payload)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    if payload.len() != nbytes {
        return Err(Error::Corrupt(format!(
            "expected {nbytes} payload bytes, found {}",
            payload.len()
        )));
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing).map_err(|e| Error::Corrupt(e.to_string()))? != 0 {
        return Err(Error::Corrupt("trailing bytes after payload".into()));
    }
    let values: Vec<f64> = match header.dtype {
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    };
    ArrayD::from_shape_vec(IxDyn(&header.shape), values)
        .map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn save_tensor(array: ArrayViewD<'_, f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if array.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("array contains non-finite values".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_tensor(&mut writer, array)
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_tensor<W: Write>(writer: &mut W, array: ArrayViewD<'_, f64>) -> std::io::Result<()> {
    writer.write_all(&encode_header(array.shape()))?;
    // iter() walks in logical (C) order regardless of memory layout
    for v in array.iter() {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn encode_header(shape: &[usize]) -> Vec<u8> {
    let shape_str = match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_str}, }}");
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(unpadded + pad);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

fn read_header<R: Read>(reader: &mut R) -> Result<Header> {
    let mut preamble = [0u8; 10];
    reader
        .read_exact(&mut preamble)
        .map_err(|_| Error::Format("file too short for npy preamble".into()))?;
    if &preamble[..6] != MAGIC {
        return Err(Error::Format("bad magic string".into()));
    }
    if preamble[6..8] != [1, 0] {
        return Err(Error::Format(format!(
            "unsupported version {}.{}",
            preamble[6], preamble[7]
        )));
    }
    let len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut text = vec![0u8; len];
    reader
        .read_exact(&mut text)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let text = std::str::from_utf8(&text)
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    parse_header(text)
}

/// Literal values that may appear in an npy header dict.
#[derive(Debug, PartialEq)]
enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

fn parse_header(text: &str) -> Result<Header> {
    let entries = DictParser::new(text).parse()?;
    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    for (key, value) in entries {
        match (key.as_str(), value) {
            ("descr", Literal::Str(s)) => descr = Some(s),
            ("fortran_order", Literal::Bool(b)) => fortran = Some(b),
            ("shape", Literal::Tuple(t)) => shape = Some(t),
            (k, v) => return Err(Error::Format(format!("unexpected header entry {k}: {v:?}"))),
        }
    }
    let descr = descr.ok_or_else(|| Error::Format("header lacks 'descr'".into()))?;
    let fortran = fortran.ok_or_else(|| Error::Format("header lacks 'fortran_order'".into()))?;
    let shape = shape.ok_or_else(|| Error::Format("header lacks 'shape'".into()))?;
    let dtype = match descr.as_str() {
        "<f4" => Dtype::F4,
        "<f8" => Dtype::F8,
        other => return Err(Error::Unsupported(format!("dtype {other:?}"))),
    };
    if fortran {
        return Err(Error::Unsupported("fortran_order arrays".into()));
    }
    Ok(Header { dtype, shape })
}

struct DictParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> DictParser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            src: text.as_bytes(),
            pos: 0,
        }
    }

    fn err(&self, what: &str) -> Error {
        Error::Format(format!("header dict: {what} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn parse(mut self) -> Result<Vec<(String, Literal)>> {
        self.expect(b'{')?;
        let mut entries = Vec::new();
        loop {
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            let value = self.value()?;
            entries.push((key, value));
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(self.err("expected ',' or '}'")),
            }
        }
        if self.peek().is_some() {
            return Err(self.err("trailing characters"));
        }
        Ok(entries)
    }

    fn string(&mut self) -> Result<String> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn value(&mut self) -> Result<Literal> {
        match self.peek() {
            Some(b'\'' | b'"') => self.string().map(Literal::Str),
            Some(b'(') => self.tuple().map(Literal::Tuple),
            Some(_) => {
                let rest = &self.src[self.pos..];
                if rest.starts_with(b"True") {
                    self.pos += 4;
                    Ok(Literal::Bool(true))
                } else if rest.starts_with(b"False") {
                    self.pos += 5;
                    Ok(Literal::Bool(false))
                } else {
                    Err(self.err("unexpected value"))
                }
            }
            None => Err(self.err("unexpected end")),
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(dims);
                }
                Some(c) if c.is_ascii_digit() => {
                    let start = self.pos;
                    while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                    let digits = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                    dims.push(digits.parse().map_err(|_| self.err("bad dimension"))?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err(self.err("expected ',' or ')'")),
                    }
                }
                _ => return Err(self.err("expected dimension")),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3, ArrayD};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(a: &ArrayD<f64>) -> ArrayD<f64> {
        let mut buf = Vec::new();
        write_tensor(&mut buf, a.view()).unwrap();
        read_tensor(&mut buf.as_slice()).unwrap()
    }

    /// Builds a v1.0 file by hand: magic, version, u16 header length, padded dict, payload.
    fn handmade(header_dict: &str, payload: &[u8]) -> Vec<u8> {
        let mut dict = header_dict.to_string();
        while !(10 + dict.len() + 1).is_multiple_of(64) {
            dict.push(' ');
        }
        dict.push('\n');
        let mut out = b"\x93NUMPY".to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        out.extend_from_slice(dict.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn small_matrix_roundtrip() {
        let a = arr2(&[[0.0, 1.0], [2.0, 3.0]]).into_dyn();
        assert_eq!(roundtrip(&a), a);
    }

    #[test]
    fn scalar_roundtrip() {
        let a = ArrayD::from_elem(IxDyn(&[]), 0.125);
        assert_eq!(roundtrip(&a), a);
    }

    #[test]
    fn header_is_64_byte_aligned() {
        for shape in [&[][..], &[5], &[13, 16, 16], &[1, 2, 3, 4]] {
            let h = encode_header(shape);
            assert_eq!(h.len() % 64, 0);
            assert_eq!(*h.last().unwrap(), b'\n');
        }
    }

    #[test]
    fn reads_handmade_f4_header() {
        let payload: Vec<u8> = [0.0f32, 1.0, 2.0, 3.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let file = handmade(
            "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 2, 2)}",
            &payload,
        );
        assert_eq!((file.len() - payload.len()) % 64, 0);
        let a = read_tensor(&mut file.as_slice()).unwrap();
        assert_eq!(a.shape(), &[1, 2, 2]);
        assert_eq!(a.iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_integer_dtype() {
        let file = handmade(
            "{'descr': '<i8', 'fortran_order': False, 'shape': (2,)}",
            &[0u8; 16],
        );
        assert!(matches!(read_tensor(&mut file.as_slice()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn rejects_fortran_order() {
        let file = handmade(
            "{'descr': '<f8', 'fortran_order': True, 'shape': (2,)}",
            &[0u8; 16],
        );
        assert!(matches!(read_tensor(&mut file.as_slice()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut file = handmade("{'descr': '<f8', 'fortran_order': False, 'shape': ()}", &[0; 8]);
        file[1] = b'X';
        assert!(matches!(read_tensor(&mut file.as_slice()), Err(Error::Format(_))));

        let mut file = handmade("{'descr': '<f8', 'fortran_order': False, 'shape': ()}", &[0; 8]);
        file[6] = 2;
        assert!(matches!(read_tensor(&mut file.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let file = handmade(
            "{'descr': '<f8', 'fortran_order': False, 'shape': (3,)}",
            &[0u8; 20],
        );
        assert!(matches!(read_tensor(&mut file.as_slice()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn save_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let a = ArrayD::from_elem(IxDyn(&[2]), f64::NAN);
        assert!(matches!(
            save_tensor(a.view(), dir.path().join("x.npy")),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn file_roundtrip_random_cube() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.npy");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Array3::from_shape_fn((13, 16, 16), |_| rng.random::<f64>()).into_dyn();
        save_tensor(a.view(), &path).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), a);
    }

    #[test]
    fn non_contiguous_view_is_written_in_logical_order() {
        let a = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let t = a.t().to_owned().into_dyn();
        let mut buf = Vec::new();
        write_tensor(&mut buf, a.t().into_dyn()).unwrap();
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }

    proptest! {
        #[test]
        fn bit_exact_roundtrip(
            shape in proptest::collection::vec(1usize..5, 0..=4),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n)
                .map(|_| f64::from_bits(rng.random::<u64>()))
                .map(|v| if v.is_finite() { v } else { -0.0 })
                .collect();
            let a = ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap();
            let back = roundtrip(&a);
            prop_assert_eq!(back.shape(), a.shape());
            for (x, y) in a.iter().zip(back.iter()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
