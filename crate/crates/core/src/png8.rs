//! 8-bit PNG encoding and decoding of `[0, 1]` planes.

use std::io::Cursor;

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

/// Nearest 8-bit level of a value, clamped to `[0, 1]` first.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f64 {
    f64::from(q) / 255.0
}

/// Encodes a `[C, H, W]` array with one (gray) or three (RGB) channels.
pub fn encode(planes: ArrayView3<'_, f64>) -> Result<Vec<u8>> {
    let (c, h, w) = planes.dim();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => {
            return Err(Error::Precondition(format!(
                "can only encode 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut data = Vec::with_capacity(c * h * w);
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                data.push(quantize(planes[[ch, row, col]]));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::Format(format!("png finish: {e}")))?;
    }
    Ok(out)
}

/// Decodes any 8/16-bit gray, gray-alpha, RGB, RGBA or palette PNG into
/// `[C, H, W]` with `C` = 1 for gray inputs and 3 otherwise. Alpha is dropped.
pub fn decode(bytes: &[u8]) -> Result<Array3<f64>> {
    let bad = |e: png::DecodingError| Error::Format(format!("png: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (stride, out_c) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::Unsupported("unexpanded palette png".into()))
        }
    };
    let mut out = Array3::zeros((out_c, h, w));
    for row in 0..h {
        let line = &buf[row * info.line_size..];
        for col in 0..w {
            for ch in 0..out_c {
                out[[ch, row, col]] = dequantize(line[col * stride + ch]);
            }
        }
    }
    Ok(out)
}
