//! Forward/backward kernels for the skip network, on dense `[C, H, W]` buffers.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::filter::reflect;

/// A dense feature map in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Feat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feat {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }
}

pub(crate) struct ConvCache {
    /// im2col matrix `[cin * k * k, ho * wo]`; empty for pointwise convs, which reuse the input.
    col: Vec<f64>,
    input: Option<Vec<f64>>,
    gather: Vec<u32>,
    h: usize,
    w: usize,
}

/// Source plane index for each (tap, output position), with mirrored padding.
fn gather_indices(shape: ConvShape, h: usize, w: usize) -> Vec<u32> {
    let (ho, wo) = shape.out_size(h, w);
    let pad = (shape.k / 2) as isize;
    let mut idx = Vec::with_capacity(shape.k * shape.k * ho * wo);
    for ky in 0..shape.k as isize {
        for kx in 0..shape.k as isize {
            for oy in 0..ho {
                let sy = reflect((oy * shape.stride) as isize + ky - pad, h);
                for ox in 0..wo {
                    let sx = reflect((ox * shape.stride) as isize + kx - pad, w);
                    idx.push((sy * w + sx) as u32);
                }
            }
        }
    }
    idx
}

fn pointwise(shape: ConvShape) -> bool {
    shape.k == 1 && shape.stride == 1
}

pub(crate) fn conv_forward(
    x: &Feat,
    shape: ConvShape,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> (Feat, ConvCache) {
    debug_assert_eq!(x.c, shape.cin);
    let (ho, wo) = shape.out_size(x.h, x.w);
    let p = ho * wo;
    let taps = shape.k * shape.k;
    let (col, gather) = if pointwise(shape) {
        (Vec::new(), Vec::new())
    } else {
        let gather = gather_indices(shape, x.h, x.w);
        let mut col = vec![0.0; shape.cin * taps * p];
        for ci in 0..shape.cin {
            let src = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
            let rows = &mut col[ci * taps * p..(ci + 1) * taps * p];
            for (dst, &g) in rows.iter_mut().zip(&gather) {
                *dst = src[g as usize];
            }
        }
        (col, gather)
    };
    let cols = if pointwise(shape) { &x.data } else { &col };

    let mut out = Feat::zeros(shape.cout, ho, wo);
    if let Some(b) = bias {
        for (row, &bv) in out.data.chunks_exact_mut(p).zip(b) {
            row.fill(bv);
        }
    }
    let wmat = ArrayView2::from_shape((shape.cout, shape.fan_in()), weight).unwrap();
    let cmat = ArrayView2::from_shape((shape.fan_in(), p), cols.as_slice()).unwrap();
    let mut omat = ArrayViewMut2::from_shape((shape.cout, p), &mut out.data).unwrap();
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    general_mat_mul(1.0, &wmat, &cmat, beta, &mut omat);

    let cache = ConvCache {
        col,
        input: pointwise(shape).then(|| x.data.clone()),
        gather,
        h: x.h,
        w: x.w,
    };
    (out, cache)
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub(crate) fn conv_backward(
    dout: &Feat,
    shape: ConvShape,
    weight: &[f64],
    cache: &ConvCache,
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
) -> Feat {
    let p = dout.plane();
    let taps = shape.k * shape.k;
    let cols: &[f64] = match &cache.input {
        Some(input) => input,
        None => &cache.col,
    };
    let dmat = ArrayView2::from_shape((shape.cout, p), &dout.data).unwrap();
    let cmat = ArrayView2::from_shape((shape.fan_in(), p), cols).unwrap();
    let mut dw = ArrayViewMut2::from_shape((shape.cout, shape.fan_in()), dweight).unwrap();
    general_mat_mul(1.0, &dmat, &cmat.t(), 1.0, &mut dw);
    if let Some(db) = dbias {
        for (g, row) in db.iter_mut().zip(dout.data.chunks_exact(p)) {
            *g += row.iter().sum::<f64>();
        }
    }

    let wmat = ArrayView2::from_shape((shape.cout, shape.fan_in()), weight).unwrap();
    let mut dx = Feat::zeros(shape.cin, cache.h, cache.w);
    if pointwise(shape) {
        let mut dxm = ArrayViewMut2::from_shape((shape.cin, p), &mut dx.data).unwrap();
        general_mat_mul(1.0, &wmat.t(), &dmat, 0.0, &mut dxm);
        return dx;
    }
    let mut dcol = vec![0.0; shape.fan_in() * p];
    {
        let mut dcm = ArrayViewMut2::from_shape((shape.fan_in(), p), &mut dcol).unwrap();
        general_mat_mul(1.0, &wmat.t(), &dmat, 0.0, &mut dcm);
    }
    let plane = cache.h * cache.w;
    for ci in 0..shape.cin {
        let dst = &mut dx.data[ci * plane..(ci + 1) * plane];
        let rows = &dcol[ci * taps * p..(ci + 1) * taps * p];
        for (&v, &g) in rows.iter().zip(&cache.gather) {
            dst[g as usize] += v;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// instance normalisation

pub(crate) const NORM_EPS: f64 = 1e-5;

pub(crate) struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

pub(crate) fn norm_forward(x: &Feat, scale: &[f64], shift: &[f64]) -> (Feat, NormCache) {
    let p = x.plane();
    let n = p as f64;
    let mut out = Feat::zeros(x.c, x.h, x.w);
    let mut xhat = vec![0.0; x.data.len()];
    let mut inv_std = vec![0.0; x.c];
    for ch in 0..x.c {
        let src = &x.data[ch * p..(ch + 1) * p];
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = istd;
        let xh = &mut xhat[ch * p..(ch + 1) * p];
        let dst = &mut out.data[ch * p..(ch + 1) * p];
        for ((o, h), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
            *h = (v - mean) * istd;
            *o = scale[ch] * *h + shift[ch];
        }
    }
    (out, NormCache { xhat, inv_std })
}

pub(crate) fn norm_backward(
    dout: &Feat,
    scale: &[f64],
    cache: &NormCache,
    dscale: &mut [f64],
    dshift: &mut [f64],
) -> Feat {
    let p = dout.plane();
    let n = p as f64;
    let mut dx = Feat::zeros(dout.c, dout.h, dout.w);
    for ch in 0..dout.c {
        let dy = &dout.data[ch * p..(ch + 1) * p];
        let xh = &cache.xhat[ch * p..(ch + 1) * p];
        let sum_dy: f64 = dy.iter().sum();
        let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
        dshift[ch] += sum_dy;
        dscale[ch] += sum_dy_xh;
        // with dxhat = scale * dy:
        // dx = inv_std / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
        let k = scale[ch] * cache.inv_std[ch] / n;
        let dst = &mut dx.data[ch * p..(ch + 1) * p];
        for ((o, &g), &h) in dst.iter_mut().zip(dy).zip(xh) {
            *o = k * (n * g - sum_dy - h * sum_dy_xh);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities

pub(crate) fn leaky_relu_inplace(x: &mut Feat, slope: f64) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Backward through leaky ReLU given its output (same sign as its input for slope > 0).
pub(crate) fn leaky_relu_backward_inplace(dout: &mut Feat, output: &[f64], slope: f64) {
    for (g, &y) in dout.data.iter_mut().zip(output) {
        if y < 0.0 {
            *g *= slope;
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// bilinear x2 upsampling (half-pixel centres, edge clamped)

struct Lerp {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn lerp_table(n: usize) -> Vec<Lerp> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let w_hi = src - lo as f64;
            Lerp {
                lo,
                hi,
                w_lo: 1.0 - w_hi,
                w_hi,
            }
        })
        .collect()
}

pub(crate) fn upsample2_forward(x: &Feat) -> Feat {
    let (h2, w2) = (2 * x.h, 2 * x.w);
    let ty = lerp_table(x.h);
    let tx = lerp_table(x.w);
    let mut out = Feat::zeros(x.c, h2, w2);
    let mut row = vec![0.0; w2];
    for ch in 0..x.c {
        let src = &x.data[ch * x.plane()..(ch + 1) * x.plane()];
        let dst = &mut out.data[ch * h2 * w2..(ch + 1) * h2 * w2];
        // horizontally interpolated rows, cached per source row
        let mut wide = vec![0.0; x.h * w2];
        for y in 0..x.h {
            let s = &src[y * x.w..(y + 1) * x.w];
            for (o, t) in wide[y * w2..(y + 1) * w2].iter_mut().zip(&tx) {
                *o = t.w_lo * s[t.lo] + t.w_hi * s[t.hi];
            }
        }
        for (oy, t) in ty.iter().enumerate() {
            let a = &wide[t.lo * w2..(t.lo + 1) * w2];
            let b = &wide[t.hi * w2..(t.hi + 1) * w2];
            for ((r, &va), &vb) in row.iter_mut().zip(a).zip(b) {
                *r = t.w_lo * va + t.w_hi * vb;
            }
            dst[oy * w2..(oy + 1) * w2].copy_from_slice(&row);
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &Feat, h: usize, w: usize) -> Feat {
    let w2 = 2 * w;
    let ty = lerp_table(h);
    let tx = lerp_table(w);
    let mut dx = Feat::zeros(dout.c, h, w);
    for ch in 0..dout.c {
        let g = &dout.data[ch * dout.plane()..(ch + 1) * dout.plane()];
        let mut dwide = vec![0.0; h * w2];
        for (oy, t) in ty.iter().enumerate() {
            let grow = &g[oy * w2..(oy + 1) * w2];
            for (x, &v) in grow.iter().enumerate() {
                dwide[t.lo * w2 + x] += t.w_lo * v;
                dwide[t.hi * w2 + x] += t.w_hi * v;
            }
        }
        let dst = &mut dx.data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for (ox, t) in tx.iter().enumerate() {
                let v = dwide[y * w2 + ox];
                dst[y * w + t.lo] += t.w_lo * v;
                dst[y * w + t.hi] += t.w_hi * v;
            }
        }
    }
    dx
}

pub(crate) fn concat_channels(a: &Feat, b: &Feat) -> Feat {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub(crate) fn split_channels(x: Feat, first: usize) -> (Feat, Feat) {
    let cut = first * x.plane();
    let (a, b) = x.data.split_at(cut);
    (
        Feat {
            c: first,
            h: x.h,
            w: x.w,
            data: a.to_vec(),
        },
        Feat {
            c: x.c - first,
            h: x.h,
            w: x.w,
            data: b.to_vec(),
        },
    )
}
