//! Separable 2-D filtering with mirror (`d c b | a b c d | c b a`) borders.

use ndarray::{Array2, ArrayView2};

/// Maps a possibly out-of-range index onto `0..n` by mirroring about the
/// edge samples (the edge itself is not repeated).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalised 1-D Gaussian taps of length `2 * radius + 1`.
pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Correlates `img` with `taps` along rows then columns (`taps` has odd length).
pub(crate) fn separable(img: ArrayView2<'_, f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (taps.len() / 2) as isize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * img[(y, reflect(x as isize + k as isize - r, w))];
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp[(reflect(y as isize + k as isize - r, h), x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}
