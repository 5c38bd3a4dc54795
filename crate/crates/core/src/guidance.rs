//! Structural edge maps used as the control image for edge-guided inpainting.
//!
//! The built-in detector is a Sobel gradient magnitude on luma. An external
//! boundary detector can be used instead by loading its output with
//! [`EdgeMap::new`].

use ndarray::{Array2, ArrayView2};

use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::filter::reflect;

/// Single-channel edge strength in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap(Array2<f64>);

impl EdgeMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("edge value {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// ITU-R BT.601 luma of an RGB image.
pub fn luma(rgb: &RgbImage) -> Array2<f64> {
    let v = rgb.values();
    let (_, h, w) = v.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * v[(0, y, x)] + 0.587 * v[(1, y, x)] + 0.114 * v[(2, y, x)]
    })
}

/// Sobel gradient magnitude of luma, normalised by its maximum.
pub fn edge_map(rgb: &RgbImage) -> EdgeMap {
    let l = luma(rgb);
    let (h, w) = l.dim();
    let at = |y: isize, x: isize| l[(reflect(y, h), reflect(x, w))];
    let mut mag = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[(y as usize, x as usize)] = gx.hypot(gy);
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        mag.mapv_inplace(|m| m / max);
    } else {
        mag.fill(0.0);
    }
    EdgeMap(mag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(values: Array2<f64>) -> RgbImage {
        let (h, w) = values.dim();
        RgbImage::new(Array3::from_shape_fn((3, h, w), |(_, y, x)| values[(y, x)])).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let e = edge_map(&gray(Array2::from_elem((9, 9), 0.4)));
        assert!(e.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_peaks_beside_the_step() {
        let k = 6;
        let e = edge_map(&gray(Array2::from_shape_fn((10, 12), |(_, x)| {
            if x >= k { 1.0 } else { 0.0 }
        })));
        for y in 0..10 {
            // gx is +-4 at columns k-1 and k, zero elsewhere
            assert_eq!(e.values()[(y, k - 1)], 1.0);
            assert_eq!(e.values()[(y, k)], 1.0);
            for x in (0..k - 1).chain(k + 1..12) {
                assert_eq!(e.values()[(y, x)], 0.0, "column {x}");
            }
        }
    }

    #[test]
    fn random_input_in_range_with_unit_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rgb = RgbImage::new(Array3::from_shape_fn((3, 16, 20), |_| rng.random())).unwrap();
        let e = edge_map(&rgb);
        assert!(e.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(e.values().iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn invariant_to_brightness_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let base = Array3::from_shape_fn((3, 16, 16), |_| rng.random::<f64>() * 0.7);
            let c = rng.random::<f64>() * 0.3;
            let a = edge_map(&RgbImage::new(base.clone()).unwrap());
            let b = edge_map(&RgbImage::new(base.mapv(|v| v + c)).unwrap());
            for (x, y) in a.values().iter().zip(b.values().iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn edge_map_rejects_out_of_range() {
        assert!(EdgeMap::new(Array2::from_elem((2, 2), 1.5)).is_err());
    }
}
