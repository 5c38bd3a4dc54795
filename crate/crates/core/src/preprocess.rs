//! Raw digital numbers to `[0, 1]` reflectance, and saturation screening.

use ndarray::{Array3, ArrayView3};

use crate::data::{MsiCube, NUM_BANDS};
use crate::error::{Error, Result};

/// Sentinel-2 L1C digital-number scale.
pub const DEFAULT_DN_SCALE: f64 = 10_000.0;

/// Samples whose pre-clip mean exceeds this are treated as saturated.
pub const SATURATION_MEAN: f64 = 0.9;

/// Raw Sentinel-2 digital numbers `[13, H, W]`, finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCube(Array3<f64>);

impl RawCube {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.dim().0 != NUM_BANDS {
            return Err(Error::InvalidValue(format!(
                "raw cube must have {NUM_BANDS} bands, got {}",
                values.dim().0
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidValue(format!(
                "raw value {v} is not finite and non-negative"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    /// `raw / scale` without clipping, the input to [`saturation_check`].
    pub fn scaled(&self, scale: f64) -> Result<Array3<f64>> {
        check_scale(scale)?;
        Ok(self.0.mapv(|v| v / scale))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Saturation {
    Accept,
    Reject,
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidValue(format!("scale must be positive, got {scale}")));
    }
    Ok(())
}

/// `clip(raw / scale, 0, 1)` elementwise.
pub fn normalize_raw(raw: &RawCube, scale: f64) -> Result<MsiCube> {
    let scaled = raw.scaled(scale)?;
    MsiCube::new(scaled.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Rejects a sample whose mean over all elements, before clipping, is above 0.9.
pub fn saturation_check(pre_clip: ArrayView3<'_, f64>) -> Saturation {
    let mean = pre_clip.mean().unwrap_or(0.0);
    // summation rounding must not turn a mean of exactly 0.9 into a rejection
    if mean > SATURATION_MEAN + 1e-12 {
        Saturation::Reject
    } else {
        Saturation::Accept
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use proptest::prelude::*;

    fn raw_const(v: f64) -> RawCube {
        RawCube::new(Array3::from_elem((NUM_BANDS, 8, 8), v)).unwrap()
    }

    #[test]
    fn unit_and_clipped_values() {
        let c = normalize_raw(&raw_const(10_000.0), DEFAULT_DN_SCALE).unwrap();
        assert!(c.values().iter().all(|&v| v == 1.0));
        let c = normalize_raw(&raw_const(12_000.0), DEFAULT_DN_SCALE).unwrap();
        assert!(c.values().iter().all(|&v| v == 1.0));
        let c = normalize_raw(&raw_const(2345.0), DEFAULT_DN_SCALE).unwrap();
        assert!(c.values().iter().all(|&v| v == 2345.0 / 10_000.0));
        assert!((c.values()[(0, 0, 0)] - 0.2345).abs() < 1e-15);
    }

    #[test]
    fn non_positive_scale_is_an_error() {
        assert!(normalize_raw(&raw_const(1.0), 0.0).is_err());
        assert!(normalize_raw(&raw_const(1.0), -2.0).is_err());
    }

    #[test]
    fn raw_rejects_negative() {
        assert!(RawCube::new(Array3::from_elem((NUM_BANDS, 8, 8), -1.0)).is_err());
    }

    #[test]
    fn saturation_threshold() {
        let c = Array3::from_elem((NUM_BANDS, 8, 8), 0.95);
        assert_eq!(saturation_check(c.view()), Saturation::Reject);
        let c = Array3::from_elem((NUM_BANDS, 8, 8), 0.5);
        assert_eq!(saturation_check(c.view()), Saturation::Accept);
    }

    #[test]
    fn mean_exactly_at_threshold_is_accepted() {
        // half 0.8, half 1.0: mean 0.9
        let mut c = Array3::from_elem((NUM_BANDS, 8, 8), 0.8);
        c.slice_mut(s![.., ..4, ..]).fill(1.0);
        assert_eq!(saturation_check(c.view()), Saturation::Accept);
        c.slice_mut(s![.., 4.., ..]).fill(0.8 + 1e-9);
        assert_eq!(saturation_check(c.view()), Saturation::Reject);
    }

    proptest! {
        #[test]
        fn output_is_valid_cube(seed in any::<u64>(), hi in 0.0f64..30_000.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let raw = RawCube::new(Array3::from_shape_fn((NUM_BANDS, 8, 9), |_| rng.random::<f64>() * hi)).unwrap();
            prop_assert!(normalize_raw(&raw, DEFAULT_DN_SCALE).is_ok());
        }

        #[test]
        fn idempotent_with_unit_scale(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v = Array3::from_shape_fn((NUM_BANDS, 8, 8), |_| rng.random::<f64>());
            let cube = normalize_raw(&RawCube::new(v.clone()).unwrap(), 1.0).unwrap();
            let again = normalize_raw(&RawCube::new(cube.values().to_owned()).unwrap(), 1.0).unwrap();
            prop_assert_eq!(cube.values().to_owned(), v);
            prop_assert_eq!(again, cube);
        }
    }
}
