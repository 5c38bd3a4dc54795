//! Raster types shared by every stage, plus NPY tensor I/O.

mod npy;

pub use npy::{load_tensor, read_tensor, save_tensor, write_tensor};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Zip};

use crate::error::{Error, Result};

/// Number of Sentinel-2 L1C bands in a cube.
pub const NUM_BANDS: usize = 13;

/// Band order of every [`MsiCube`].
pub const BAND_NAMES: [&str; NUM_BANDS] = [
    "B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B10", "B11", "B12",
];

/// Cube band indices of the true-colour (R, G, B) channels: B04, B03, B02.
pub const RGB_BANDS: [usize; 3] = [3, 2, 1];

/// Smallest accepted cube height and width.
pub const MIN_SIDE: usize = 8;

fn check_unit_range(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    for v in values {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidValue(format!(
                "{what} value {v} is not a finite number in [0, 1]"
            )));
        }
    }
    Ok(())
}

/// A 13-band reflectance raster `[band, row, col]` with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MsiCube(Array3<f64>);

impl MsiCube {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c != NUM_BANDS {
            return Err(Error::InvalidValue(format!(
                "cube must have {NUM_BANDS} bands, got {c}"
            )));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::InvalidValue(format!(
                "cube must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
            )));
        }
        check_unit_range(values.iter().copied(), "cube")?;
        Ok(Self(values))
    }

    /// Wraps values produced by an operation that already maintains the invariants.
    pub(crate) fn from_trusted(values: Array3<f64>) -> Self {
        debug_assert!(Self::new(values.clone()).is_ok());
        Self(values)
    }

    pub fn values(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn band(&self, index: usize) -> ArrayView2<'_, f64> {
        self.0.slice(s![index, .., ..])
    }
}

/// A true-colour image `[channel, row, col]` in (R, G, B) order.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage(Array3<f64>);

impl RgbImage {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c != 3 {
            return Err(Error::InvalidValue(format!(
                "rgb image must have 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidValue("rgb image is empty".into()));
        }
        check_unit_range(values.iter().copied(), "rgb")?;
        Ok(Self(values))
    }

    pub(crate) fn from_trusted(values: Array3<f64>) -> Self {
        debug_assert!(Self::new(values.clone()).is_ok());
        Self(values)
    }

    pub fn values(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dim();
        (h, w)
    }
}

/// Binary missing-pixel map; `true` marks a pixel to synthesize.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InpaintMask(Array2<bool>);

impl InpaintMask {
    pub fn new(values: Array2<bool>) -> Self {
        Self(values)
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self(Array2::from_elem((h, w), false))
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self(Array2::from_elem((h, w), true))
    }

    /// Builds a mask from a numeric array holding only `0` and `1`.
    pub fn from_binary(values: ArrayView2<'_, f64>) -> Result<Self> {
        let mut out = Array2::from_elem(values.dim(), false);
        for (o, &v) in out.iter_mut().zip(values.iter()) {
            *o = if v == 1.0 {
                true
            } else if v == 0.0 {
                false
            } else {
                return Err(Error::InvalidValue(format!(
                    "mask values must be 0 or 1, got {v}"
                )));
            };
        }
        Ok(Self(out))
    }

    pub fn to_binary(&self) -> Array2<f64> {
        self.0.mapv(|m| if m { 1.0 } else { 0.0 })
    }

    pub fn values(&self) -> ArrayView2<'_, bool> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.0[(row, col)]
    }

    /// Number of missing pixels.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub(crate) fn check_dim(&self, h: usize, w: usize) -> Result<()> {
        if self.dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                got: vec![self.dim().0, self.dim().1],
            });
        }
        Ok(())
    }
}

/// A current cube and a co-registered historical cube of the same place.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub current: MsiCube,
    pub historical: MsiCube,
}

impl ScenePair {
    pub fn new(current: MsiCube, historical: MsiCube) -> Result<Self> {
        if current.dim() != historical.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![current.height(), current.width()],
                got: vec![historical.height(), historical.width()],
            });
        }
        Ok(Self {
            current,
            historical,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.current.dim()
    }
}

/// Selects bands (B04, B03, B02) as an (R, G, B) image.
pub fn extract_rgb(cube: &MsiCube) -> RgbImage {
    let (h, w) = cube.dim();
    let mut rgb = Array3::zeros((3, h, w));
    for (ch, &band) in RGB_BANDS.iter().enumerate() {
        rgb.slice_mut(s![ch, .., ..]).assign(&cube.band(band));
    }
    RgbImage(rgb)
}

/// Replaces bands (B04, B03, B02) with the channels of `rgb`; other bands are copied.
pub fn insert_rgb(cube: &MsiCube, rgb: &RgbImage) -> Result<MsiCube> {
    if cube.dim() != rgb.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![3, cube.height(), cube.width()],
            got: rgb.0.shape().to_vec(),
        });
    }
    let mut out = cube.0.clone();
    for (ch, &band) in RGB_BANDS.iter().enumerate() {
        out.slice_mut(s![band, .., ..])
            .assign(&rgb.0.slice(s![ch, .., ..]));
    }
    Ok(MsiCube(out))
}

pub(crate) fn check_same_shape(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-pixel select: `pick_a[row, col]` chooses `a`, otherwise `b`, on every channel.
pub(crate) fn select_pixels(
    a: ArrayView3<'_, f64>,
    b: ArrayView3<'_, f64>,
    pick_a: ArrayView2<'_, bool>,
) -> Array3<f64> {
    let mut out = b.to_owned();
    for (mut plane, a_plane) in out.outer_iter_mut().zip(a.outer_iter()) {
        Zip::from(&mut plane)
            .and(&a_plane)
            .and(&pick_a)
            .for_each(|o, &av, &m| {
                if m {
                    *o = av;
                }
            });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(seed: u64, h: usize, w: usize) -> MsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MsiCube::new(Array3::from_shape_fn((NUM_BANDS, h, w), |_| rng.random())).unwrap()
    }

    #[test]
    fn extract_constant_bands() {
        let mut v = Array3::zeros((NUM_BANDS, 8, 8));
        v.slice_mut(s![3, .., ..]).fill(0.5);
        v.slice_mut(s![2, .., ..]).fill(0.25);
        v.slice_mut(s![1, .., ..]).fill(0.125);
        let rgb = extract_rgb(&MsiCube::new(v).unwrap());
        assert!(rgb.values().slice(s![0, .., ..]).iter().all(|&x| x == 0.5));
        assert!(rgb.values().slice(s![1, .., ..]).iter().all(|&x| x == 0.25));
        assert!(rgb.values().slice(s![2, .., ..]).iter().all(|&x| x == 0.125));
    }

    #[test]
    fn extract_pixel_indices() {
        let cube = random_cube(3, 9, 11);
        let rgb = extract_rgb(&cube);
        let c = cube.values();
        let r = rgb.values();
        assert_eq!(r[(0, 0, 0)], c[(3, 0, 0)]);
        assert_eq!(r[(1, 0, 0)], c[(2, 0, 0)]);
        assert_eq!(r[(2, 0, 0)], c[(1, 0, 0)]);
    }

    #[test]
    fn insert_extract_identity() {
        let cube = random_cube(4, 8, 8);
        assert_eq!(insert_rgb(&cube, &extract_rgb(&cube)).unwrap(), cube);
    }

    #[test]
    fn insert_zeros_touches_only_rgb() {
        let cube = random_cube(5, 8, 10);
        let zeros = RgbImage::new(Array3::zeros((3, 8, 10))).unwrap();
        let out = insert_rgb(&cube, &zeros).unwrap();
        for b in RGB_BANDS {
            assert!(out.band(b).iter().all(|&v| v == 0.0));
        }
        assert_eq!(out.band(0), cube.band(0));
    }

    #[test]
    fn insert_keeps_non_rgb_checksum() {
        let cube = random_cube(6, 12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rgb = RgbImage::new(Array3::from_shape_fn((3, 12, 12), |_| rng.random())).unwrap();
        let out = insert_rgb(&cube, &rgb).unwrap();
        let checksum = |c: &MsiCube| -> f64 {
            (0..NUM_BANDS)
                .filter(|b| !RGB_BANDS.contains(b))
                .map(|b| c.band(b).sum())
                .sum()
        };
        assert_eq!(checksum(&out), checksum(&cube));
        assert_eq!(extract_rgb(&out), rgb);
    }

    #[test]
    fn insert_rejects_size_mismatch() {
        let cube = random_cube(8, 8, 8);
        let rgb = RgbImage::new(Array3::zeros((3, 8, 9))).unwrap();
        assert!(matches!(
            insert_rgb(&cube, &rgb),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cube_constructor_rejects_bad_shapes() {
        assert!(MsiCube::new(Array3::zeros((12, 8, 8))).is_err());
        assert!(MsiCube::new(Array3::zeros((13, 7, 8))).is_err());
        assert!(RgbImage::new(Array3::zeros((4, 8, 8))).is_err());
    }

    #[test]
    fn mask_from_binary_rejects_other_values() {
        let v = Array2::from_elem((2, 2), 0.5);
        assert!(InpaintMask::from_binary(v.view()).is_err());
        let v = Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
        let m = InpaintMask::from_binary(v.view()).unwrap();
        assert_eq!(m.count(), 1);
        assert_eq!(m.to_binary(), v);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn invalid_value() -> impl Strategy<Value = f64> {
            prop_oneof![
                Just(f64::NAN),
                Just(f64::INFINITY),
                Just(f64::NEG_INFINITY),
                (1e-9f64..1e6).prop_map(|d| 1.0 + d),
                (1e-9f64..1e6).prop_map(|d| -d),
            ]
        }

        proptest! {
            #[test]
            fn constructors_reject_invalid(
                bad in invalid_value(),
                pos in 0usize..(NUM_BANDS * 64),
            ) {
                let mut v = Array3::from_elem((NUM_BANDS, 8, 8), 0.5);
                *v.iter_mut().nth(pos).unwrap() = bad;
                prop_assert!(MsiCube::new(v).is_err());

                let mut v = Array3::from_elem((3, 8, 8), 0.5);
                *v.iter_mut().nth(pos % (3 * 64)).unwrap() = bad;
                prop_assert!(RgbImage::new(v).is_err());
            }
        }
    }
}
