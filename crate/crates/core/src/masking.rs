//! Mask generation, masked-region filling and known-pixel compositing.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{check_same_shape, select_pixels, InpaintMask, MsiCube, RgbImage, ScenePair};
use crate::error::{Error, Result};
use crate::filter;

/// Default evaluation coverage.
pub const DEFAULT_COVERAGE: f64 = 0.25;

/// Value written into masked pixels by [`FillMode::Blank`].
pub const BLANK_VALUE: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    #[default]
    Rect,
    Blob,
}

/// What the masked region of a backend input is filled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    Blank,
    #[default]
    Historical,
}

impl fmt::Display for FillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FillMode::Blank => "blank",
            FillMode::Historical => "historical",
        })
    }
}

impl FromStr for FillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blank" => Ok(FillMode::Blank),
            "historical" => Ok(FillMode::Historical),
            other => Err(Error::InvalidValue(format!("unknown fill mode {other:?}"))),
        }
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rect" => Ok(MaskKind::Rect),
            "blob" => Ok(MaskKind::Blob),
            other => Err(Error::InvalidValue(format!("unknown mask kind {other:?}"))),
        }
    }
}

/// Generates a deterministic mask covering roughly `coverage` of an `h x w` grid.
///
/// `Rect` places one axis-aligned rectangle of `round(coverage * h * w)`
/// pixels; when that count has no factorisation fitting the grid the nearest
/// achievable area is used. `Blob` thresholds a Gaussian-smoothed noise field
/// at its k-th largest value, so the masked count is exact.
pub fn generate_mask(
    h: usize,
    w: usize,
    coverage: f64,
    kind: MaskKind,
    seed: u64,
) -> Result<InpaintMask> {
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::Precondition(format!(
            "coverage must be in [0, 1], got {coverage}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Precondition("mask size must be non-zero".into()));
    }
    let pixels = coverage * (h * w) as f64;
    if coverage > 0.0 && pixels < 1.0 {
        return Err(Error::DegenerateMask { coverage, h, w });
    }
    let area = pixels.round() as usize;
    if area == 0 {
        return Ok(InpaintMask::empty(h, w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = match kind {
        MaskKind::Rect => rect_mask(h, w, area, &mut rng),
        MaskKind::Blob => blob_mask(h, w, area, &mut rng),
    };
    Ok(InpaintMask::new(values))
}

/// Closest-to-grid-aspect `(rows, cols)` with `rows * cols == area`, if any.
fn factor_rect(h: usize, w: usize, area: usize) -> Option<(usize, usize)> {
    let target = (h as f64 / w as f64).ln();
    (1..=h.min(area))
        .filter(|rh| area.is_multiple_of(*rh) && area / rh <= w)
        .map(|rh| (rh, area / rh))
        .min_by(|a, b| {
            let da = ((a.0 as f64 / a.1 as f64).ln() - target).abs();
            let db = ((b.0 as f64 / b.1 as f64).ln() - target).abs();
            da.total_cmp(&db)
        })
}

fn rect_mask(h: usize, w: usize, area: usize, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let total = h * w;
    let (rh, rw) = (0..total)
        .flat_map(|d| [area.checked_sub(d), Some(area + d)])
        .flatten()
        .filter(|&a| a >= 1 && a <= total)
        .find_map(|a| factor_rect(h, w, a))
        .expect("a 1x1 rectangle always fits");
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    Array2::from_shape_fn((h, w), |(y, x)| {
        (top..top + rh).contains(&y) && (left..left + rw).contains(&x)
    })
}

fn blob_mask(h: usize, w: usize, area: usize, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let noise = Array2::from_shape_fn((h, w), |_| rng.random::<f64>());
    let sigma = (h.min(w) as f64 / 8.0).max(1.0);
    let radius = (3.0 * sigma).ceil() as usize;
    let field = filter::separable(noise.view(), &filter::gaussian_kernel(sigma, radius));
    let mut order: Vec<usize> = (0..h * w).collect();
    let flat = field.as_slice().expect("standard layout");
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    let mut out = Array2::from_elem((h, w), false);
    let out_flat = out.as_slice_mut().expect("standard layout");
    for &i in &order[..area] {
        out_flat[i] = true;
    }
    out
}

/// Fills masked pixels of the current cube with zeros or with historical values.
pub fn apply_fill(scene: &ScenePair, mask: &InpaintMask, mode: FillMode) -> Result<MsiCube> {
    let (h, w) = scene.dim();
    mask.check_dim(h, w)?;
    let out = match mode {
        FillMode::Blank => {
            let blank = ndarray::Array3::from_elem(scene.current.values().dim(), BLANK_VALUE);
            select_pixels(blank.view(), scene.current.values(), mask.values())
        }
        FillMode::Historical => select_pixels(
            scene.historical.values(),
            scene.current.values(),
            mask.values(),
        ),
    };
    Ok(MsiCube::from_trusted(out))
}

fn composite(
    synthesized: ArrayView3<'_, f64>,
    original: ArrayView3<'_, f64>,
    mask: &InpaintMask,
) -> Result<ndarray::Array3<f64>> {
    check_same_shape(original, synthesized)?;
    let (_, h, w) = original.dim();
    mask.check_dim(h, w)?;
    Ok(select_pixels(synthesized, original, mask.values()))
}

/// Masked pixels from `synthesized`, known pixels bit-exactly from `original`.
pub fn composite_known(
    synthesized: &MsiCube,
    original: &MsiCube,
    mask: &InpaintMask,
) -> Result<MsiCube> {
    composite(synthesized.values(), original.values(), mask).map(MsiCube::from_trusted)
}

/// [`composite_known`] for RGB images.
pub fn composite_known_rgb(
    synthesized: &RgbImage,
    original: &RgbImage,
    mask: &InpaintMask,
) -> Result<RgbImage> {
    composite(synthesized.values(), original.values(), mask).map(RgbImage::from_trusted)
}
