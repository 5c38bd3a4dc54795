//! RGB-to-MSI completion: given all bands outside the mask and a complete
//! RGB image, synthesize the ten non-RGB bands inside the mask with a
//! Deep-Image-Prior fit.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{extract_rgb, InpaintMask, MsiCube, RgbImage, NUM_BANDS, RGB_BANDS};
use crate::dip::{noise_input, train_dip, LossMask, SkipNetConfig, TrainSpec};
use crate::error::{Error, Result};
use crate::masking::composite_known_rgb;

/// What the completion network receives as input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompletionInput {
    #[default]
    Noise,
    Rgb,
}

/// Where a value of the completed cube comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    RgbSource,
    Network,
}

fn is_rgb_band(band: usize) -> bool {
    RGB_BANDS.contains(&band)
}

/// Per-element source of the completed cube for `mask`.
pub fn provenance(mask: &InpaintMask) -> Array3<Provenance> {
    let (h, w) = mask.dim();
    Array3::from_shape_fn((NUM_BANDS, h, w), |(b, r, c)| {
        if !mask.is_missing(r, c) {
            Provenance::Original
        } else if is_rgb_band(b) {
            Provenance::RgbSource
        } else {
            Provenance::Network
        }
    })
}

/// Training target and loss mask: every RGB pixel counts (known ones taken
/// from the cube), the other bands only where known.
pub fn build_completion_target(
    current_masked: &MsiCube,
    inpainted_rgb: &RgbImage,
    mask: &InpaintMask,
) -> Result<(MsiCube, LossMask)> {
    let (h, w) = current_masked.dim();
    mask.check_dim(h, w)?;
    let rgb = composite_known_rgb(inpainted_rgb, &extract_rgb(current_masked), mask)?;
    let target = crate::data::insert_rgb(current_masked, &rgb)?;
    let lmask = Array3::from_shape_fn((NUM_BANDS, h, w), |(b, r, c)| {
        is_rgb_band(b) || !mask.is_missing(r, c)
    });
    Ok((target, LossMask::new(lmask)?))
}

/// Merges the three sources according to [`provenance`].
pub fn assemble(
    current_masked: &MsiCube,
    rgb_source: &RgbImage,
    synthesized: &Array3<f64>,
    mask: &InpaintMask,
) -> Result<MsiCube> {
    let (h, w) = current_masked.dim();
    mask.check_dim(h, w)?;
    if rgb_source.dim() != (h, w) || synthesized.dim() != (NUM_BANDS, h, w) {
        return Err(Error::ShapeMismatch {
            expected: vec![NUM_BANDS, h, w],
            got: synthesized.shape().to_vec(),
        });
    }
    let cur = current_masked.values();
    let rgb = rgb_source.values();
    let out = ndarray::Zip::indexed(&provenance(mask)).map_collect(|(b, r, c), p| match p {
        Provenance::Original => cur[[b, r, c]],
        Provenance::RgbSource => {
            let ch = RGB_BANDS.iter().position(|&x| x == b).expect("rgb band");
            rgb[[ch, r, c]]
        }
        Provenance::Network => synthesized[[b, r, c]].clamp(0.0, 1.0),
    });
    Ok(MsiCube::from_trusted(out))
}

/// Stage two with a noise input.
pub fn complete_msi(
    current_masked: &MsiCube,
    rgb_source: &RgbImage,
    mask: &InpaintMask,
    spec: &TrainSpec,
    config: &SkipNetConfig,
) -> Result<MsiCube> {
    complete_msi_with_input(current_masked, rgb_source, mask, spec, config, CompletionInput::Noise)
}

/// Stage two: fits a 13-band network to the completion target and assembles
/// the result. Channel counts of `config` are adjusted to the data.
pub fn complete_msi_with_input(
    current_masked: &MsiCube,
    rgb_source: &RgbImage,
    mask: &InpaintMask,
    spec: &TrainSpec,
    config: &SkipNetConfig,
    input: CompletionInput,
) -> Result<MsiCube> {
    let (target, lmask) = build_completion_target(current_masked, rgb_source, mask)?;
    if mask.is_empty() {
        return Ok(current_masked.clone());
    }
    let (h, w) = current_masked.dim();
    let input = match input {
        CompletionInput::Noise => noise_input(config.input_channels, h, w, spec.seed),
        CompletionInput::Rgb => rgb_source.values().to_owned(),
    };
    let config = SkipNetConfig {
        input_channels: input.dim().0,
        out_channels: NUM_BANDS,
        ..config.clone()
    };
    let fit = train_dip(&config, input.view(), target.values(), &lmask, spec)?;
    assemble(current_masked, rgb_source, &fit.output, mask)
}

/// Ground-truth RGB, the input of the ideal-RGB upper bound.
pub fn ideal_rgb(truth: &MsiCube) -> RgbImage {
    extract_rgb(truth)
}

/// Baseline: RGB from `rgb_source`, every other masked band value replaced
/// by the mean of that band over the known pixels.
pub fn mean_fill(current_masked: &MsiCube, rgb_source: &RgbImage, mask: &InpaintMask) -> Result<MsiCube> {
    let (h, w) = current_masked.dim();
    mask.check_dim(h, w)?;
    if mask.count() == h * w {
        return Err(Error::EmptyRegion);
    }
    let known = mask.values().mapv(|m| !m);
    let means: Vec<f64> = current_masked
        .values()
        .axis_iter(Axis(0))
        .map(|band| {
            let (sum, n) = band
                .iter()
                .zip(known.iter())
                .filter(|(_, &k)| k)
                .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
            sum / n as f64
        })
        .collect();
    let filled = Array3::from_shape_fn((NUM_BANDS, h, w), |(b, _, _)| means[b]);
    assemble(current_masked, rgb_source, &filled, mask)
}
