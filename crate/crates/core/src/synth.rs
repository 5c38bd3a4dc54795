//! Deterministic synthetic scene pairs with realistic cross-band structure.
//!
//! Three smooth latent fields (orthonormalised Gaussian-filtered noise) drive
//! every band through a fixed affine map and a logistic squash. The RGB
//! loadings are linearly independent, so the RGB bands determine the latents
//! and therefore every other band. The historical cube is the current cube
//! shifted by one pixel and modulated by a smooth +-10% brightness field.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{save_tensor, MsiCube, ScenePair, NUM_BANDS};
use crate::error::{Error, Result};
use crate::filter;
use crate::preprocess::DEFAULT_DN_SCALE;

/// Scene sides must be multiples of this (the default network has 4 scales).
pub const SIZE_MULTIPLE: usize = 16;

pub const MIN_SIZE: usize = 16;

/// Per band: offset, then loadings on the three latents.
const MIXING: [[f64; 4]; NUM_BANDS] = [
    [-1.4, 0.7, -0.1, 0.2],  // B01
    [-1.5, 0.8, -0.2, 0.3],  // B02
    [-1.3, 0.8, 0.1, 0.1],   // B03
    [-1.5, 0.8, -0.3, -0.2], // B04
    [-1.0, 0.8, 0.1, 0.0],   // B05
    [-0.7, 0.7, 0.3, 0.0],   // B06
    [-0.6, 0.7, 0.4, 0.0],   // B07
    [-0.6, 0.8, 0.3, 0.0],   // B08
    [-0.5, 0.7, 0.4, -0.1],  // B8A
    [-1.8, 0.4, 0.1, 0.3],   // B09
    [-3.0, 0.3, 0.0, 0.2],   // B10
    [-0.8, 0.7, -0.1, -0.4], // B11
    [-1.1, 0.7, -0.2, -0.4], // B12
];

/// Historical brightness modulation amplitude.
const BRIGHTNESS_SWING: f64 = 0.1;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn smooth_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let noise = Array2::from_shape_fn((h, w), |_| StandardNormal.sample(rng));
    let sigma = h.min(w) as f64 / 8.0;
    let radius = (3.0 * sigma).ceil() as usize;
    filter::separable(noise.view(), &filter::gaussian_kernel(sigma, radius))
}

/// Gram-Schmidt on the centred fields, then unit variance.
fn orthonormalise(fields: &mut [Array2<f64>]) {
    let n = fields[0].len() as f64;
    for i in 0..fields.len() {
        let mean = fields[i].mean().unwrap();
        fields[i].mapv_inplace(|v| v - mean);
        for j in 0..i {
            let (done, rest) = fields.split_at_mut(i);
            let proj = (&rest[0] * &done[j]).sum() / n;
            rest[0].scaled_add(-proj, &done[j]);
        }
        let sd = ((&fields[i] * &fields[i]).sum() / n).sqrt();
        fields[i].mapv_inplace(|v| v / sd);
    }
}

pub fn generate_scene_pair(h: usize, w: usize, seed: u64) -> Result<ScenePair> {
    if h < MIN_SIZE || w < MIN_SIZE || !h.is_multiple_of(SIZE_MULTIPLE) || !w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::Precondition(format!(
            "scene size {h}x{w} must be at least {MIN_SIZE} and a multiple of {SIZE_MULTIPLE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latents: Vec<Array2<f64>> = (0..3).map(|_| smooth_field(h, w, &mut rng)).collect();
    orthonormalise(&mut latents);

    let current = Array3::from_shape_fn((NUM_BANDS, h, w), |(b, y, x)| {
        let [offset, l0, l1, l2] = MIXING[b];
        logistic(offset + l0 * latents[0][(y, x)] + l1 * latents[1][(y, x)] + l2 * latents[2][(y, x)])
    });

    let mut brightness = vec![smooth_field(h, w, &mut rng)];
    orthonormalise(&mut brightness);
    let gain = brightness[0].mapv(|g| 1.0 + BRIGHTNESS_SWING * g.tanh());
    let historical = Array3::from_shape_fn((NUM_BANDS, h, w), |(b, y, x)| {
        let shifted = current[(b, y, x.saturating_sub(1))];
        (shifted * gain[(y, x)]).clamp(0.0, 1.0)
    });

    ScenePair::new(MsiCube::new(current)?, MsiCube::new(historical)?)
}

/// Writes `count` samples as `sample_NNN/{s2.npy, s2_historical.npy}` holding integer DNs.
pub fn write_dataset(dir: &Path, count: usize, h: usize, w: usize, seed: u64) -> Result<()> {
    for i in 0..count {
        let pair = generate_scene_pair(h, w, seed.wrapping_add(i as u64))?;
        let sample = dir.join(format!("sample_{i:03}"));
        std::fs::create_dir_all(&sample).map_err(|e| Error::io(&sample, e))?;
        for (name, cube) in [("s2.npy", &pair.current), ("s2_historical.npy", &pair.historical)] {
            let dn = cube.values().mapv(|v| (v * DEFAULT_DN_SCALE).round());
            save_tensor(dn.into_dyn().view(), sample.join(name))?;
        }
    }
    Ok(())
}
