//! Two-stage inpainting for 13-band Sentinel-2 imagery.
//!
//! Stage one fills the RGB bands with a pluggable backend (an external
//! diffusion service, a deterministic mock, or Deep-Image-Prior). Stage two
//! lifts the inpainted RGB to all bands by fitting a randomly initialised
//! skip network to the known pixels ([`rgb2msi`]). Around that sit masking,
//! historical filling, edge guidance, masked SSIM/RMSE and an experiment
//! harness.

pub mod backends;
pub mod data;
pub mod dip;
pub mod error;
mod filter;
pub mod guidance;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod png8;
pub mod preprocess;
pub mod rgb2msi;
pub mod synth;

pub use data::{InpaintMask, MsiCube, RgbImage, ScenePair};
pub use error::{Error, Result};
