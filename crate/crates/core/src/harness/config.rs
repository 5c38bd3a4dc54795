use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::InpaintParams;
use crate::dip::{SkipNetConfig, TrainSpec};
use crate::error::{Error, Result};
use crate::masking::{MaskKind, DEFAULT_COVERAGE};
use crate::metrics::ChannelScope;
use crate::preprocess::DEFAULT_DN_SCALE;

/// An inpainting method evaluated by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SdInpaint,
    EdgeGuided,
    DirectDip,
    DirectDipHist,
    IdealRgb,
    Mock,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SdInpaint,
        Method::EdgeGuided,
        Method::DirectDip,
        Method::DirectDipHist,
        Method::IdealRgb,
        Method::Mock,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SdInpaint => "sd-inpaint",
            Method::EdgeGuided => "edge-guided",
            Method::DirectDip => "direct-dip",
            Method::DirectDipHist => "direct-dip-hist",
            Method::IdealRgb => "ideal-rgb",
            Method::Mock => "mock",
        }
    }

    /// Whether stage one goes through a diffusion backend.
    pub fn uses_diffusion(self) -> bool {
        matches!(self, Method::SdInpaint | Method::EdgeGuided)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// How each sample's mask is obtained. A `mask.npy` inside the sample
/// directory wins, then `path`, then generation from the sample seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub coverage: f64,
    pub kind: MaskKind,
    pub path: Option<PathBuf>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            coverage: DEFAULT_COVERAGE,
            kind: MaskKind::Rect,
            path: None,
        }
    }
}

/// Everything a `run` or `sweep` needs. Field names double as JSON keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset_dir: PathBuf,
    pub methods: Vec<Method>,
    pub mask: MaskConfig,
    pub backend_endpoint: Option<String>,
    /// Serve sd-inpaint and edge-guided with the mock backend.
    pub mock_backend: bool,
    pub mock_blend: f64,
    pub backend_timeout_secs: f64,
    pub inpaint_params: InpaintParams,
    pub train_spec: TrainSpec,
    pub skip_config: SkipNetConfig,
    pub scopes: Vec<ChannelScope>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub dn_scale: f64,
    pub save_outputs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            methods: vec![
                Method::Mock,
                Method::DirectDip,
                Method::DirectDipHist,
                Method::IdealRgb,
            ],
            mask: MaskConfig::default(),
            backend_endpoint: None,
            mock_backend: false,
            mock_blend: 1.0,
            backend_timeout_secs: 120.0,
            inpaint_params: InpaintParams::default(),
            train_spec: TrainSpec::default(),
            skip_config: SkipNetConfig::default(),
            scopes: vec![ChannelScope::All13, ChannelScope::Rgb3],
            output_dir: PathBuf::from("out"),
            seed: 0,
            workers: 1,
            dn_scale: DEFAULT_DN_SCALE,
            save_outputs: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Whether a diffusion method can be served at all.
    pub fn has_diffusion_backend(&self) -> bool {
        self.mock_backend || self.backend_endpoint.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.methods.iter().any(|m| m.uses_diffusion()) && !self.has_diffusion_backend() {
            return Err(Error::Config(
                "sd-inpaint and edge-guided need backend_endpoint or mock_backend".into(),
            ));
        }
        if self.scopes.is_empty() {
            return Err(Error::Config("at least one scope is required".into()));
        }
        if !(0.0..=1.0).contains(&self.mask.coverage) {
            return Err(Error::Config(format!(
                "mask coverage must lie in [0, 1], got {}",
                self.mask.coverage
            )));
        }
        if !(0.0..=1.0).contains(&self.mock_blend) {
            return Err(Error::Config(format!(
                "mock_blend must lie in [0, 1], got {}",
                self.mock_blend
            )));
        }
        if !(self.backend_timeout_secs.is_finite() && self.backend_timeout_secs > 0.0) {
            return Err(Error::Config("backend_timeout_secs must be positive".into()));
        }
        if !(self.dn_scale.is_finite() && self.dn_scale > 0.0) {
            return Err(Error::Config("dn_scale must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.inpaint_params.validate()?;
        self.train_spec.validate()?;
        self.skip_config.validate()
    }
}

/// Per-sample seed: a pure function of the run seed and the sample id, so
/// results do not depend on scheduling.
pub fn sample_seed(run_seed: u64, sample_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sample_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
