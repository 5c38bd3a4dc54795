use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde_json::Value;

use super::{evaluate_rgb, list_samples, load_sample, ExperimentConfig, Loaded, Method, Outcome, Runner, Sample};
use crate::backends::InpaintParams;
use crate::error::{Error, Result};
use crate::masking::FillMode;
use crate::metrics::ChannelScope;

/// A stage-one parameter that can be swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SweepAxis {
    MaskFillMode,
    TextGuidanceScale,
    NumSteps,
    EdgeGuidanceScale,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [
        SweepAxis::MaskFillMode,
        SweepAxis::TextGuidanceScale,
        SweepAxis::NumSteps,
        SweepAxis::EdgeGuidanceScale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::MaskFillMode => "mask_fill_mode",
            SweepAxis::TextGuidanceScale => "text_guidance_scale",
            SweepAxis::NumSteps => "num_steps",
            SweepAxis::EdgeGuidanceScale => "edge_guidance_scale",
        }
    }

    /// Plain inpainting has no edge control, so it is not run on this axis.
    pub fn applies_to_sd(self) -> bool {
        self != SweepAxis::EdgeGuidanceScale
    }

    fn current(self, p: &InpaintParams) -> SweepValue {
        match self {
            SweepAxis::MaskFillMode => SweepValue::Fill(p.mask_fill_mode),
            SweepAxis::TextGuidanceScale => SweepValue::Real(p.text_guidance_scale),
            SweepAxis::NumSteps => SweepValue::Int(p.num_steps),
            SweepAxis::EdgeGuidanceScale => SweepValue::Real(p.edge_guidance_scale),
        }
    }

    fn parse_value(self, v: &Value) -> Result<SweepValue> {
        let bad = || Error::Config(format!("invalid value {v} for {}", self.as_str()));
        match self {
            SweepAxis::MaskFillMode => v
                .as_str()
                .ok_or_else(bad)?
                .parse()
                .map(SweepValue::Fill)
                .map_err(|_| bad()),
            SweepAxis::NumSteps => v
                .as_u64()
                .filter(|&n| n >= 1)
                .and_then(|n| u32::try_from(n).ok())
                .map(SweepValue::Int)
                .ok_or_else(bad),
            SweepAxis::TextGuidanceScale | SweepAxis::EdgeGuidanceScale => v
                .as_f64()
                .filter(|x| x.is_finite() && *x >= 0.0)
                .map(SweepValue::Real)
                .ok_or_else(bad),
        }
    }

    fn apply(self, value: SweepValue, p: &mut InpaintParams) {
        match (self, value) {
            (SweepAxis::MaskFillMode, SweepValue::Fill(f)) => p.mask_fill_mode = f,
            (SweepAxis::TextGuidanceScale, SweepValue::Real(x)) => p.text_guidance_scale = x,
            (SweepAxis::NumSteps, SweepValue::Int(n)) => p.num_steps = n,
            (SweepAxis::EdgeGuidanceScale, SweepValue::Real(x)) => p.edge_guidance_scale = x,
            (axis, value) => unreachable!("{value} is not a value of {}", axis.as_str()),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownParameter(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Fill(FillMode),
    Real(f64),
    Int(u32),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Fill(m) => write!(f, "{m}"),
            SweepValue::Real(x) => write!(f, "{x:?}"),
            SweepValue::Int(n) => write!(f, "{n}"),
        }
    }
}

/// Values to try per axis. Axes are always visited in the order of
/// [`SweepAxis::ALL`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    axes: Vec<(SweepAxis, Vec<SweepValue>)>,
}

impl SweepGrid {
    /// Parses `{"parameter": [values...], ...}`.
    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Config("a sweep grid must be a JSON object".into()))?;
        let mut axes = Vec::new();
        for (name, values) in obj {
            let axis: SweepAxis = name.parse()?;
            let list = values
                .as_array()
                .ok_or_else(|| Error::Config(format!("{name} must map to a list")))?;
            let parsed = list.iter().map(|x| axis.parse_value(x)).collect::<Result<Vec<_>>>()?;
            axes.push((axis, parsed));
        }
        axes.sort_by_key(|(a, _)| *a);
        Ok(Self { axes })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::Config(format!("sweep grid: {e}")))?;
        Self::from_json(&v)
    }

    /// The four parameter tests: fill content, text guidance, sampling steps and edge guidance.
    pub fn table_one() -> Self {
        Self {
            axes: vec![
                (
                    SweepAxis::MaskFillMode,
                    vec![SweepValue::Fill(FillMode::Blank), SweepValue::Fill(FillMode::Historical)],
                ),
                (
                    SweepAxis::TextGuidanceScale,
                    vec![SweepValue::Real(0.0), SweepValue::Real(1.0), SweepValue::Real(7.5)],
                ),
                (
                    SweepAxis::NumSteps,
                    vec![SweepValue::Int(20), SweepValue::Int(50), SweepValue::Int(100)],
                ),
                (
                    SweepAxis::EdgeGuidanceScale,
                    vec![SweepValue::Real(0.1), SweepValue::Real(0.5), SweepValue::Real(1.0)],
                ),
            ],
        }
    }

    pub fn axes(&self) -> &[(SweepAxis, Vec<SweepValue>)] {
        &self.axes
    }

    pub fn is_empty(&self) -> bool {
        self.axes.iter().all(|(_, v)| v.is_empty())
    }
}

/// Mean stage-one metrics of one model under one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepMetrics {
    pub ssim_whole: f64,
    pub ssim_mask: f64,
    pub rmse_whole: f64,
    pub rmse_mask: f64,
}

/// One configuration of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Axis name, or `base` for the single run of an empty grid.
    pub parameter: String,
    pub value: String,
    /// Whether `value` is the base configuration's value.
    pub is_default: bool,
    pub params: InpaintParams,
    /// `None` where plain inpainting does not apply.
    pub sd: Option<SweepMetrics>,
    pub edge: Option<SweepMetrics>,
    pub n_samples: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

fn mean_metrics(outcomes: &[Outcome]) -> Option<SweepMetrics> {
    let reports: Vec<_> = outcomes
        .iter()
        .filter_map(|o| match o {
            Outcome::Evaluated(r) => Some(r),
            Outcome::Failed { .. } => None,
        })
        .collect();
    let n = reports.len() as f64;
    let mean = |f: fn(&crate::metrics::EvalReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    Some(SweepMetrics {
        ssim_whole: mean(|r| r.ssim_whole),
        ssim_mask: mean(|r| r.ssim_mask),
        rmse_whole: mean(|r| r.rmse_whole),
        rmse_mask: mean(|r| r.rmse_mask),
    })
}

fn stage_one_outcomes(
    runner: &Runner,
    samples: &[Sample],
    method: Method,
    params: &InpaintParams,
) -> Vec<Outcome> {
    samples
        .par_iter()
        .map(|sample| {
            runner
                .mask_for(sample)
                .and_then(|mask| {
                    let rgb = runner.stage_one(sample, &mask, method, params)?;
                    evaluate_rgb(&rgb, sample, &mask, method.as_str())
                })
                .map(Outcome::Evaluated)
                .unwrap_or_else(|e| {
                    log::warn!("{}: {method} failed: {e}", sample.id);
                    Outcome::Failed {
                        sample_id: sample.id.clone(),
                        method: method.to_string(),
                        scope: ChannelScope::Rgb3,
                        error: e.to_string(),
                    }
                })
        })
        .collect()
}

/// One-at-a-time sweep of the stage-one models: each axis value is tried
/// with every other parameter at its `base.inpaint_params` value. Plain and
/// edge-guided inpainting are both evaluated on the RGB bands.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepReport> {
    if !base.has_diffusion_backend() {
        return Err(Error::Config(
            "a sweep needs backend_endpoint or mock_backend".into(),
        ));
    }
    let config = ExperimentConfig {
        methods: vec![Method::SdInpaint, Method::EdgeGuided],
        ..base.clone()
    };
    let runner = Runner::new(config)?;
    let entries = list_samples(&base.dataset_dir)?;
    let samples: Vec<Sample> = entries
        .iter()
        .map(|e| load_sample(e, base.dn_scale))
        .filter_map(|r| match r {
            Ok(Loaded::Ready(s)) => Some(Ok(s)),
            Ok(Loaded::Saturated) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_>>()?;
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "no usable samples in {}",
            base.dataset_dir.display()
        )));
    }

    let defaults = &base.inpaint_params;
    let mut plan: Vec<(String, String, bool, bool, InpaintParams)> = Vec::new();
    if grid.is_empty() {
        plan.push(("base".into(), String::new(), true, true, defaults.clone()));
    }
    for (axis, values) in grid.axes() {
        for &value in values {
            let mut params = defaults.clone();
            axis.apply(value, &mut params);
            let is_default = axis.current(defaults) == value;
            plan.push((axis.to_string(), value.to_string(), is_default, axis.applies_to_sd(), params));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(base.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rows = pool.install(|| {
        plan.into_iter()
            .map(|(parameter, value, is_default, with_sd, params)| {
                log::info!("sweep {parameter} = {value}");
                let sd = with_sd.then(|| stage_one_outcomes(&runner, &samples, Method::SdInpaint, &params));
                let edge = stage_one_outcomes(&runner, &samples, Method::EdgeGuided, &params);
                let n_failed = edge.iter().chain(sd.iter().flatten()).filter(|o| o.is_failed()).count();
                SweepRow {
                    parameter,
                    value,
                    is_default,
                    sd: sd.as_deref().and_then(mean_metrics),
                    edge: mean_metrics(&edge),
                    params,
                    n_samples: samples.len(),
                    n_failed,
                }
            })
            .collect()
    });
    Ok(SweepReport { rows })
}

pub const SWEEP_HEADER: [&str; 13] = [
    "parameter",
    "value",
    "default",
    "sd_ssim_whole",
    "sd_ssim_mask",
    "sd_rmse_whole",
    "sd_rmse_mask",
    "eg_ssim_whole",
    "eg_ssim_mask",
    "eg_rmse_whole",
    "eg_rmse_mask",
    "n_samples",
    "n_failed",
];

fn metric_cells(m: Option<SweepMetrics>) -> [String; 4] {
    match m {
        Some(m) => [m.ssim_whole, m.ssim_mask, m.rmse_whole, m.rmse_mask].map(|v| v.to_string()),
        None => std::array::from_fn(|_| "NA".to_string()),
    }
}

/// Writes one row per configuration with both models side by side.
pub fn write_sweep_csv(path: &Path, report: &SweepReport) -> Result<()> {
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(SWEEP_HEADER).map_err(err)?;
    for row in &report.rows {
        let mut rec = vec![row.parameter.clone(), row.value.clone(), row.is_default.to_string()];
        rec.extend(metric_cells(row.sd));
        rec.extend(metric_cells(row.edge));
        rec.push(row.n_samples.to_string());
        rec.push(row.n_failed.to_string());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::write_dataset;

    #[test]
    fn grid_parsing() {
        let g = SweepGrid::from_json_str(
            r#"{"num_steps": [20, 50], "mask_fill_mode": ["blank"], "text_guidance_scale": [7.5]}"#,
        )
        .unwrap();
        let axes: Vec<_> = g.axes().iter().map(|(a, _)| *a).collect();
        assert_eq!(
            axes,
            [SweepAxis::MaskFillMode, SweepAxis::TextGuidanceScale, SweepAxis::NumSteps]
        );
        assert!(matches!(
            SweepGrid::from_json_str(r#"{"sampler": ["unipc"]}"#),
            Err(Error::UnknownParameter(p)) if p == "sampler"
        ));
        assert!(SweepGrid::from_json_str(r#"{"num_steps": [0]}"#).is_err());
        assert!(SweepGrid::from_json_str(r#"{"mask_fill_mode": ["noise"]}"#).is_err());
        assert!(SweepGrid::from_json_str("{}").unwrap().is_empty());
    }

    #[test]
    fn value_display() {
        assert_eq!(SweepValue::Real(0.0).to_string(), "0.0");
        assert_eq!(SweepValue::Real(7.5).to_string(), "7.5");
        assert_eq!(SweepValue::Int(20).to_string(), "20");
        assert_eq!(SweepValue::Fill(FillMode::Historical).to_string(), "historical");
    }

    fn base(dir: &Path) -> ExperimentConfig {
        write_dataset(&dir.join("data"), 2, 16, 16, 4).unwrap();
        ExperimentConfig {
            dataset_dir: dir.join("data"),
            output_dir: dir.join("out"),
            mock_backend: true,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn text_guidance_axis_keeps_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let grid = SweepGrid::from_json_str(r#"{"text_guidance_scale": [0.0, 1.0, 7.5]}"#).unwrap();
        let report = sweep(&base(dir.path()), &grid).unwrap();
        assert_eq!(report.rows.len(), 3);
        for (row, tg) in report.rows.iter().zip([0.0, 1.0, 7.5]) {
            assert_eq!(row.params.text_guidance_scale, tg);
            assert_eq!(row.params.mask_fill_mode, FillMode::Historical);
            assert_eq!(row.params.num_steps, 20);
            assert_eq!(row.params.edge_guidance_scale, 0.5);
            assert_eq!(row.is_default, tg == 1.0);
        }
    }

    #[test]
    fn empty_grid_is_single_base_run() {
        let dir = tempfile::tempdir().unwrap();
        let report = sweep(&base(dir.path()), &SweepGrid::default()).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].parameter, "base");
        assert!(report.rows[0].sd.is_some() && report.rows[0].edge.is_some());
    }

    #[test]
    fn mock_ignores_step_count() {
        let dir = tempfile::tempdir().unwrap();
        let grid = SweepGrid::from_json_str(r#"{"num_steps": [20, 50, 100]}"#).unwrap();
        let report = sweep(&base(dir.path()), &grid).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0].sd, report.rows[1].sd);
        assert_eq!(report.rows[1].sd, report.rows[2].sd);
        assert_eq!(report.rows[0].edge, report.rows[2].edge);
    }

    #[test]
    fn sweep_needs_a_backend() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            mock_backend: false,
            ..base(dir.path())
        };
        assert!(matches!(sweep(&cfg, &SweepGrid::table_one()), Err(Error::Config(_))));
    }
}
