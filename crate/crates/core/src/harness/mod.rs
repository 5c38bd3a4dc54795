//! Experiment orchestration: datasets, per-sample method runs, reports,
//! Table-I style parameter sweeps and comparison panels.

mod config;
mod dataset;
mod panel;
mod report;
mod sweep;

pub use config::{sample_seed, ExperimentConfig, MaskConfig, Method};
pub use dataset::{
    list_samples, load_mask, load_sample, Loaded, Sample, SampleEntry, CURRENT_FILE,
    HISTORICAL_FILE, MASK_FILE,
};
pub use panel::{render_panel, stretch, PanelColumn, PANEL_GAIN};
pub use report::{
    aggregate, format_summary, read_reports, read_summary, write_reports, write_summary, Outcome,
    SummaryRow,
};
pub use sweep::{sweep, write_sweep_csv, SweepAxis, SweepGrid, SweepReport, SweepRow, SweepValue};

use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;

use crate::backends::{
    direct_dip_inpaint, BackendRequest, DiffusionClient, InpaintBackend, InpaintParams,
    MockBackend,
};
use crate::data::{load_tensor, save_tensor};
use crate::data::{extract_rgb, insert_rgb, InpaintMask, MsiCube, RgbImage, ScenePair};
use crate::dip::TrainSpec;
use crate::error::{Error, Result};
use crate::guidance::EdgeMap;
use crate::masking::{apply_fill, composite_known_rgb, generate_mask, FillMode};
use crate::metrics::{evaluate_sample, ChannelScope, EvalReport};
use crate::png8;
use crate::rgb2msi::{complete_msi, ideal_rgb};

pub const REPORTS_FILE: &str = "reports.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SAMPLES_DIR: &str = "samples";

/// Executes methods on loaded samples with the backends a config asks for.
pub struct Runner {
    config: ExperimentConfig,
    sd: Box<dyn InpaintBackend>,
    edge: Box<dyn InpaintBackend>,
    shared_mask: Option<InpaintMask>,
    control: Option<EdgeMap>,
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mock = MockBackend {
            blend: config.mock_blend,
        };
        let timeout = Duration::from_secs_f64(config.backend_timeout_secs);
        let (sd, edge): (Box<dyn InpaintBackend>, Box<dyn InpaintBackend>) =
            match (&config.backend_endpoint, config.mock_backend) {
                (Some(url), false) => (
                    Box::new(DiffusionClient::new(url, timeout, false)),
                    Box::new(DiffusionClient::new(url, timeout, true)),
                ),
                _ => (Box::new(mock), Box::new(mock)),
            };
        let shared_mask = config.mask.path.as_deref().map(load_mask).transpose()?;
        Ok(Self {
            config,
            sd,
            edge,
            shared_mask,
            control: None,
        })
    }

    /// Uses `control` instead of the historical edge map for edge-guided requests.
    pub fn with_control(mut self, control: EdgeMap) -> Self {
        self.control = Some(control);
        self
    }

    /// Replaces the backend serving a diffusion method.
    pub fn with_backend(mut self, method: Method, backend: Box<dyn InpaintBackend>) -> Self {
        match method {
            Method::SdInpaint => self.sd = backend,
            Method::EdgeGuided => self.edge = backend,
            _ => {}
        }
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn seed_for(&self, sample: &Sample) -> u64 {
        sample_seed(self.config.seed, &sample.id)
    }

    /// The sample's own mask, else the configured file, else a generated one.
    pub fn mask_for(&self, sample: &Sample) -> Result<InpaintMask> {
        let (h, w) = sample.scene.dim();
        let mask = match (&sample.mask, &self.shared_mask) {
            (Some(m), _) | (None, Some(m)) => m.clone(),
            (None, None) => {
                let m = &self.config.mask;
                generate_mask(h, w, m.coverage, m.kind, self.seed_for(sample))?
            }
        };
        mask.check_dim(h, w)?;
        Ok(mask)
    }

    fn train_spec(&self, sample: &Sample) -> TrainSpec {
        TrainSpec {
            seed: self.seed_for(sample),
            ..self.config.train_spec.clone()
        }
    }

    /// What a method may see: masked current pixels blanked.
    fn observed(sample: &Sample, mask: &InpaintMask) -> Result<ScenePair> {
        let current = apply_fill(&sample.scene, mask, FillMode::Blank)?;
        ScenePair::new(current, sample.scene.historical.clone())
    }

    /// Stage-one RGB for a backend method, known pixels restored.
    pub fn stage_one(
        &self,
        sample: &Sample,
        mask: &InpaintMask,
        method: Method,
        params: &InpaintParams,
    ) -> Result<RgbImage> {
        let mock = MockBackend {
            blend: self.config.mock_blend,
        };
        let (backend, edge_guided): (&dyn InpaintBackend, bool) = match method {
            Method::SdInpaint => (self.sd.as_ref(), false),
            Method::EdgeGuided => (self.edge.as_ref(), true),
            Method::Mock => (&mock, false),
            other => {
                return Err(Error::Precondition(format!("{other} has no RGB stage")));
            }
        };
        let observed = Self::observed(sample, mask)?;
        let params = InpaintParams {
            seed: self.seed_for(sample),
            ..params.clone()
        };
        let mut request = BackendRequest::from_scene(&observed, mask, params, edge_guided)?;
        if let (true, Some(control)) = (edge_guided, &self.control) {
            request = BackendRequest::new(
                request.image().clone(),
                mask.clone(),
                Some(control.clone()),
                request.params().clone(),
            )?;
        }
        let rgb = backend.inpaint(&request)?;
        if rgb.dim() != sample.scene.dim() {
            return Err(Error::Protocol(format!(
                "{} returned a {:?} image for a {:?} request",
                backend.name(),
                rgb.dim(),
                sample.scene.dim()
            )));
        }
        composite_known_rgb(&rgb, &extract_rgb(&observed.current), mask)
    }

    /// Full 13-band output of one method.
    pub fn inpaint(&self, sample: &Sample, mask: &InpaintMask, method: Method) -> Result<MsiCube> {
        let spec = self.train_spec(sample);
        let net = &self.config.skip_config;
        let observed = Self::observed(sample, mask)?;
        match method {
            Method::DirectDip => direct_dip_inpaint(&observed, mask, false, &spec, net),
            Method::DirectDipHist => direct_dip_inpaint(&observed, mask, true, &spec, net),
            Method::IdealRgb => complete_msi(
                &observed.current,
                &ideal_rgb(&sample.scene.current),
                mask,
                &spec,
                net,
            ),
            Method::SdInpaint | Method::EdgeGuided | Method::Mock => {
                let rgb = self.stage_one(sample, mask, method, &self.config.inpaint_params)?;
                complete_msi(&observed.current, &rgb, mask, &spec, net)
            }
        }
    }

    /// Runs every configured method on one sample and evaluates each scope.
    /// Failures become [`Outcome::Failed`] rows; outputs are saved when
    /// `out_dir` is given.
    pub fn process(&self, sample: &Sample, out_dir: Option<&Path>) -> Result<Vec<Outcome>> {
        let mask = self.mask_for(sample)?;
        let dir = out_dir.map(|d| d.join(&sample.id));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            save_tensor(mask.to_binary().into_dyn().view(), d.join(MASK_FILE))?;
        }
        let mut outcomes = Vec::new();
        for &method in &self.config.methods {
            log::info!("{}: {method}", sample.id);
            let result = self.inpaint(sample, &mask, method).and_then(|out| {
                if let Some(d) = &dir {
                    save_output(d, method, &out)?;
                }
                self.config
                    .scopes
                    .iter()
                    .map(|&scope| {
                        evaluate_sample(&out, &sample.scene.current, &mask, scope, &sample.id, method.as_str())
                    })
                    .collect::<Result<Vec<EvalReport>>>()
            });
            match result {
                Ok(reports) => outcomes.extend(reports.into_iter().map(Outcome::Evaluated)),
                Err(e) => {
                    log::warn!("{}: {method} failed: {e}", sample.id);
                    outcomes.extend(self.config.scopes.iter().map(|&scope| Outcome::Failed {
                        sample_id: sample.id.clone(),
                        method: method.to_string(),
                        scope,
                        error: e.to_string(),
                    }));
                }
            }
        }
        Ok(outcomes)
    }

    fn failed_sample(&self, id: &str, error: &Error) -> Vec<Outcome> {
        self.config
            .methods
            .iter()
            .flat_map(|m| {
                self.config.scopes.iter().map(move |&scope| Outcome::Failed {
                    sample_id: id.to_string(),
                    method: m.to_string(),
                    scope,
                    error: error.to_string(),
                })
            })
            .collect()
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }
}

fn save_output(dir: &Path, method: Method, cube: &MsiCube) -> Result<()> {
    save_tensor(cube.values().into_dyn(), dir.join(format!("{method}.npy")))?;
    let preview = stretch(&extract_rgb(cube), PANEL_GAIN);
    let path = dir.join(format!("{method}.png"));
    std::fs::write(&path, png8::encode(preview.view())?).map_err(|e| Error::io(&path, e))
}

/// Everything a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub outcomes: Vec<Outcome>,
    pub summary: Vec<SummaryRow>,
    /// Samples that took part.
    pub samples: Vec<String>,
    /// Samples excluded as saturated.
    pub saturated: Vec<String>,
}

impl RunSummary {
    pub fn n_failed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_failed()).count()
    }
}

enum SampleResult {
    Done(String, Vec<Outcome>),
    Saturated(String),
}

/// Runs all methods on all samples of the dataset and writes `reports.csv`,
/// `summary.csv`, `config.json` and per-sample outputs under `output_dir`.
///
/// Per-sample failures are recorded, not raised. Errors are returned for an
/// invalid config, a missing or empty dataset, a dataset with no usable
/// sample, and output I/O.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunSummary> {
    let runner = Runner::new(config.clone())?;
    run_with(&runner)
}

/// [`run_pipeline`] with a prepared runner.
pub fn run_with(runner: &Runner) -> Result<RunSummary> {
    let config = runner.config();
    let entries = list_samples(&config.dataset_dir)?;
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "no sample_* directories in {}",
            config.dataset_dir.display()
        )));
    }
    let out = &config.output_dir;
    let samples_dir = out.join(SAMPLES_DIR);
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let save_dir: Option<PathBuf> = config.save_outputs.then_some(samples_dir);

    let results: Vec<Result<SampleResult>> = runner.pool()?.install(|| {
        entries
            .par_iter()
            .map(|entry| match load_sample(entry, config.dn_scale) {
                Ok(Loaded::Saturated) => {
                    log::info!("{}: saturated, skipped", entry.id);
                    Ok(SampleResult::Saturated(entry.id.clone()))
                }
                Ok(Loaded::Ready(sample)) => runner
                    .process(&sample, save_dir.as_deref())
                    .map(|o| SampleResult::Done(entry.id.clone(), o)),
                Err(e) => {
                    log::warn!("{}: cannot load: {e}", entry.id);
                    Ok(SampleResult::Done(entry.id.clone(), runner.failed_sample(&entry.id, &e)))
                }
            })
            .collect()
    });

    let mut summary = RunSummary {
        outcomes: Vec::new(),
        summary: Vec::new(),
        samples: Vec::new(),
        saturated: Vec::new(),
    };
    for r in results {
        match r? {
            SampleResult::Done(id, outcomes) => {
                summary.samples.push(id);
                summary.outcomes.extend(outcomes);
            }
            SampleResult::Saturated(id) => summary.saturated.push(id),
        }
    }
    if summary.samples.is_empty() {
        return Err(Error::Precondition(
            "every sample was excluded as saturated".into(),
        ));
    }
    summary.summary = aggregate(&summary.outcomes);
    write_reports(&out.join(REPORTS_FILE), &summary.outcomes)?;
    write_summary(&out.join(SUMMARY_FILE), &summary.summary)?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, config.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(summary)
}

/// Stage-one evaluation on the RGB bands: the composited RGB placed into
/// the ground-truth cube and scored in the `rgb3` scope.
pub fn evaluate_rgb(rgb: &RgbImage, sample: &Sample, mask: &InpaintMask, method: &str) -> Result<EvalReport> {
    let cube = insert_rgb(&sample.scene.current, rgb)?;
    evaluate_sample(&cube, &sample.scene.current, mask, ChannelScope::Rgb3, &sample.id, method)
}

/// Panel of the first `n` samples of a finished run: truth, historical,
/// masked input and the saved output of each configured method.
pub fn render_run_panel(config: &ExperimentConfig, n: usize) -> Result<Vec<u8>> {
    let runs = config.output_dir.join(SAMPLES_DIR);
    let mut columns = Vec::new();
    for entry in list_samples(&config.dataset_dir)? {
        if columns.len() == n {
            break;
        }
        let Loaded::Ready(sample) = load_sample(&entry, config.dn_scale)? else {
            continue;
        };
        let dir = runs.join(&sample.id);
        if !dir.is_dir() {
            continue;
        }
        let mask = load_mask(&dir.join(MASK_FILE))?;
        let input = apply_fill(&sample.scene, &mask, FillMode::Blank)?;
        let mut outputs = Vec::new();
        for method in &config.methods {
            let arr = load_tensor(dir.join(format!("{method}.npy")))?
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| Error::InvalidValue(e.to_string()))?;
            outputs.push(extract_rgb(&MsiCube::new(arr)?));
        }
        columns.push(PanelColumn {
            truth: extract_rgb(&sample.scene.current),
            historical: extract_rgb(&sample.scene.historical),
            input: extract_rgb(&input),
            outputs,
        });
    }
    render_panel(&columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dip::SkipNetConfig;
    use crate::synth::write_dataset;

    fn quick(dir: &Path, methods: Vec<Method>) -> ExperimentConfig {
        ExperimentConfig {
            dataset_dir: dir.join("data"),
            output_dir: dir.join("out"),
            methods,
            train_spec: TrainSpec {
                steps: 3,
                ..TrainSpec::default()
            },
            skip_config: SkipNetConfig::desk_scale(13),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn mock_with_empty_mask_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dir.path().join("data"), 1, 16, 16, 1).unwrap();
        let mut cfg = quick(dir.path(), vec![Method::Mock]);
        cfg.mask.coverage = 0.0;
        let run = run_pipeline(&cfg).unwrap();
        assert_eq!(run.outcomes.len(), 2);
        for o in &run.outcomes {
            let Outcome::Evaluated(r) = o else { panic!("{o:?}") };
            assert_eq!((r.ssim_whole, r.ssim_mask, r.rmse_whole, r.rmse_mask), (1.0, 1.0, 0.0, 0.0));
        }
        assert!(cfg.output_dir.join(REPORTS_FILE).exists());
        assert!(cfg.output_dir.join(SUMMARY_FILE).exists());
        assert!(cfg.output_dir.join("samples/sample_000/mock.npy").exists());
        assert!(cfg.output_dir.join("samples/sample_000/mock.png").exists());
    }

    #[test]
    fn missing_dataset_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(dir.path(), vec![Method::Mock]);
        assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
        std::fs::create_dir_all(&cfg.dataset_dir).unwrap();
        assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn unreachable_backend_fails_samples_not_the_run() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dir.path().join("data"), 2, 16, 16, 1).unwrap();
        let mut cfg = quick(dir.path(), vec![Method::EdgeGuided, Method::Mock]);
        cfg.backend_endpoint = Some("http://127.0.0.1:9".into());
        cfg.backend_timeout_secs = 2.0;
        let run = run_pipeline(&cfg).unwrap();
        assert_eq!(run.n_failed(), 4);
        let rows = read_reports(&cfg.output_dir.join(REPORTS_FILE)).unwrap();
        assert!(rows.iter().filter(|o| o.method() == "edge-guided").all(Outcome::is_failed));
        assert!(rows.iter().filter(|o| o.method() == "mock").all(|o| !o.is_failed()));
    }

    #[test]
    fn worker_count_does_not_change_reports() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dir.path().join("data"), 3, 16, 16, 2).unwrap();
        let mut cfg = quick(dir.path(), vec![Method::Mock, Method::DirectDip]);
        let one = run_pipeline(&cfg).unwrap();
        cfg.workers = 3;
        cfg.output_dir = dir.path().join("out3");
        let three = run_pipeline(&cfg).unwrap();
        assert_eq!(one.outcomes, three.outcomes);
    }

    #[test]
    fn run_panel_has_one_row_per_method_plus_references() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dir.path().join("data"), 2, 16, 16, 3).unwrap();
        let cfg = quick(dir.path(), vec![Method::Mock, Method::IdealRgb]);
        run_pipeline(&cfg).unwrap();
        let png = render_run_panel(&cfg, 4).unwrap();
        assert_eq!(png8::decode(&png).unwrap().dim(), (3, 5 * 16, 2 * 16));
    }
}
