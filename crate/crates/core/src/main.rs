use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Axis, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msi_inpaint::data::{load_tensor, save_tensor};
use msi_inpaint::dip::{grad_check, LossMask, SkipNetConfig};
use msi_inpaint::guidance::EdgeMap;
use msi_inpaint::harness::{
    self, format_summary, load_sample, render_run_panel, run_with, sweep, write_sweep_csv,
    ExperimentConfig, Loaded, Method, Outcome, Runner, SampleEntry, SweepGrid,
};
use msi_inpaint::masking::{generate_mask, MaskKind};
use msi_inpaint::{png8, synth, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_TOTAL: u8 = 3;

#[derive(Parser)]
#[command(name = "msi-inpaint", version, about = "Multi-spectral satellite image inpainting")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a mask as a 0/1 NPY file.
    Mask {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 0.25)]
        coverage: f64,
        #[arg(long, default_value = "rect")]
        kind: MaskKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inpaint a single sample directory.
    Inpaint {
        /// Directory holding s2.npy and s2_historical.npy.
        #[arg(long)]
        sample: PathBuf,
        /// Mask NPY; overrides the sample's own mask.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Edge map (2-D NPY in [0, 1], or a grayscale .png) used as control
        /// instead of the historical edges.
        #[arg(long)]
        control_path: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every configured method on the dataset.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// One-at-a-time sweep of the stage-one parameters.
    Sweep {
        /// JSON object of parameter -> values; the four standard axes if omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the summary of a reports CSV.
    Report {
        #[arg(long)]
        reports: PathBuf,
        /// Where to write the summary CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a comparison panel of a finished run.
    Panel {
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// PNG path; defaults to panel.png in the output directory.
        #[arg(long)]
        png: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Verify backpropagation against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        probes: usize,
        /// Largest finite-difference step; smaller ones are extrapolated from it.
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Config file plus per-field overrides.
#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    backend_endpoint: Option<String>,
    /// Serve sd-inpaint and edge-guided with the mock backend.
    #[arg(long)]
    mock_backend: bool,
    /// Methods to run (comma separated or repeated).
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    coverage: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset_dir = d.clone();
        }
        if let Some(e) = &self.backend_endpoint {
            cfg.backend_endpoint = Some(e.clone());
        }
        if self.mock_backend {
            cfg.mock_backend = true;
        }
        if !self.method.is_empty() {
            cfg.methods = self.method.clone();
        }
        if let Some(s) = self.steps {
            cfg.train_spec.steps = s;
        }
        if let Some(lr) = self.lr {
            cfg.train_spec.learning_rate = lr;
        }
        if let Some(c) = self.coverage {
            cfg.mask.coverage = c;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Failure of a subcommand, with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::UnknownParameter(_) => EXIT_USAGE,
            _ => EXIT_TOTAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_control(path: &Path) -> Result<EdgeMap, Error> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let gray = if is_png {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        png8::decode(&bytes)?.index_axis(Axis(0), 0).to_owned()
    } else {
        let arr = load_tensor(path)?;
        let arr = match arr.ndim() {
            3 if arr.shape()[0] == 1 => arr.index_axis_move(Axis(0), 0),
            _ => arr,
        };
        arr.into_dimensionality::<Ix2>()
            .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))?
    };
    EdgeMap::new(gray)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn partial_code(outcomes: &[Outcome]) -> u8 {
    let failed = outcomes.iter().filter(|o| o.is_failed()).count();
    if failed > 0 {
        eprintln!("{failed} evaluation(s) failed; see reports.csv");
        EXIT_PARTIAL
    } else {
        0
    }
}

fn execute(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Synth {
            out,
            count,
            height,
            width,
            seed,
        } => {
            synth::write_dataset(&out, count, height, width, seed)?;
            println!("wrote {count} samples to {}", out.display());
            Ok(0)
        }
        Command::Mask {
            height,
            width,
            coverage,
            kind,
            seed,
            out,
        } => {
            let mask = generate_mask(height, width, coverage, kind, seed)?;
            save_tensor(mask.to_binary().into_dyn().view(), &out)?;
            println!("{} of {} pixels masked", mask.count(), height * width);
            Ok(0)
        }
        Command::Inpaint {
            sample,
            mask,
            control_path,
            common,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(m) = mask {
                cfg.mask.path = Some(m);
            }
            let entry = SampleEntry {
                id: sample
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("sample")
                    .to_string(),
                dir: sample.clone(),
            };
            let Loaded::Ready(mut loaded) = load_sample(&entry, cfg.dn_scale)? else {
                return Err(Failure {
                    code: EXIT_TOTAL,
                    message: format!("{} is saturated", sample.display()),
                });
            };
            if cfg.mask.path.is_some() {
                loaded.mask = None;
            }
            let mut runner = Runner::new(cfg.clone())?;
            if let Some(p) = control_path {
                runner = runner.with_control(load_control(&p)?);
            }
            let outcomes = runner.process(&loaded, Some(&cfg.output_dir))?;
            for o in &outcomes {
                match o {
                    Outcome::Evaluated(r) => println!(
                        "{} {}: ssim {:.4} / {:.4}, rmse {:.4} / {:.4} (whole / mask)",
                        r.method, r.scope, r.ssim_whole, r.ssim_mask, r.rmse_whole, r.rmse_mask
                    ),
                    Outcome::Failed { method, error, .. } => println!("{method}: failed: {error}"),
                }
            }
            Ok(partial_code(&outcomes))
        }
        Command::Run { common } => {
            let cfg = common.resolve()?;
            let runner = Runner::new(cfg)?;
            let summary = run_with(&runner)?;
            print!("{}", format_summary(&summary.summary));
            if !summary.saturated.is_empty() {
                eprintln!("{} saturated sample(s) excluded", summary.saturated.len());
            }
            Ok(partial_code(&summary.outcomes))
        }
        Command::Sweep { grid, common } => {
            let cfg = common.resolve()?;
            let grid = match grid {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    SweepGrid::from_json_str(&text)?
                }
                None => SweepGrid::table_one(),
            };
            let report = sweep(&cfg, &grid)?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::Io {
                path: cfg.output_dir.clone(),
                source: e,
            })?;
            let path = cfg.output_dir.join("sweep.csv");
            write_sweep_csv(&path, &report)?;
            println!("wrote {} configurations to {}", report.rows.len(), path.display());
            let failed: usize = report.rows.iter().map(|r| r.n_failed).sum();
            Ok(if failed > 0 { EXIT_PARTIAL } else { 0 })
        }
        Command::Report { reports, out } => {
            let outcomes = harness::read_reports(&reports)?;
            let rows = harness::aggregate(&outcomes);
            if let Some(path) = out {
                harness::write_summary(&path, &rows)?;
            }
            print!("{}", format_summary(&rows));
            Ok(0)
        }
        Command::Panel {
            samples,
            png,
            common,
        } => {
            let cfg = common.resolve()?;
            let bytes = render_run_panel(&cfg, samples)?;
            let path = png.unwrap_or_else(|| cfg.output_dir.join("panel.png"));
            write_file(&path, &bytes)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Gradcheck {
            probes,
            eps,
            seed,
            tolerance,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst = 0.0f64;
            for use_norm in [false, true] {
                let cfg = SkipNetConfig::tiny(use_norm);
                let x = ndarray::Array3::from_shape_fn((cfg.input_channels, 8, 8), |_| rng.random::<f64>());
                let t = ndarray::Array3::from_shape_fn((cfg.out_channels, 8, 8), |_| rng.random::<f64>());
                let mut lm = ndarray::Array3::from_shape_fn(t.dim(), |_| rng.random_bool(0.7));
                lm[[0, 0, 0]] = true;
                let err = grad_check(&cfg, x.view(), t.view(), &LossMask::new(lm)?, eps, probes, seed)?;
                println!("norm {}: max relative error {err:.3e}", if use_norm { "on" } else { "off" });
                worst = worst.max(err);
            }
            Ok(if worst < tolerance { 0 } else { EXIT_PARTIAL })
        }
    }
}
