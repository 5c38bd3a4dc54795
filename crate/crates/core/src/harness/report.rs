use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ChannelScope, EvalReport};

/// One (sample, method, scope) cell of a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Evaluated(EvalReport),
    Failed {
        sample_id: String,
        method: String,
        scope: ChannelScope,
        error: String,
    },
}

impl Outcome {
    pub fn sample_id(&self) -> &str {
        match self {
            Outcome::Evaluated(r) => &r.sample_id,
            Outcome::Failed { sample_id, .. } => sample_id,
        }
    }

    pub fn method(&self) -> &str {
        match self {
            Outcome::Evaluated(r) => &r.method,
            Outcome::Failed { method, .. } => method,
        }
    }

    pub fn scope(&self) -> ChannelScope {
        match self {
            Outcome::Evaluated(r) => r.scope,
            Outcome::Failed { scope, .. } => *scope,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, Outcome::Failed { .. })
    }
}

/// Mean metrics of one (method, scope) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub scope: ChannelScope,
    pub ssim_whole: f64,
    pub ssim_mask: f64,
    pub rmse_whole: f64,
    pub rmse_mask: f64,
    /// Evaluated samples contributing to the means.
    pub n_samples: usize,
    pub n_failed: usize,
}

/// Unweighted means per (method, scope) over evaluated outcomes, groups in
/// order of first appearance. A group with no evaluated sample has NaN means.
pub fn aggregate(outcomes: &[Outcome]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    for o in outcomes {
        let idx = match rows
            .iter()
            .position(|r| r.method == o.method() && r.scope == o.scope())
        {
            Some(i) => i,
            None => {
                rows.push(SummaryRow {
                    method: o.method().to_string(),
                    scope: o.scope(),
                    ssim_whole: 0.0,
                    ssim_mask: 0.0,
                    rmse_whole: 0.0,
                    rmse_mask: 0.0,
                    n_samples: 0,
                    n_failed: 0,
                });
                rows.len() - 1
            }
        };
        let row = &mut rows[idx];
        match o {
            Outcome::Evaluated(r) => {
                row.ssim_whole += r.ssim_whole;
                row.ssim_mask += r.ssim_mask;
                row.rmse_whole += r.rmse_whole;
                row.rmse_mask += r.rmse_mask;
                row.n_samples += 1;
            }
            Outcome::Failed { .. } => row.n_failed += 1,
        }
    }
    for row in &mut rows {
        let n = row.n_samples as f64;
        if row.n_samples == 0 {
            row.ssim_whole = f64::NAN;
            row.ssim_mask = f64::NAN;
            row.rmse_whole = f64::NAN;
            row.rmse_mask = f64::NAN;
        } else {
            row.ssim_whole /= n;
            row.ssim_mask /= n;
            row.rmse_whole /= n;
            row.rmse_mask /= n;
        }
    }
    rows
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRecord {
    sample_id: String,
    method: String,
    scope: ChannelScope,
    status: String,
    ssim_whole: Option<f64>,
    ssim_mask: Option<f64>,
    rmse_whole: Option<f64>,
    rmse_mask: Option<f64>,
    error: String,
}

impl From<&Outcome> for ReportRecord {
    fn from(o: &Outcome) -> Self {
        match o {
            Outcome::Evaluated(r) => ReportRecord {
                sample_id: r.sample_id.clone(),
                method: r.method.clone(),
                scope: r.scope,
                status: "ok".into(),
                ssim_whole: Some(r.ssim_whole),
                ssim_mask: Some(r.ssim_mask),
                rmse_whole: Some(r.rmse_whole),
                rmse_mask: Some(r.rmse_mask),
                error: String::new(),
            },
            Outcome::Failed {
                sample_id,
                method,
                scope,
                error,
            } => ReportRecord {
                sample_id: sample_id.clone(),
                method: method.clone(),
                scope: *scope,
                status: "failed".into(),
                ssim_whole: None,
                ssim_mask: None,
                rmse_whole: None,
                rmse_mask: None,
                error: error.clone(),
            },
        }
    }
}

impl TryFrom<ReportRecord> for Outcome {
    type Error = Error;

    fn try_from(r: ReportRecord) -> Result<Self> {
        match r.status.as_str() {
            "ok" => {
                let need = |v: Option<f64>, name: &str| {
                    v.ok_or_else(|| Error::Format(format!("report row without {name}")))
                };
                Ok(Outcome::Evaluated(EvalReport {
                    ssim_whole: need(r.ssim_whole, "ssim_whole")?,
                    ssim_mask: need(r.ssim_mask, "ssim_mask")?,
                    rmse_whole: need(r.rmse_whole, "rmse_whole")?,
                    rmse_mask: need(r.rmse_mask, "rmse_mask")?,
                    sample_id: r.sample_id,
                    method: r.method,
                    scope: r.scope,
                }))
            }
            "failed" => Ok(Outcome::Failed {
                sample_id: r.sample_id,
                method: r.method,
                scope: r.scope,
                error: r.error,
            }),
            other => Err(Error::Format(format!("unknown report status {other:?}"))),
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-sample report: one row per outcome, metrics empty for failures.
pub fn write_reports(path: &Path, outcomes: &[Outcome]) -> Result<()> {
    write_rows(path, outcomes.iter().map(ReportRecord::from))
}

pub fn read_reports(path: &Path) -> Result<Vec<Outcome>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize::<ReportRecord>()
        .map(|rec| rec.map_err(|e| csv_err(path, e)).and_then(Outcome::try_from))
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|rec| rec.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Fixed-width text rendering of a summary for terminals.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<16} {:<6} {:>10} {:>10} {:>10} {:>10} {:>5} {:>6}\n",
        "method", "scope", "ssim_whole", "ssim_mask", "rmse_whole", "rmse_mask", "n", "failed"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:<6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>5} {:>6}\n",
            r.method,
            r.scope.to_string(),
            r.ssim_whole,
            r.ssim_mask,
            r.rmse_whole,
            r.rmse_mask,
            r.n_samples,
            r.n_failed
        ));
    }
    out
}
