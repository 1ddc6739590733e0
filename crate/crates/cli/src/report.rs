//! Report rendering as JSON or CSV.

use std::path::Path;

use clap::ValueEnum;
use serde::Serialize;

use opo_core::data::Mode;
use opo_core::harness::{CompareReport, Curve, NdcgSummary};
use opo_core::trainer::{SweepRow, TrainConfig, TrainHistory};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// A report with a tabular CSV view.
pub trait Tabular: Serialize {
    fn header(&self) -> Vec<String>;
    fn rows(&self) -> Vec<Vec<String>>;
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| (*s).to_owned()).collect()
}

pub fn render<R: Tabular>(report: &R, format: Format) -> Result<String, CliError> {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(|e| CliError::data(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| CliError::data(e.to_string());
            w.write_record(report.header()).map_err(csv_err)?;
            for row in report.rows() {
                w.write_record(row).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| CliError::data(e.to_string()))
        }
    }
}

/// Writes to `out`, or to stdout when absent.
pub fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display()))),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::data(e.to_string()))
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub train_lists: usize,
    pub heldout_lists: usize,
    pub heldout_ndcg: Option<NdcgSummary>,
    pub win_rate_vs_initial: Option<f64>,
    pub config: TrainConfig,
    pub history: TrainHistory,
}

impl Tabular for TrainReport {
    fn header(&self) -> Vec<String> {
        strings(&["epoch", "step", "loss", "grad_norm", "learning_rate"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.history
            .steps
            .iter()
            .map(|s| {
                vec![
                    s.epoch.to_string(),
                    s.step.to_string(),
                    num(s.loss),
                    num(s.grad_norm),
                    num(s.learning_rate),
                ]
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub lists: usize,
    pub k: Option<usize>,
    pub ndcg: NdcgSummary,
    pub win_rate_vs_baseline: Option<f64>,
}

impl Tabular for EvalReport {
    fn header(&self) -> Vec<String> {
        strings(&["lists", "k", "ndcg_mean", "ndcg_sd", "evaluated", "skipped", "win_rate_vs_baseline"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        vec![vec![
            self.lists.to_string(),
            self.k.map(|k| k.to_string()).unwrap_or_default(),
            num(self.ndcg.mean),
            num(self.ndcg.sd),
            self.ndcg.evaluated.to_string(),
            self.ndcg.skipped.to_string(),
            opt(self.win_rate_vs_baseline),
        ]]
    }
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub config: TrainConfig,
    pub rows: Vec<SweepRow>,
}

impl Tabular for SweepReport {
    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = self
            .rows
            .first()
            .map(|r| r.params.iter().map(|(a, _)| a.to_string()).collect())
            .unwrap_or_default();
        h.extend(strings(&["heldout_ndcg", "win_rate", "final_loss", "error"]));
        h
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut row: Vec<String> = r.params.iter().map(|&(_, v)| num(v)).collect();
                row.extend([
                    opt(r.heldout_ndcg),
                    opt(r.win_rate),
                    opt(r.final_loss),
                    r.error.clone().unwrap_or_default(),
                ]);
                row
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
pub struct CurveReport {
    pub labels: Vec<f64>,
    pub scores: Vec<f64>,
    pub curves: Vec<Curve>,
}

impl Tabular for CurveReport {
    fn header(&self) -> Vec<String> {
        strings(&["kind", "parameter", "x", "surrogate", "exact", "error"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.curves
            .iter()
            .flat_map(|c| {
                let kind = serde_json::to_value(c.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default();
                c.points.iter().map(move |p| {
                    vec![
                        kind.clone(),
                        num(c.parameter),
                        num(p.x),
                        num(p.surrogate),
                        num(p.exact),
                        num(p.error),
                    ]
                })
            })
            .collect()
    }
}

impl Tabular for CompareReport {
    fn header(&self) -> Vec<String> {
        strings(&[
            "loss",
            "ndcg_mean",
            "ndcg_sd",
            "win_rate",
            "final_loss",
            "skipped_lists",
            "baseline_ndcg_mean",
        ])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.loss.to_string(),
                    num(r.ndcg_mean),
                    num(r.ndcg_sd),
                    num(r.win_rate),
                    opt(r.final_loss),
                    r.skipped_lists.to_string(),
                    num(self.baseline_ndcg_mean),
                ]
            })
            .collect()
    }
}
