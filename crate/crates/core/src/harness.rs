//! Evaluation: held-out NDCG, oracle win rate, surrogate approximation curves
//! and the all-losses comparison report.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::metrics::{ndcg_at_k_with, GainMode, LabelVector};
use crate::scorer::{ListScorer, Scorer};
use crate::sorting::descending_order;
use crate::trainer::{train, TrainConfig};

/// Stated in every comparison report.
pub const WIN_RATE_NOTE: &str =
    "win rate compares top-1 picks under the synthetic oracle utility, not a learned judge";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NdcgSummary {
    pub mean: f64,
    /// Sample standard deviation over lists (0 for a single list).
    pub sd: f64,
    pub evaluated: usize,
    /// Lists whose ideal DCG is zero.
    pub skipped: usize,
}

/// Mean NDCG@k over the dataset; `k = None` uses each list's full length.
pub fn evaluate_ndcg(
    scorer: &impl ListScorer,
    dataset: &Dataset,
    k: Option<usize>,
    mode: GainMode,
) -> Result<NdcgSummary> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut values = Vec::with_capacity(dataset.len());
    let mut skipped = 0;
    for list in dataset.lists() {
        let s = scorer.score_list(list)?;
        match ndcg_at_k_with(&list.labels(), &s, k.unwrap_or(list.len()), mode) {
            Ok(v) => values.push(v),
            Err(Error::ZeroNormalizer { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::Empty("lists with non-zero ideal DCG"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(NdcgSummary {
        mean,
        sd,
        evaluated: values.len(),
        skipped,
    })
}

/// Fraction of lists where the candidate's top-1 response has the higher
/// oracle utility; ties count one half.
pub fn win_rate(candidate: &impl ListScorer, baseline: &impl ListScorer, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut wins = 0.0;
    for list in dataset.lists() {
        let u = list.oracle_utilities()?;
        let a = u[descending_order(&candidate.score_list(list)?)[0]];
        let b = u[descending_order(&baseline.score_list(list)?)[0]];
        wins += if a > b {
            1.0
        } else if a == b {
            0.5
        } else {
            0.0
        };
    }
    Ok(wins / dataset.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    /// NeuralNDCG, parameterized by temperature.
    Neural,
    /// ApproxNDCG, parameterized by steepness.
    Approx,
}

impl std::str::FromStr for CurveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neural" | "opo" => Ok(CurveKind::Neural),
            "approx" | "approx_ndcg" => Ok(CurveKind::Approx),
            other => Err(Error::Config(format!("unknown curve kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub surrogate: f64,
    pub exact: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub kind: CurveKind,
    pub parameter: f64,
    pub points: Vec<CurvePoint>,
    pub mean_abs_error: f64,
}

/// Labels of the reference curve configuration.
pub const CURVE_LABELS: [f64; 5] = [1.0, 0.8, 0.6, 0.4, 0.2];
/// Scores of the reference configuration; slot 0 is replaced by x.
pub const CURVE_SCORES: [f64; 5] = [0.0, 0.8, 0.6, 0.4, 0.2];

/// `n` evenly spaced points on [lo, hi].
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// The default x grid: 201 points on [0, 1.2].
pub fn curve_grid() -> Vec<f64> {
    linspace(0.0, 1.2, 201)
}

/// Surrogate NDCG against exact NDCG as the first score sweeps over `xs`.
/// Both are taken over the whole list.
pub fn approximation_curve(
    kind: CurveKind,
    labels: &LabelVector,
    template: &[f64],
    parameter: f64,
    xs: &[f64],
) -> Result<Curve> {
    if template.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: template.len(),
        });
    }
    let spec = match kind {
        CurveKind::Neural => LossSpec::new(LossKind::Opo).with_tau(parameter),
        CurveKind::Approx => LossSpec::new(LossKind::ApproxNdcg).with_alpha(parameter),
    };
    let k = labels.len();
    let points = xs
        .iter()
        .map(|&x| {
            let mut s = template.to_vec();
            s[0] = x;
            let surrogate = -spec.value(&s, labels)?;
            let exact = ndcg_at_k_with(labels, &s, k, spec.gain_mode)?;
            Ok(CurvePoint {
                x,
                surrogate,
                exact,
                error: (surrogate - exact).abs(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_abs_error = if points.is_empty() {
        0.0
    } else {
        points.iter().map(|p| p.error).sum::<f64>() / points.len() as f64
    };
    Ok(Curve {
        kind,
        parameter,
        points,
        mean_abs_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub loss: LossKind,
    pub ndcg_mean: f64,
    pub ndcg_sd: f64,
    pub win_rate: f64,
    pub final_loss: Option<f64>,
    pub skipped_lists: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub note: String,
    pub eval_k: Option<usize>,
    pub train_lists: usize,
    pub heldout_lists: usize,
    pub baseline_ndcg_mean: f64,
    pub baseline_ndcg_sd: f64,
    pub config: TrainConfig,
    pub rows: Vec<LossRow>,
}

/// Trains every loss kind from the same initial scorer and reports held-out
/// NDCG and win rate against that untrained scorer. Loss hyperparameters
/// other than the kind are taken from `base.loss`.
pub fn compare(base: &TrainConfig, train_set: &Dataset, heldout: &Dataset, init: &Scorer) -> Result<CompareReport> {
    let rc = base.reward_config()?;
    let mode = base.loss.gain_mode;
    let baseline = evaluate_ndcg(&init.with_config(rc), heldout, base.eval_k, mode)?;
    let rows = LossKind::ALL
        .iter()
        .map(|&kind| {
            let mut cfg = base.clone();
            cfg.loss.kind = kind;
            let (trained, history) = train(&cfg, train_set, init, None)?;
            let ndcg = evaluate_ndcg(&trained.with_config(rc), heldout, base.eval_k, mode)?;
            Ok(LossRow {
                loss: kind,
                ndcg_mean: ndcg.mean,
                ndcg_sd: ndcg.sd,
                win_rate: win_rate(&trained.with_config(rc), &init.with_config(rc), heldout)?,
                final_loss: history.final_loss(),
                skipped_lists: history.skipped_lists,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompareReport {
        note: WIN_RATE_NOTE.to_owned(),
        eval_k: base.eval_k,
        train_lists: train_set.len(),
        heldout_lists: heldout.len(),
        baseline_ndcg_mean: baseline.mean,
        baseline_ndcg_sd: baseline.sd,
        config: base.clone(),
        rows,
    })
}
