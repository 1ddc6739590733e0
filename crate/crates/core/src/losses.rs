//! Training objectives over a score vector.
//!
//! Every loss takes the scores of one response list in label order (`s[0]`
//! belongs to the best-labeled response) and records its computation on the
//! scores' [`Tape`], so the same code serves plain evaluation, gradients with
//! respect to the scores, and gradients with respect to scorer parameters.
//!
//! | kind | objective |
//! |------|-----------|
//! | OPO | −NeuralNDCG@k with Sinkhorn-scaled NeuralSort |
//! | ApproxNDCG | −NDCG@k with sigmoid-smoothed ranks |
//! | ListMLE | Plackett–Luce negative log-likelihood of the label order |
//! | SinglePair | −log σ(s_1 − s_K) |
//! | BPR | mean of −log σ(s_1 − s_j) over j > 1 |
//! | AllPairs | −log σ(s_i − s_j) over ψ_i > ψ_j, normalized by C(K,2) |
//! | LambdaRank | AllPairs weighted by Δ_ij = |G_i − G_j|·|D(τ(i)) − D(τ(j))| |
//! | SLiC | hinge max(0, m − (s_i − s_j)) over ψ_i > ψ_j, normalized by C(K,2) |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::{evaluate_with_gradient, DiffValue, ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{
    check_k, discount_real, max_dcg_at_k_with, GainMode, LabelVector, RankAssignment,
};
use crate::sorting::{
    neural_sort_vars, sinkhorn_iterate_vars, sinkhorn_scale_vars, RelaxedPermutation, SINKHORN_MAX_ITERS, SINKHORN_TOL,
};

pub const DEFAULT_TAU: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 25.0;
pub const DEFAULT_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Opo,
    ApproxNdcg,
    ListMle,
    SinglePair,
    Bpr,
    AllPairs,
    LambdaRank,
    Slic,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Opo,
        LossKind::ApproxNdcg,
        LossKind::ListMle,
        LossKind::SinglePair,
        LossKind::Bpr,
        LossKind::AllPairs,
        LossKind::LambdaRank,
        LossKind::Slic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Opo => "opo",
            LossKind::ApproxNdcg => "approx_ndcg",
            LossKind::ListMle => "list_mle",
            LossKind::SinglePair => "single_pair",
            LossKind::Bpr => "bpr",
            LossKind::AllPairs => "all_pairs",
            LossKind::LambdaRank => "lambda_rank",
            LossKind::Slic => "slic",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        let kind = match key.as_str() {
            "opo" | "neural_ndcg" | "neuralndcg" => LossKind::Opo,
            "approx_ndcg" | "approxndcg" => LossKind::ApproxNdcg,
            "list_mle" | "listmle" => LossKind::ListMle,
            "single_pair" | "dpo" => LossKind::SinglePair,
            "bpr" => LossKind::Bpr,
            "all_pairs" => LossKind::AllPairs,
            "lambda_rank" | "lambdarank" | "lipo" => LossKind::LambdaRank,
            "slic" => LossKind::Slic,
            _ => return Err(Error::Config(format!("unknown loss kind {s:?}"))),
        };
        Ok(kind)
    }
}

/// Which objective to use and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Truncation; `None` means the full list.
    pub k: Option<usize>,
    /// NeuralSort temperature (OPO).
    pub tau: f64,
    /// Sigmoid steepness (ApproxNDCG).
    pub alpha: f64,
    pub gain_mode: GainMode,
    /// Sinkhorn-scale the relaxed permutation (OPO).
    pub sinkhorn: bool,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    /// Fail instead of using the last Sinkhorn iterate when the tolerance is
    /// not reached within `sinkhorn_max_iters`.
    pub sinkhorn_strict: bool,
    /// Hinge margin in score units (SLiC).
    pub margin: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::new(LossKind::Opo)
    }
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            k: None,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            gain_mode: GainMode::Power,
            sinkhorn: true,
            sinkhorn_max_iters: SINKHORN_MAX_ITERS,
            sinkhorn_tol: SINKHORN_TOL,
            sinkhorn_strict: false,
            margin: DEFAULT_MARGIN,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_gain_mode(mut self, mode: GainMode) -> Self {
        self.gain_mode = mode;
        self
    }

    pub fn with_sinkhorn(mut self, on: bool) -> Self {
        self.sinkhorn = on;
        self
    }

    /// Truncation for a list of `len` responses.
    pub fn k_for(&self, len: usize) -> usize {
        self.k.unwrap_or(len)
    }

    /// Checks hyperparameters against a list of `len` responses.
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.kind == LossKind::Opo && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "tau",
                value: self.tau,
                reason: "temperature must be positive and finite",
            });
        }
        if self.kind == LossKind::ApproxNdcg && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                value: self.alpha,
                reason: "steepness must be positive and finite",
            });
        }
        if matches!(self.kind, LossKind::Opo | LossKind::ApproxNdcg) {
            check_k(self.k_for(len), len)?;
        }
        Ok(())
    }

    /// Records the configured loss on the scores' tape.
    pub fn evaluate<'t>(&self, tape: &'t Tape, s: &[Var<'t>], labels: &LabelVector) -> Result<Var<'t>> {
        match self.kind {
            LossKind::Opo => opo_loss(tape, s, labels, self),
            LossKind::ApproxNdcg => approx_ndcg_loss(tape, s, labels, self),
            LossKind::ListMle => list_mle_loss(tape, s, labels),
            LossKind::SinglePair => single_pair_loss(tape, s),
            LossKind::Bpr => bpr_loss(tape, s),
            LossKind::AllPairs => all_pairs_loss(tape, s, labels),
            LossKind::LambdaRank => lambda_rank_loss(tape, s, labels, self.gain_mode),
            LossKind::Slic => slic_loss(tape, s, labels, self.margin),
        }
    }

    /// Loss value and its gradient with respect to the scores.
    pub fn value_and_grad(&self, scores: &[f64], labels: &LabelVector) -> Result<DiffValue> {
        let params = ParameterSet::from_values("s", scores);
        evaluate_with_gradient(|tape, s| self.evaluate(tape, s, labels), &params)
    }

    pub fn value(&self, scores: &[f64], labels: &LabelVector) -> Result<f64> {
        Ok(self.value_and_grad(scores, labels)?.value)
    }
}

fn check_len(s: &[Var<'_>], labels: &LabelVector) -> Result<()> {
    if s.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: s.len(),
        });
    }
    Ok(())
}

fn require_pairs(len: usize) -> Result<()> {
    if len < 2 {
        return Err(Error::OutOfRange {
            what: "list size",
            value: len,
            min: 2,
            max: usize::MAX,
        });
    }
    Ok(())
}

fn pair_count(len: usize) -> f64 {
    (len * (len - 1) / 2) as f64
}

/// Index pairs (i, j) with ψ_i > ψ_j.
fn ordered_pairs(labels: &LabelVector) -> impl Iterator<Item = (usize, usize)> + '_ {
    let psi = labels.as_slice();
    (0..psi.len()).flat_map(move |i| ((i + 1)..psi.len()).filter(move |&j| psi[i] > psi[j]).map(move |j| (i, j)))
}

/// −N_k⁻¹ Σ_{j≤k} (scale(P̂)·G(Ψ))_j · D(j).
pub fn opo_loss<'t>(tape: &'t Tape, s: &[Var<'t>], labels: &LabelVector, spec: &LossSpec) -> Result<Var<'t>> {
    check_len(s, labels)?;
    spec.validate(s.len())?;
    let k = spec.k_for(s.len());
    let norm = max_dcg_at_k_with(labels, k, spec.gain_mode)?;
    let relaxed = neural_sort_vars(tape, s, spec.tau)?;
    let rows = if spec.sinkhorn && spec.sinkhorn_strict {
        sinkhorn_scale_vars(tape, &relaxed, spec.sinkhorn_max_iters, spec.sinkhorn_tol)?
    } else if spec.sinkhorn {
        sinkhorn_iterate_vars(tape, &relaxed, spec.sinkhorn_max_iters, spec.sinkhorn_tol)?.0
    } else {
        relaxed
    };
    let gains = labels.gains(spec.gain_mode);
    let sorted_gains = tape.matvec_const(&rows[..k], &gains);
    let discounts: Vec<f64> = (1..=k).map(|j| discount_real(j as f64) / norm).collect();
    Ok(-tape.dot_const(&sorted_gains, &discounts))
}

/// NeuralNDCG@k for an explicit (relaxed or hard) permutation matrix.
pub fn neural_ndcg(p: &RelaxedPermutation, labels: &LabelVector, k: usize, mode: GainMode) -> Result<f64> {
    if p.dim() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: p.dim(),
        });
    }
    let norm = max_dcg_at_k_with(labels, k, mode)?;
    let sorted_gains = p.apply(&labels.gains(mode));
    Ok(sorted_gains[..k]
        .iter()
        .enumerate()
        .map(|(j, g)| g * discount_real((j + 1) as f64))
        .sum::<f64>()
        / norm)
}

/// Smooth ranks 1 + Σ_{i≠j} σ(α(s_i − s_j)) on the tape.
pub fn approx_ranks<'t>(tape: &'t Tape, s: &[Var<'t>], alpha: f64) -> Vec<Var<'t>> {
    (0..s.len())
        .map(|j| {
            let terms: Vec<Var<'t>> = (0..s.len())
                .filter(|&i| i != j)
                .map(|i| ((s[i] - s[j]) * alpha).sigmoid())
                .collect();
            tape.sum(&terms) + 1.0
        })
        .collect()
}

/// −N_k⁻¹ Σ_{j≤k} G(ψ_j)·D(approx_rank_j).
pub fn approx_ndcg_loss<'t>(
    tape: &'t Tape,
    s: &[Var<'t>],
    labels: &LabelVector,
    spec: &LossSpec,
) -> Result<Var<'t>> {
    check_len(s, labels)?;
    spec.validate(s.len())?;
    let k = spec.k_for(s.len());
    let norm = max_dcg_at_k_with(labels, k, spec.gain_mode)?;
    let ranks = approx_ranks(tape, &s[..], spec.alpha);
    let gains = labels.gains(spec.gain_mode);
    // D(r) = ln 2 / ln(r + 1)
    let discounts: Vec<Var<'t>> = ranks[..k]
        .iter()
        .map(|&r| std::f64::consts::LN_2 / (r + 1.0).ln())
        .collect();
    let weights: Vec<f64> = gains[..k].iter().map(|g| g / norm).collect();
    Ok(-tape.dot_const(&discounts, &weights))
}

/// Σ_k [log Σ_{j≥k} exp(s_j) − s_k].
pub fn list_mle_loss<'t>(tape: &'t Tape, s: &[Var<'t>], labels: &LabelVector) -> Result<Var<'t>> {
    check_len(s, labels)?;
    let terms: Vec<Var<'t>> = (0..s.len()).map(|k| tape.log_sum_exp(&s[k..]) - s[k]).collect();
    Ok(tape.sum(&terms))
}

/// −log σ(s_1 − s_K).
pub fn single_pair_loss<'t>(_tape: &'t Tape, s: &[Var<'t>]) -> Result<Var<'t>> {
    require_pairs(s.len())?;
    Ok(-(s[0] - s[s.len() - 1]).log_sigmoid())
}

/// −(K−1)⁻¹ Σ_{j>1} log σ(s_1 − s_j).
pub fn bpr_loss<'t>(tape: &'t Tape, s: &[Var<'t>]) -> Result<Var<'t>> {
    require_pairs(s.len())?;
    let terms: Vec<Var<'t>> = s[1..].iter().map(|&sj| (s[0] - sj).log_sigmoid()).collect();
    Ok(tape.sum(&terms) * (-1.0 / (s.len() - 1) as f64))
}

/// −C(K,2)⁻¹ Σ_{ψ_i>ψ_j} log σ(s_i − s_j).
pub fn all_pairs_loss<'t>(tape: &'t Tape, s: &[Var<'t>], labels: &LabelVector) -> Result<Var<'t>> {
    check_len(s, labels)?;
    require_pairs(s.len())?;
    let terms: Vec<Var<'t>> = ordered_pairs(labels)
        .map(|(i, j)| (s[i] - s[j]).log_sigmoid())
        .collect();
    Ok(tape.sum(&terms) * (-1.0 / pair_count(s.len())))
}

/// Lambda weights Δ_ij for every ordered pair, from the current score ranks.
/// They are constants: no gradient flows through the discrete ranks.
pub fn lambda_weights(labels: &LabelVector, scores: &[f64], mode: GainMode) -> Vec<((usize, usize), f64)> {
    let ranks = RankAssignment::from_scores(scores);
    let gains = labels.gains(mode);
    ordered_pairs(labels)
        .map(|(i, j)| {
            let dg = (gains[i] - gains[j]).abs();
            let dd = (discount_real(ranks.rank(i) as f64) - discount_real(ranks.rank(j) as f64)).abs();
            ((i, j), dg * dd)
        })
        .collect()
}

/// −C(K,2)⁻¹ Σ_{ψ_i>ψ_j} Δ_ij log σ(s_i − s_j).
pub fn lambda_rank_loss<'t>(
    tape: &'t Tape,
    s: &[Var<'t>],
    labels: &LabelVector,
    mode: GainMode,
) -> Result<Var<'t>> {
    check_len(s, labels)?;
    require_pairs(s.len())?;
    let values: Vec<f64> = s.iter().map(Var::value).collect();
    let (terms, weights): (Vec<Var<'t>>, Vec<f64>) = lambda_weights(labels, &values, mode)
        .into_iter()
        .map(|((i, j), w)| ((s[i] - s[j]).log_sigmoid(), w))
        .unzip();
    Ok(tape.dot_const(&terms, &weights) * (-1.0 / pair_count(s.len())))
}

/// C(K,2)⁻¹ Σ_{ψ_i>ψ_j} max(0, margin − (s_i − s_j)).
pub fn slic_loss<'t>(tape: &'t Tape, s: &[Var<'t>], labels: &LabelVector, margin: f64) -> Result<Var<'t>> {
    check_len(s, labels)?;
    require_pairs(s.len())?;
    let terms: Vec<Var<'t>> = ordered_pairs(labels)
        .map(|(i, j)| (margin - (s[i] - s[j])).max_const(0.0))
        .collect();
    Ok(tape.sum(&terms) * (1.0 / pair_count(s.len())))
}
