//! Exact ranking metrics and the smooth ApproxNDCG rank.
//!
//! Labels are always indexed in descending label order (`ψ_1 ≥ … ≥ ψ_K`), so
//! label position j is also the ideal rank of response j. Score-induced ranks
//! break ties by lower index first.

use serde::{Deserialize, Serialize};

use crate::diff::sigmoid;
use crate::error::{Error, Result};
use crate::sorting::descending_order;

/// How a label is turned into a gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    /// 2^ψ − 1
    #[default]
    Power,
    /// ψ
    Linear,
}

impl GainMode {
    pub fn apply(self, psi: f64) -> f64 {
        match self {
            GainMode::Power => gain(psi),
            GainMode::Linear => psi,
        }
    }
}

impl std::str::FromStr for GainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" | "exp" | "exponential" => Ok(GainMode::Power),
            "linear" => Ok(GainMode::Linear),
            other => Err(Error::Config(format!("unknown gain mode {other:?}"))),
        }
    }
}

/// G(ψ) = 2^ψ − 1.
pub fn gain(psi: f64) -> f64 {
    psi.exp2() - 1.0
}

/// D(r) = 1 / log₂(r + 1) for 1-based rank r.
pub fn discount(rank: usize) -> Result<f64> {
    if rank < 1 {
        return Err(Error::OutOfRange {
            what: "rank",
            value: rank,
            min: 1,
            max: usize::MAX,
        });
    }
    Ok(discount_real(rank as f64))
}

/// D at a real-valued rank, as used by ApproxNDCG.
pub fn discount_real(rank: f64) -> f64 {
    1.0 / (rank + 1.0).log2()
}

/// Ground-truth labels in non-increasing order.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LabelVector(Vec<f64>);

impl LabelVector {
    pub fn new(labels: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("labels"));
        }
        if let Some(bad) = labels.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "label",
                value: *bad,
                reason: "labels must be finite",
            });
        }
        if let Some(index) = labels.windows(2).position(|w| w[0] < w[1]) {
            return Err(Error::UnsortedLabels { index: index + 1 });
        }
        Ok(Self(labels))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn gains(&self, mode: GainMode) -> Vec<f64> {
        self.0.iter().map(|&p| mode.apply(p)).collect()
    }
}

impl<'de> Deserialize<'de> for LabelVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        LabelVector::new(v).map_err(serde::de::Error::custom)
    }
}

/// 1-based descending rank position of every response under a score vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankAssignment(Vec<usize>);

impl RankAssignment {
    pub fn from_scores(s: &[f64]) -> Self {
        let mut ranks = vec![0; s.len()];
        for (pos, idx) in descending_order(s).into_iter().enumerate() {
            ranks[idx] = pos + 1;
        }
        Self(ranks)
    }

    pub fn rank(&self, j: usize) -> usize {
        self.0[j]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

pub(crate) fn check_k(k: usize, len: usize) -> Result<()> {
    if k < 1 || k > len {
        return Err(Error::OutOfRange {
            what: "k",
            value: k,
            min: 1,
            max: len,
        });
    }
    Ok(())
}

pub fn dcg_at_k(labels: &LabelVector, s: &[f64], k: usize) -> Result<f64> {
    dcg_at_k_with(labels, s, k, GainMode::Power)
}

/// Σ_j G(ψ_j)·D(τ(j)) over the responses whose score-induced rank τ(j) is
/// within the top k.
pub fn dcg_at_k_with(labels: &LabelVector, s: &[f64], k: usize, mode: GainMode) -> Result<f64> {
    if s.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: s.len(),
        });
    }
    check_k(k, labels.len())?;
    let ranks = RankAssignment::from_scores(s);
    Ok(labels
        .0
        .iter()
        .enumerate()
        .filter(|&(j, _)| ranks.rank(j) <= k)
        .map(|(j, &psi)| mode.apply(psi) * discount_real(ranks.rank(j) as f64))
        .sum())
}

pub fn max_dcg_at_k(labels: &LabelVector, k: usize) -> Result<f64> {
    max_dcg_at_k_with(labels, k, GainMode::Power)
}

/// DCG of the label order itself. Zero normalizers are an error since NDCG is
/// undefined for them.
pub fn max_dcg_at_k_with(labels: &LabelVector, k: usize, mode: GainMode) -> Result<f64> {
    check_k(k, labels.len())?;
    let total: f64 = labels.0[..k]
        .iter()
        .enumerate()
        .map(|(j, &psi)| mode.apply(psi) * discount_real((j + 1) as f64))
        .sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::ZeroNormalizer { k });
    }
    Ok(total)
}

pub fn ndcg_at_k(labels: &LabelVector, s: &[f64], k: usize) -> Result<f64> {
    ndcg_at_k_with(labels, s, k, GainMode::Power)
}

pub fn ndcg_at_k_with(labels: &LabelVector, s: &[f64], k: usize, mode: GainMode) -> Result<f64> {
    let norm = max_dcg_at_k_with(labels, k, mode)?;
    Ok(dcg_at_k_with(labels, s, k, mode)? / norm)
}

/// Smooth rank 1 + Σ_{i≠j} σ(α(s_i − s_j)) of response j.
pub fn approx_rank(s: &[f64], alpha: f64, j: usize) -> f64 {
    1.0 + s
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != j)
        .map(|(_, &si)| sigmoid(alpha * (si - s[j])))
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn labels(v: &[f64]) -> LabelVector {
        LabelVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn gain_values() {
        assert_eq!(gain(0.0), 0.0);
        assert_eq!(gain(1.0), 1.0);
        assert_eq!(gain(5.0), 31.0);
    }

    #[test]
    fn discount_values() {
        assert_eq!(discount(1).unwrap(), 1.0);
        assert_eq!(discount(3).unwrap(), 0.5);
        assert_abs_diff_eq!(discount(4).unwrap(), 0.430677, epsilon = 1e-6);
        assert!(discount(0).is_err());
    }

    #[test]
    fn appendix_dcg_and_ndcg() {
        let psi = labels(&[5.0, 4.0, 3.0, 2.0]);
        let s = [9.0, 1.0, 5.0, 2.0];
        assert_abs_diff_eq!(dcg_at_k(&psi, &s, 4).unwrap(), 43.3767, epsilon = 1e-3);
        assert_abs_diff_eq!(max_dcg_at_k(&psi, 4).unwrap(), 45.2560, epsilon = 1e-3);
        assert_abs_diff_eq!(ndcg_at_k(&psi, &s, 4).unwrap(), 0.9585, epsilon = 1e-3);
        assert_eq!(RankAssignment::from_scores(&s).as_slice(), &[1, 4, 2, 3]);
    }

    #[test]
    fn single_item_dcg() {
        assert_eq!(dcg_at_k(&labels(&[1.0]), &[0.0], 1).unwrap(), 1.0);
    }

    #[test]
    fn dcg_at_one_is_single_term() {
        // only the top-ranked response counts, at discount 1
        let psi = labels(&[0.9, 0.4, 0.1]);
        let s = [0.0, 2.0, 1.0];
        assert_eq!(dcg_at_k(&psi, &s, 1).unwrap(), gain(0.4));
    }

    #[test]
    fn max_dcg_cases() {
        assert_eq!(max_dcg_at_k(&labels(&[1.0, 0.0]), 2).unwrap(), 1.0);
        assert!(matches!(
            max_dcg_at_k(&labels(&[0.0, 0.0]), 2),
            Err(Error::ZeroNormalizer { k: 2 })
        ));
    }

    #[test]
    fn ndcg_truncated_at_one() {
        let psi = labels(&[1.0, 0.5]);
        let v = ndcg_at_k(&psi, &[0.0, 1.0], 1).unwrap();
        assert_abs_diff_eq!(v, 0.414214, epsilon = 1e-6);
    }

    #[test]
    fn perfect_order_is_exactly_one() {
        let psi = labels(&[0.9, 0.7, 0.7, 0.2]);
        assert_eq!(ndcg_at_k(&psi, psi.as_slice(), 4).unwrap(), 1.0);
    }

    #[test]
    fn k_out_of_range() {
        let psi = labels(&[1.0, 0.5]);
        assert!(matches!(dcg_at_k(&psi, &[0.0, 1.0], 0), Err(Error::OutOfRange { what: "k", .. })));
        assert!(matches!(dcg_at_k(&psi, &[0.0, 1.0], 3), Err(Error::OutOfRange { what: "k", .. })));
    }

    #[test]
    fn unsorted_labels_rejected() {
        assert!(matches!(
            LabelVector::new(vec![0.1, 0.5]),
            Err(Error::UnsortedLabels { index: 1 })
        ));
    }

    #[test]
    fn approx_rank_cases() {
        assert_eq!(approx_rank(&[3.0, 3.0], 10.0, 0), 1.5);
        assert_eq!(approx_rank(&[3.0, 3.0], 10.0, 1), 1.5);
        assert_abs_diff_eq!(approx_rank(&[2.0, 1.0], 25.0, 0), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(approx_rank(&[2.0, 1.0], 25.0, 1), 2.0, epsilon = 1e-9);
        assert_eq!(approx_rank(&[7.0], 1.0, 0), 1.0);
    }

    #[test]
    fn linear_gain_mode() {
        let psi = labels(&[1.0, 0.5]);
        assert_eq!(max_dcg_at_k_with(&psi, 1, GainMode::Linear).unwrap(), 1.0);
        assert_eq!("linear".parse::<GainMode>().unwrap(), GainMode::Linear);
    }
}
