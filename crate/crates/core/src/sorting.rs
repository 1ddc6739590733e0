//! Hard and relaxed descending-sort operators.
//!
//! [`hard_sort_matrix`] returns the exact permutation matrix `P` with `P·s`
//! sorted descending. [`neural_sort`] returns its unimodal row-stochastic
//! relaxation
//!
//! ```text
//! P̂[i, :] = softmax(((K + 1 − 2i)·s − A_s·1) / τ),   A_s[j, l] = |s_j − s_l|
//! ```
//!
//! which tends to `P` as τ → 0 for distinct scores. [`sinkhorn_scale`]
//! alternately normalizes columns and rows of a positive matrix until it is
//! doubly stochastic. The `*_vars` variants record the same computations on a
//! [`Tape`] so gradients flow back to the scores.

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};

/// Entries are floored at this value before Sinkhorn scaling.
pub const SINKHORN_FLOOR: f64 = 1e-30;
pub const SINKHORN_MAX_ITERS: usize = 50;
pub const SINKHORN_TOL: f64 = 1e-6;

/// A K×K 0/1 matrix with a single 1 per row and column, stored as the column
/// index of the 1 in each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationMatrix {
    cols: Vec<usize>,
}

impl PermutationMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            cols: (0..dim).collect(),
        }
    }

    /// Row i selects column `cols[i]`. Fails unless `cols` is a permutation.
    pub fn from_columns(cols: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; cols.len()];
        for &c in &cols {
            if c >= cols.len() || std::mem::replace(&mut seen[c], true) {
                return Err(Error::OutOfRange {
                    what: "permutation column",
                    value: c,
                    min: 0,
                    max: cols.len().saturating_sub(1),
                });
            }
        }
        Ok(Self { cols })
    }

    pub fn dim(&self) -> usize {
        self.cols.len()
    }

    /// Column of the 1 in each row, i.e. the original index of the item
    /// placed at each sorted position.
    pub fn columns(&self) -> &[usize] {
        &self.cols
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        if self.cols[row] == col {
            1.0
        } else {
            0.0
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.cols.iter().map(|&c| v[c]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut cols = vec![0; self.dim()];
        for (row, &c) in self.cols.iter().enumerate() {
            cols[c] = row;
        }
        Self { cols }
    }

    /// Matrix product `self · other`.
    pub fn compose(&self, other: &PermutationMatrix) -> Self {
        Self {
            cols: self.cols.iter().map(|&c| other.cols[c]).collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.entry(i, j)).collect())
            .collect()
    }

    /// The same matrix as a (trivially) relaxed permutation.
    pub fn to_relaxed(&self) -> RelaxedPermutation {
        RelaxedPermutation {
            dim: self.dim(),
            entries: self.to_dense().concat(),
            temperature: 0.0,
            scaled: false,
        }
    }
}

/// A K×K row-stochastic matrix approximating a sort permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPermutation {
    dim: usize,
    entries: Vec<f64>,
    temperature: f64,
    scaled: bool,
}

impl RelaxedPermutation {
    /// Wraps a dense row-major matrix. Entries must be non-negative.
    pub fn from_rows(rows: &[Vec<f64>], temperature: f64) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::Empty("relaxed permutation"));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        Ok(Self {
            dim,
            entries: rows.concat(),
            temperature,
            scaled: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.dim..(row + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.entries.chunks(self.dim).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|j| (0..self.dim).map(|i| self.entry(i, j)).sum())
            .collect()
    }

    /// `P̂ · v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.entries
            .chunks(self.dim)
            .map(|r| r.iter().zip(v).map(|(p, x)| p * x).sum())
            .collect()
    }

    /// Column index of the largest entry in each row.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.entries
            .chunks(self.dim)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &p)| {
                        if p > best.1 {
                            (j, p)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }

    /// Largest |P̂[i,j] − P[i,j]|.
    pub fn max_deviation(&self, hard: &PermutationMatrix) -> f64 {
        (0..self.dim)
            .flat_map(|i| (0..self.dim).map(move |j| (i, j)))
            .map(|(i, j)| (self.entry(i, j) - hard.entry(i, j)).abs())
            .fold(0.0, f64::max)
    }
}

/// Original indices of `s` in descending score order; ties keep the lower
/// index first.
pub fn descending_order(s: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    order
}

pub fn hard_sort_matrix(s: &[f64]) -> Result<PermutationMatrix> {
    if s.is_empty() {
        return Err(Error::Empty("hard_sort_matrix"));
    }
    Ok(PermutationMatrix {
        cols: descending_order(s),
    })
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "tau",
            value: tau,
            reason: "temperature must be positive and finite",
        })
    }
}

/// NeuralSort relaxation recorded on `tape`; returns the rows of P̂.
pub fn neural_sort_vars<'t>(tape: &'t Tape, s: &[Var<'t>], tau: f64) -> Result<Vec<Vec<Var<'t>>>> {
    check_temperature(tau)?;
    let k = s.len();
    if k == 0 {
        return Err(Error::Empty("neural_sort"));
    }
    // (A_s·1)_j = Σ_l |s_j − s_l|
    let pairwise_abs: Vec<Var<'t>> = (0..k)
        .map(|j| {
            let terms: Vec<Var<'t>> = (0..k)
                .filter(|&l| l != j)
                .map(|l| (s[j] - s[l]).abs())
                .collect();
            tape.sum(&terms)
        })
        .collect();
    let rows = (1..=k)
        .map(|i| {
            let scale = (k + 1) as f64 - 2.0 * i as f64;
            let logits: Vec<Var<'t>> = s
                .iter()
                .zip(&pairwise_abs)
                .map(|(&sj, &aj)| (sj * scale - aj) / tau)
                .collect();
            tape.softmax(&logits)
        })
        .collect();
    Ok(rows)
}

pub fn neural_sort(s: &[f64], tau: f64) -> Result<RelaxedPermutation> {
    let tape = Tape::new();
    let vars = tape.vars(s);
    let rows = neural_sort_vars(&tape, &vars, tau)?;
    tape.check()?;
    Ok(RelaxedPermutation {
        dim: s.len(),
        entries: rows.iter().flatten().map(Var::value).collect(),
        temperature: tau,
        scaled: false,
    })
}

fn sinkhorn_residual(rows: &[Vec<Var<'_>>]) -> f64 {
    let k = rows.len();
    let row_dev = rows
        .iter()
        .map(|r| (r.iter().map(Var::value).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let col_dev = (0..k)
        .map(|j| (rows.iter().map(|r| r[j].value()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    row_dev.max(col_dev)
}

/// How a Sinkhorn run ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornStats {
    pub iterations: usize,
    /// Largest |row sum − 1| or |column sum − 1| after the last iteration.
    pub residual: f64,
    pub converged: bool,
}

/// Sinkhorn iterations recorded on `tape`. Entries are floored at
/// [`SINKHORN_FLOOR`]; each iteration normalizes columns and then rows, and
/// the loop stops once every row and column sum is within `tol` of one or
/// after `max_iters` iterations. Rows always sum to one on return; whether the
/// columns made it is reported in the stats rather than as an error.
pub fn sinkhorn_iterate_vars<'t>(
    tape: &'t Tape,
    rows: &[Vec<Var<'t>>],
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<Vec<Var<'t>>>, SinkhornStats)> {
    if max_iters == 0 {
        return Err(Error::InvalidParameter {
            name: "max_iters",
            value: 0.0,
            reason: "sinkhorn needs at least one iteration",
        });
    }
    let k = rows.len();
    if k == 0 {
        return Err(Error::Empty("sinkhorn_scale"));
    }
    let mut m: Vec<Vec<Var<'t>>> = rows
        .iter()
        .map(|r| r.iter().map(|&x| x.max_const(SINKHORN_FLOOR)).collect())
        .collect();
    let mut stats = SinkhornStats {
        iterations: 0,
        residual: f64::INFINITY,
        converged: false,
    };
    for iter in 1..=max_iters {
        for j in 0..k {
            let col: Vec<Var<'t>> = m.iter().map(|r| r[j]).collect();
            let total = tape.sum(&col);
            for row in m.iter_mut() {
                row[j] = row[j] / total;
            }
        }
        for row in m.iter_mut() {
            let total = tape.sum(row);
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        stats.iterations = iter;
        stats.residual = sinkhorn_residual(&m);
        if stats.residual <= tol {
            stats.converged = true;
            break;
        }
    }
    Ok((m, stats))
}

/// Like [`sinkhorn_iterate_vars`], but failing to reach `tol` within
/// `max_iters` is an error.
pub fn sinkhorn_scale_vars<'t>(
    tape: &'t Tape,
    rows: &[Vec<Var<'t>>],
    max_iters: usize,
    tol: f64,
) -> Result<Vec<Vec<Var<'t>>>> {
    let (m, stats) = sinkhorn_iterate_vars(tape, rows, max_iters, tol)?;
    if !stats.converged {
        return Err(Error::SinkhornDiverged {
            iters: stats.iterations,
            residual: stats.residual,
        });
    }
    Ok(m)
}

/// Best-effort Sinkhorn scaling of a plain matrix; see [`sinkhorn_iterate_vars`].
pub fn sinkhorn_iterate(
    p: &RelaxedPermutation,
    max_iters: usize,
    tol: f64,
) -> Result<(RelaxedPermutation, SinkhornStats)> {
    let tape = Tape::new();
    let rows: Vec<Vec<Var<'_>>> = p.entries.chunks(p.dim).map(|r| tape.vars(r)).collect();
    let (scaled, stats) = sinkhorn_iterate_vars(&tape, &rows, max_iters, tol)?;
    tape.check()?;
    let out = RelaxedPermutation {
        dim: p.dim,
        entries: scaled.iter().flatten().map(Var::value).collect(),
        temperature: p.temperature,
        scaled: true,
    };
    Ok((out, stats))
}

/// Sinkhorn scaling that errors unless rows and columns reach `tol`.
pub fn sinkhorn_scale(p: &RelaxedPermutation, max_iters: usize, tol: f64) -> Result<RelaxedPermutation> {
    let (out, stats) = sinkhorn_iterate(p, max_iters, tol)?;
    if !stats.converged {
        return Err(Error::SinkhornDiverged {
            iters: stats.iterations,
            residual: stats.residual,
        });
    }
    Ok(out)
}
