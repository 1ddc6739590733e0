//! Differentiation substrate shared by every loss and scorer.
//!
//! Expressions are ordinary Rust closures over [`Var`]s recorded on a
//! [`Tape`]; [`evaluate_with_gradient`] runs one forward pass and one reverse
//! sweep, while [`finite_difference_gradient`] provides the independent
//! central-difference oracle used by the gradient checks.

mod tape;

pub use tape::{log_sigmoid, sigmoid, Tape, Var, SIGMOID_SATURATION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative step for central differences: h = step · max(1, |p|).
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Index of a parameter inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable parameters. Names are unique and ids are stable for the
/// lifetime of the set; `version` counts in-place updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<f64>,
    version: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Builds a set named `{prefix}{i}` from a slice.
    pub fn from_values(prefix: &str, values: &[f64]) -> Self {
        Self {
            names: (0..values.len()).map(|i| format!("{prefix}{i}")).collect(),
            values: values.to_vec(),
            version: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> f64 {
        self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().copied())
    }

    /// Mutable access to every value; bumps the version.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.values);
        self.version += 1;
    }

    pub fn set(&mut self, id: ParamId, value: f64) {
        self.values[id.0] = value;
        self.version += 1;
    }

    /// Records every parameter as a leaf, in id order.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        tape.vars(&self.values)
    }
}

/// A value together with its gradient, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiffValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl DiffValue {
    pub fn grad(&self, id: ParamId) -> f64 {
        self.gradient[id.0]
    }
}

/// Pins a closure to the higher-ranked expression signature so it can be
/// bound to a variable and reused.
pub fn expression<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Forward value of `expr` at `params`.
pub fn evaluate<F>(expr: F, params: &ParameterSet) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let out = expr(&tape, &leaves)?;
    tape.check()?;
    Ok(out.value())
}

/// Value and exact gradient of `expr` by one reverse sweep.
pub fn evaluate_with_gradient<F>(expr: F, params: &ParameterSet) -> Result<DiffValue>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let out = expr(&tape, &leaves)?;
    let adj = tape.adjoints(out)?;
    Ok(DiffValue {
        value: out.value(),
        gradient: leaves.iter().map(|v| adj[v.index()]).collect(),
    })
}

/// Central differences (f(p+h) − f(p−h)) / 2h with h = step · max(1, |p|).
pub fn finite_difference_gradient<F>(expr: F, params: &ParameterSet, step: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidParameter {
            name: "step",
            value: step,
            reason: "finite-difference step must be positive",
        });
    }
    let mut probe = params.clone();
    (0..params.len())
        .map(|i| {
            let p = params.values[i];
            let h = step * p.abs().max(1.0);
            probe.values[i] = p + h;
            let plus = evaluate(&expr, &probe)?;
            probe.values[i] = p - h;
            let minus = evaluate(&expr, &probe)?;
            probe.values[i] = p;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest |a − n| / max(|a|, |n|) over parameters whose absolute error
    /// exceeds the floor.
    pub max_relative_error: f64,
    pub worst: Option<ParamId>,
}

impl GradientCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_relative_error <= rel_tol
    }
}

/// Absolute errors at or below this are accepted regardless of magnitude.
pub const GRADIENT_ABS_FLOOR: f64 = 1e-8;

pub fn check_gradient<F>(expr: F, params: &ParameterSet, step: f64) -> Result<GradientCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = evaluate_with_gradient(&expr, params)?.gradient;
    let numeric = finite_difference_gradient(&expr, params, step)?;
    let mut max_relative_error = 0.0;
    let mut worst = None;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        if abs <= GRADIENT_ABS_FLOOR {
            continue;
        }
        let rel = abs / a.abs().max(n.abs());
        if rel > max_relative_error {
            max_relative_error = rel;
            worst = Some(ParamId(i));
        }
    }
    Ok(GradientCheck {
        analytic,
        numeric,
        max_relative_error,
        worst,
    })
}
