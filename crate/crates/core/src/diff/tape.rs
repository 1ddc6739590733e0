//! Wengert tape for reverse-mode differentiation of scalar expressions.
//!
//! Every primitive pushes one node holding its forward value and the local
//! partial derivatives with respect to its inputs. [`Tape::adjoints`] sweeps
//! the record backwards once, so the cost of a full gradient is linear in the
//! size of the record regardless of how many leaves there are.
//!
//! Domain violations (log of a non-positive number, division by zero, results
//! that overflow) do not panic: the offending node gets a NaN value and the
//! tape remembers the first fault, which [`Tape::check`] turns into
//! [`Error::Domain`].

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Sigmoid arguments beyond this magnitude saturate to 0 or 1 with a zero
/// derivative.
pub const SIGMOID_SATURATION: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Fault {
    op: &'static str,
    value: f64,
}

#[derive(Default)]
struct Record {
    values: Vec<f64>,
    // node i owns edges[offsets[i]..offsets[i + 1]]
    offsets: Vec<usize>,
    edges: Vec<(usize, f64)>,
}

/// An append-only record of scalar operations.
pub struct Tape {
    record: RefCell<Record>,
    fault: Cell<Option<Fault>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("fault", &self.fault.get())
            .finish()
    }
}

/// A node on a [`Tape`]. Cheap to copy; arithmetic on it records new nodes.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.index, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        let record = Record {
            offsets: vec![0],
            ..Record::default()
        };
        Self {
            record: RefCell::new(record),
            fault: Cell::new(None),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.record.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf node. Leaves are the only nodes whose adjoints callers usually
    /// read, but every node gets one.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push("leaf", value, std::iter::empty())
    }

    /// A leaf that is never read back; semantically a constant.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.var(value)
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(
        &self,
        op: &'static str,
        value: f64,
        edges: impl IntoIterator<Item = (usize, f64)>,
    ) -> Var<'_> {
        if !value.is_finite() {
            self.flag(op, value);
        }
        let mut rec = self.record.borrow_mut();
        let index = rec.values.len();
        rec.values.push(value);
        rec.edges.extend(edges);
        let end = rec.edges.len();
        rec.offsets.push(end);
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn flag(&self, op: &'static str, value: f64) {
        if self.fault.get().is_none() {
            self.fault.set(Some(Fault { op, value }));
        }
    }

    /// Returns the first domain violation recorded, if any.
    pub fn check(&self) -> Result<()> {
        match self.fault.get() {
            None => Ok(()),
            Some(Fault { op, value }) => Err(Error::Domain { op, value }),
        }
    }

    /// Reverse sweep from `output`. The returned vector holds d output / d node
    /// for every node on the tape, indexed like [`Var::index`].
    pub fn adjoints(&self, output: Var<'_>) -> Result<Vec<f64>> {
        self.check()?;
        let rec = self.record.borrow();
        let mut adj = vec![0.0; rec.values.len()];
        adj[output.index] = 1.0;
        for node in (0..=output.index).rev() {
            let a = adj[node];
            if a == 0.0 {
                continue;
            }
            for &(parent, partial) in &rec.edges[rec.offsets[node]..rec.offsets[node + 1]] {
                adj[parent] += a * partial;
            }
        }
        Ok(adj)
    }

    /// Sum with a single n-ary node; the empty sum is the constant 0.
    pub fn sum(&self, xs: &[Var<'_>]) -> Var<'_> {
        let value = xs.iter().map(|x| x.value).sum();
        self.push("sum", value, xs.iter().map(|x| (x.index, 1.0)))
    }

    /// Σ w_i x_i with constant weights.
    pub fn dot_const(&self, xs: &[Var<'_>], weights: &[f64]) -> Var<'_> {
        debug_assert_eq!(xs.len(), weights.len());
        let value = xs.iter().zip(weights).map(|(x, w)| x.value * w).sum();
        self.push(
            "dot",
            value,
            xs.iter().zip(weights).map(|(x, &w)| (x.index, w)),
        )
    }

    /// Σ x_i y_i over two recorded vectors.
    pub fn dot(&self, xs: &[Var<'_>], ys: &[Var<'_>]) -> Var<'_> {
        debug_assert_eq!(xs.len(), ys.len());
        let value = xs.iter().zip(ys).map(|(x, y)| x.value * y.value).sum();
        let edges = xs
            .iter()
            .zip(ys)
            .flat_map(|(x, y)| [(x.index, y.value), (y.index, x.value)]);
        self.push("dot", value, edges)
    }

    /// Matrix-vector product with the matrix given as rows.
    pub fn matvec<'a>(&'a self, rows: &[Vec<Var<'a>>], v: &[Var<'a>]) -> Vec<Var<'a>> {
        rows.iter().map(|row| self.dot(row, v)).collect()
    }

    /// Matrix-vector product against a constant vector.
    pub fn matvec_const<'a>(&'a self, rows: &[Vec<Var<'a>>], v: &[f64]) -> Vec<Var<'a>> {
        rows.iter().map(|row| self.dot_const(row, v)).collect()
    }

    /// log Σ exp(x_i), shifted by the maximum.
    pub fn log_sum_exp(&self, xs: &[Var<'_>]) -> Var<'_> {
        if xs.is_empty() {
            self.flag("log_sum_exp", f64::NEG_INFINITY);
            return self.push("log_sum_exp", f64::NAN, std::iter::empty());
        }
        let m = xs.iter().map(|x| x.value).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = xs.iter().map(|x| (x.value - m).exp()).sum();
        let value = m + z.ln();
        self.push(
            "log_sum_exp",
            value,
            xs.iter().map(|x| (x.index, (x.value - m).exp() / z)),
        )
    }

    /// Softmax with max-subtraction. Output i has partials
    /// y_i (δ_ij − y_j) with respect to input j.
    pub fn softmax<'a>(&'a self, xs: &[Var<'a>]) -> Vec<Var<'a>> {
        if xs.is_empty() {
            return Vec::new();
        }
        let m = xs.iter().map(|x| x.value).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xs.iter().map(|x| (x.value - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let y: Vec<f64> = e.iter().map(|v| v / z).collect();
        (0..xs.len())
            .map(|i| {
                let edges = xs.iter().enumerate().filter_map(|(j, x)| {
                    let d = if i == j { y[i] * (1.0 - y[j]) } else { -y[i] * y[j] };
                    (d != 0.0).then_some((x.index, d))
                });
                self.push("softmax", y[i], edges)
            })
            .collect()
    }

    /// Log-softmax: x_i − log Σ exp(x_j).
    pub fn log_softmax<'a>(&'a self, xs: &[Var<'a>]) -> Vec<Var<'a>> {
        let lse = self.log_sum_exp(xs);
        xs.iter().map(|&x| x - lse).collect()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: &'static str, value: f64, partial: f64) -> Var<'t> {
        self.tape.push(op, value, [(self.index, partial)])
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value.exp();
        self.unary("exp", v, v)
    }

    /// Natural logarithm; non-positive arguments are a domain fault.
    pub fn ln(self) -> Var<'t> {
        if self.value <= 0.0 {
            self.tape.flag("ln", self.value);
            return self.unary("ln", f64::NAN, 0.0);
        }
        self.unary("ln", self.value.ln(), 1.0 / self.value)
    }

    pub fn recip(self) -> Var<'t> {
        if self.value == 0.0 {
            self.tape.flag("div", self.value);
            return self.unary("recip", f64::NAN, 0.0);
        }
        let r = 1.0 / self.value;
        self.unary("recip", r, -r * r)
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(self) -> Var<'t> {
        let d = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary("abs", self.value.abs(), d)
    }

    /// max(x, y); at equality the derivative goes to `self`.
    pub fn max(self, other: Var<'t>) -> Var<'t> {
        if self.value >= other.value {
            self.tape.push("max", self.value, [(self.index, 1.0)])
        } else {
            self.tape.push("max", other.value, [(other.index, 1.0)])
        }
    }

    /// max(x, c) for a constant c.
    pub fn max_const(self, c: f64) -> Var<'t> {
        if self.value >= c {
            self.unary("max", self.value, 1.0)
        } else {
            self.unary("max", c, 0.0)
        }
    }

    pub fn sigmoid(self) -> Var<'t> {
        let x = self.value;
        if x > SIGMOID_SATURATION {
            return self.unary("sigmoid", 1.0, 0.0);
        }
        if x < -SIGMOID_SATURATION {
            return self.unary("sigmoid", 0.0, 0.0);
        }
        let s = sigmoid(x);
        self.unary("sigmoid", s, s * (1.0 - s))
    }

    /// log σ(x) = −softplus(−x), finite for every finite x.
    pub fn log_sigmoid(self) -> Var<'t> {
        let x = self.value;
        self.unary("log_sigmoid", log_sigmoid(x), sigmoid(-x))
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        self.unary("tanh", t, 1.0 - t * t)
    }

    pub fn square(self) -> Var<'t> {
        self.unary("square", self.value * self.value, 2.0 * self.value)
    }
}

/// Numerically stable logistic function on plain floats.
pub fn sigmoid(x: f64) -> f64 {
    if x > SIGMOID_SATURATION {
        1.0
    } else if x < -SIGMOID_SATURATION {
        0.0
    } else if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x) on plain floats.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            "add",
            self.value + rhs.value,
            [(self.index, 1.0), (rhs.index, 1.0)],
        )
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            "sub",
            self.value - rhs.value,
            [(self.index, 1.0), (rhs.index, -1.0)],
        )
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            "mul",
            self.value * rhs.value,
            [(self.index, rhs.value), (rhs.index, self.value)],
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        if rhs.value == 0.0 {
            self.tape.flag("div", rhs.value);
            return self.tape.push("div", f64::NAN, std::iter::empty());
        }
        let q = self.value / rhs.value;
        self.tape.push(
            "div",
            q,
            [(self.index, 1.0 / rhs.value), (rhs.index, -q / rhs.value)],
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary("neg", -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary("add", self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary("sub", self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary("mul", self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        if rhs == 0.0 {
            self.tape.flag("div", rhs);
            return self.unary("div", f64::NAN, 0.0);
        }
        self.unary("div", self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary("sub", self - rhs.value, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        rhs.recip() * self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_via_mul() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = x * x;
        let adj = tape.adjoints(y).unwrap();
        assert_eq!(y.value(), 9.0);
        assert_eq!(adj[x.index()], 6.0);
    }

    #[test]
    fn log_of_zero_is_a_domain_error() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let y = x.ln() + 1.0;
        assert!(y.value().is_nan());
        match tape.adjoints(y) {
            Err(Error::Domain { op: "ln", .. }) => {}
            other => panic!("expected ln domain error, got {other:?}"),
        }
    }

    #[test]
    fn division_by_zero_is_a_domain_error() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let z = tape.var(0.0);
        let _ = x / z;
        assert!(matches!(tape.check(), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn first_fault_wins() {
        let tape = Tape::new();
        let _ = tape.var(-1.0).ln();
        let _ = tape.var(1.0) / 0.0;
        assert!(matches!(tape.check(), Err(Error::Domain { op: "ln", .. })));
    }

    #[test]
    fn sigmoid_saturates_with_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(800.0);
        let y = x.sigmoid();
        assert_eq!(y.value(), 1.0);
        assert_eq!(tape.adjoints(y).unwrap()[x.index()], 0.0);

        let x = tape.var(-800.0);
        let y = x.sigmoid();
        assert_eq!(y.value(), 0.0);
        assert_eq!(tape.adjoints(y).unwrap()[x.index()], 0.0);
    }

    #[test]
    fn log_sigmoid_is_finite_far_out() {
        assert_eq!(log_sigmoid(1000.0), 0.0);
        assert_eq!(log_sigmoid(-1000.0), -1000.0);
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_with_huge_logits() {
        let tape = Tape::new();
        let xs = tape.vars(&[1e5, 1e5 - 1.0, -1e5]);
        let ys = tape.softmax(&xs);
        let total: f64 = ys.iter().map(Var::value).sum();
        assert!((total - 1.0).abs() < 1e-15);
        tape.check().unwrap();
    }

    #[test]
    fn empty_sum_is_zero() {
        let tape = Tape::new();
        assert_eq!(tape.sum(&[]).value(), 0.0);
    }

    #[test]
    fn constants_have_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let c = tape.constant(5.0);
        let y = c * 3.0 + 1.0;
        let adj = tape.adjoints(y).unwrap();
        assert_eq!(adj[x.index()], 0.0);
    }
}
