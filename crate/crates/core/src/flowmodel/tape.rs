//! Reverse-mode differentiation with respect to the policy parameters.
//!
//! Scalar operations are recorded on a tape. A velocity evaluation is a
//! single multi-output node whose backward pass is the network's own
//! vector-Jacobian product, so the tape stays small even though every
//! objective is built from many network calls. The state `x`, the time and
//! the condition embedding are treated as constants.
//!
//! `min` and `clamp` propagate the gradient of the selected branch; at a tie
//! the first operand (respectively the interior) is selected.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Mul, Neg, Sub};

use super::mlp::{velocity_vjp, velocity_with_cache, ForwardCache, GradientBuffer, PolicyParams};
use crate::condspace::ConditionEmbedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf,
    Param(usize),
    Unary(usize, f64),
    Binary(usize, f64, usize, f64),
    VelocityOut { call: usize, dim: usize },
}

#[derive(Debug, Default)]
pub struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    calls: RefCell<Vec<ForwardCache>>,
    failure: Cell<Option<&'static str>>,
    velocity_evals: Cell<usize>,
}

/// A scalar recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t TapeInner,
    idx: usize,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}#{})", self.value, self.idx)
    }
}

impl TapeInner {
    fn push(&self, node: Node, value: f64, op: &'static str) -> Var<'_> {
        if !value.is_finite() && self.failure.get().is_none() {
            self.failure.set(Some(op));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            idx: nodes.len() - 1,
            value,
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    fn unary(self, value: f64, d: f64, op: &'static str) -> Var<'t> {
        self.tape.push(Node::Unary(self.idx, d), value, op)
    }

    fn binary(self, other: Var<'t>, value: f64, da: f64, db: f64, op: &'static str) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        self.tape
            .push(Node::Binary(self.idx, da, other.idx, db), value, op)
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(e, e, "exp")
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(self.value.ln(), 1.0 / self.value, "ln")
    }

    pub fn square(self) -> Var<'t> {
        self.unary(self.value * self.value, 2.0 * self.value, "square")
    }

    pub fn abs(self) -> Var<'t> {
        let sign = if self.value < 0.0 { -1.0 } else { 1.0 };
        self.unary(self.value.abs(), sign, "abs")
    }

    /// Gradient of the selected operand; ties select `self`.
    pub fn min(self, other: Var<'t>) -> Var<'t> {
        if self.value <= other.value {
            self.binary(other, self.value, 1.0, 0.0, "min")
        } else {
            self.binary(other, other.value, 0.0, 1.0, "min")
        }
    }

    /// Unit gradient inside `[lo, hi]` (inclusive), zero outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        if self.value < lo {
            self.unary(lo, 0.0, "clamp")
        } else if self.value > hi {
            self.unary(hi, 0.0, "clamp")
        } else {
            self.unary(self.value, 1.0, "clamp")
        }
    }

    pub fn constant_like(self, value: f64) -> Var<'t> {
        self.tape.push(Node::Leaf, value, "constant")
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0, "add")
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0, "sub")
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value, "mul")
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value + rhs, 1.0, "add")
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value - rhs, 1.0, "sub")
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.value * rhs, rhs, "mul")
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0, "neg")
    }
}

/// Arithmetic shared by plain `f64` evaluation and taped evaluation, so the
/// two paths execute the same floating-point operations in the same order.
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Add<f64, Output = Self>
    + Sub<f64, Output = Self> + Mul<f64, Output = Self> + Neg<Output = Self>
{
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn min(self, other: Self) -> Self;
    fn clamp(self, lo: f64, hi: f64) -> Self;
    fn square(self) -> Self;
}

impl Real for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
    fn square(self) -> Self {
        self * self
    }
}

impl Real for Var<'_> {
    fn value(&self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn min(self, other: Self) -> Self {
        Var::min(self, other)
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        Var::clamp(self, lo, hi)
    }
    fn square(self) -> Self {
        Var::square(self)
    }
}

/// Sums a nonempty sequence left to right.
pub fn sum<S: Real>(items: impl IntoIterator<Item = S>) -> S {
    let mut it = items.into_iter();
    let first = it.next().expect("sum of an empty sequence");
    it.fold(first, |acc, x| acc + x)
}

/// A tape bound to the parameters being differentiated.
pub struct Tape<'a> {
    params: &'a PolicyParams,
    inner: TapeInner,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a PolicyParams) -> Self {
        Self {
            params,
            inner: TapeInner::default(),
        }
    }

    pub fn params(&self) -> &'a PolicyParams {
        self.params
    }

    /// Independent scalar, constant with respect to the parameters.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.inner.push(Node::Leaf, value, "constant")
    }

    /// Parameter entry `j` as a tape variable.
    pub fn param(&self, j: usize) -> Var<'_> {
        self.inner.push(Node::Param(j), self.params.values()[j], "param")
    }

    /// Velocity of the bound parameters, one tape variable per output dim.
    pub fn velocity(&self, x: &[f64], t: f64, e: &ConditionEmbedding) -> Result<Vec<Var<'_>>> {
        let (out, cache) = velocity_with_cache(self.params, x, t, e)?;
        let call = {
            let mut calls = self.inner.calls.borrow_mut();
            calls.push(cache);
            calls.len() - 1
        };
        self.inner.velocity_evals.set(self.inner.velocity_evals.get() + 1);
        Ok(out
            .into_iter()
            .enumerate()
            .map(|(dim, v)| self.inner.push(Node::VelocityOut { call, dim }, v, "velocity"))
            .collect())
    }

    pub fn velocity_evals(&self) -> usize {
        self.inner.velocity_evals.get()
    }

    fn backward(&self, output: Var<'_>) -> GradientBuffer {
        let nodes = self.inner.nodes.borrow();
        let calls = self.inner.calls.borrow();
        let mut adjoint = vec![0.0; nodes.len()];
        adjoint[output.idx] = 1.0;
        let mut grad = GradientBuffer::zeros(self.params.len());
        for i in (0..=output.idx).rev() {
            let a = adjoint[i];
            match nodes[i] {
                Node::Leaf => {}
                Node::Param(j) => grad.0[j] += a,
                Node::Unary(p, d) => adjoint[p] += a * d,
                Node::Binary(p, dp, q, dq) => {
                    adjoint[p] += a * dp;
                    adjoint[q] += a * dq;
                }
                // Outputs of one call are contiguous, so by the time dim 0
                // is reached every output adjoint of that call is final.
                Node::VelocityOut { call, dim: 0 } => {
                    let d = self.params.config().data_dim;
                    let dy = &adjoint[i..i + d];
                    if dy.iter().any(|v| *v != 0.0) {
                        velocity_vjp(self.params, &calls[call], dy, &mut grad.0);
                    }
                }
                Node::VelocityOut { .. } => {}
            }
        }
        grad
    }
}

/// Evaluates a scalar objective and its gradient with respect to `params`.
pub fn value_and_grad<F>(params: &PolicyParams, objective: F) -> Result<(f64, GradientBuffer)>
where
    F: for<'t> FnOnce(&'t Tape<'_>) -> Result<Var<'t>>,
{
    let tape = Tape::new(params);
    let out = objective(&tape)?;
    if let Some(op) = tape.inner.failure.get() {
        return Err(Error::numeric(op, "non-finite intermediate during objective evaluation"));
    }
    let value = out.value;
    let grad = tape.backward(out);
    if let Some(j) = grad.0.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric("backward", format!("non-finite gradient at parameter {j}")));
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmodel::mlp::{velocity, Activation, VelocityFieldConfig};
    use crate::rng::{stream, Purpose};

    fn tiny() -> PolicyParams {
        let cfg = VelocityFieldConfig {
            data_dim: 2,
            cond_dim: 4,
            hidden: vec![5],
            time_features: 2,
            activation: Activation::Tanh,
        };
        PolicyParams::init(cfg, &mut stream(3, Purpose::Init, &[])).unwrap()
    }

    #[test]
    fn quadratic_objective_gradient_is_identity() {
        let p = tiny();
        let (v, g) = value_and_grad(&p, |tape| {
            Ok(sum((0..p.len()).map(|j| tape.param(j).square())) * 0.5)
        })
        .unwrap();
        let expected = p.values().iter().map(|x| x * x).sum::<f64>() * 0.5;
        assert!((v - expected).abs() < 1e-12);
        assert_eq!(g.0, p.values());
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let p = tiny();
        let (v, g) = value_and_grad(&p, |tape| Ok(tape.constant(3.0) * 2.0)).unwrap();
        assert_eq!(v, 6.0);
        assert!(g.0.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn velocity_node_gradient_matches_vjp() {
        let p = tiny();
        let e = ConditionEmbedding(vec![1.0, 0.5, 0.0, 0.0]);
        let x = [0.3, -0.4];
        let (val, g) = value_and_grad(&p, |tape| {
            let v = tape.velocity(&x, 0.6, &e)?;
            Ok(v[0].square() + v[1] * 3.0)
        })
        .unwrap();
        let v = velocity(&p, &x, 0.6, &e).unwrap();
        assert_eq!(val, v[0] * v[0] + v[1] * 3.0);
        let h = 1e-6;
        for j in 0..p.len() {
            let mut plus = p.values().to_vec();
            let mut minus = plus.clone();
            plus[j] += h;
            minus[j] -= h;
            let f = |vals: Vec<f64>| {
                let v = velocity(&p.with_values(vals).unwrap(), &x, 0.6, &e).unwrap();
                v[0] * v[0] + v[1] * 3.0
            };
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            assert!((fd - g.0[j]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let p = tiny();
        let err = value_and_grad(&p, |tape| Ok((tape.constant(1000.0)).exp())).unwrap_err();
        match err {
            Error::NumericFailure { op, .. } => assert_eq!(op, "exp"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn min_and_clamp_select_branch_gradients() {
        let p = tiny();
        let e = ConditionEmbedding(vec![1.0, 0.5, 0.0, 0.0]);
        let (_, g_min) = value_and_grad(&p, |tape| {
            let v = tape.velocity(&[0.1, 0.2], 0.3, &e)?;
            let big = tape.constant(1e9);
            Ok(v[0].min(big))
        })
        .unwrap();
        let (_, g_v) = value_and_grad(&p, |tape| Ok(tape.velocity(&[0.1, 0.2], 0.3, &e)?[0])).unwrap();
        assert_eq!(g_min, g_v);

        let (_, g_clamped) = value_and_grad(&p, |tape| {
            Ok(tape.velocity(&[0.1, 0.2], 0.3, &e)?[0].clamp(1e6, 2e6))
        })
        .unwrap();
        assert!(g_clamped.0.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn real_trait_paths_agree_bitwise() {
        let f = |a: f64, b: f64| {
            let p = tiny();
            let taped = value_and_grad(&p, |tape| {
                let x = tape.constant(a);
                let y = tape.constant(b);
                Ok(Real::min((x * y + 1.5).exp() - y.square(), x).clamp(-1.0, 1.0))
            })
            .unwrap()
            .0;
            let plain = Real::min((a * b + 1.5).exp() - b.square(), a).clamp(-1.0, 1.0);
            (taped, plain)
        };
        for (a, b) in [(0.2, -0.3), (1.7, 0.4), (-2.0, 2.0)] {
            let (t, p) = f(a, b);
            assert_eq!(t.to_bits(), p.to_bits());
        }
    }
}
