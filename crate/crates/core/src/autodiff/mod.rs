//! Forward- and reverse-mode differentiation over a small, fixed set of
//! dense primitives.
//!
//! Functions are written once against [`Algebra`] and evaluated by one of
//! three backends:
//!
//! * [`Primal`] evaluates plain values,
//! * [`Forward`] lifts every primitive to dual numbers and yields a
//!   Jacobian-vector product alongside the value,
//! * [`Tape`] records the primal computation for reverse accumulation.
//!
//! The supported primitives are matmul / affine maps, addition, scalar and
//! per-row scaling, column concatenation, tanh and SiLU, sinusoidal time
//! features, squaring, and sum/mean reductions.

mod dual;
pub(crate) mod kernels;
mod primal;
mod tape;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dual::{DualTensor, Forward};
pub use primal::Primal;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Result, TfmError};
use crate::params::Params;
use crate::tensor::Tensor;

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Silu,
}

impl FromStr for Activation {
    type Err = TfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "silu" | "swish" => Ok(Activation::Silu),
            other => Err(TfmError::Unsupported(format!("activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        };
        f.write_str(name)
    }
}

/// The primitive set, abstracted over the evaluation backend.
///
/// `V` is a differentiable value, `P` a parameter. Parameters are a
/// separate type so forward mode can treat them as constants without
/// materializing zero tangents.
pub trait Algebra {
    type V: Clone;
    type P;

    fn constant(&mut self, t: Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    fn linear(&mut self, x: &Self::V, w: &Self::P, b: &Self::P) -> Result<Self::V>;
    /// `h[i] += table[idx[i]]`, the additive embedding lookup.
    fn add_rows(&mut self, h: &Self::V, table: &Self::P, idx: &[usize]) -> Result<Self::V>;
    fn activate(&mut self, x: &Self::V, act: Activation) -> Self::V;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    /// Scales row `i` of `a` by `s[i]`; `s` has shape `[n]`.
    fn mul_rows(&mut self, a: &Self::V, s: &Self::V) -> Result<Self::V>;
    /// Sinusoidal features of a `[n]` time vector, shape `[n, dim]`.
    fn sinusoid(&mut self, s: &Self::V, dim: usize, max_period: f64) -> Result<Self::V>;
    fn square(&mut self, a: &Self::V) -> Self::V;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn mean(&mut self, a: &Self::V) -> Self::V;
    /// `[n, d] -> [n]`.
    fn sum_cols(&mut self, a: &Self::V) -> Result<Self::V>;
}

/// A differentiable map `(x, t, r) -> y` with parameters passed explicitly.
pub trait TimeMap {
    fn apply<A: Algebra>(&self, alg: &mut A, params: &[A::P], x: &A::V, t: &A::V, r: &A::V) -> Result<A::V>;
}

/// Values at which a [`TimeMap`] is evaluated, or a direction in that space.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub x: &'a Tensor,
    pub t: &'a Tensor,
    pub r: &'a Tensor,
}

impl<'a> Point<'a> {
    pub fn new(x: &'a Tensor, t: &'a Tensor, r: &'a Tensor) -> Self {
        Self { x, t, r }
    }
}

fn check_tangents(inputs: Point, tangents: Point) -> Result<()> {
    inputs.x.ensure_same_shape(tangents.x, "x tangent")?;
    inputs.t.ensure_same_shape(tangents.t, "t tangent")?;
    inputs.r.ensure_same_shape(tangents.r, "r tangent")
}

/// Evaluates `f` and its directional derivative
/// `∂x f · tx + ∂t f · tt + ∂r f · tr` in one forward pass.
pub fn jvp<F: TimeMap>(f: &F, params: &[Tensor], inputs: Point, tangents: Point) -> Result<(Tensor, Tensor)> {
    check_tangents(inputs, tangents)?;
    let mut alg = Forward;
    let x = DualTensor::new(inputs.x.clone(), tangents.x.clone())?;
    let t = DualTensor::new(inputs.t.clone(), tangents.t.clone())?;
    let r = DualTensor::new(inputs.r.clone(), tangents.r.clone())?;
    let out = f.apply(&mut alg, params, &x, &t, &r)?;
    Ok(out.into_parts())
}

/// Plain evaluation of `f`.
pub fn evaluate<F: TimeMap>(f: &F, params: &[Tensor], at: Point) -> Result<Tensor> {
    let mut alg = Primal;
    f.apply(&mut alg, params, at.x, at.t, at.r)
}

fn shifted(p: Point, d: Point, c: f64) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((p.x.axpy(c, d.x)?, p.t.axpy(c, d.t)?, p.r.axpy(c, d.r)?))
}

/// Maximum entrywise relative gap between [`jvp`] and a central difference
/// with step `eps`: `|jvp - cd| / (|cd| + 1e-12)`.
pub fn check_jvp_fd<F: TimeMap>(f: &F, params: &[Tensor], inputs: Point, tangents: Point, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(TfmError::Precondition(format!("finite-difference step {eps} must be > 0")));
    }
    let (_, derivative) = jvp(f, params, inputs, tangents)?;
    let (xp, tp, rp) = shifted(inputs, tangents, eps)?;
    let (xm, tm, rm) = shifted(inputs, tangents, -eps)?;
    let plus = evaluate(f, params, Point::new(&xp, &tp, &rp))?;
    let minus = evaluate(f, params, Point::new(&xm, &tm, &rm))?;
    let mut worst: f64 = 0.0;
    for ((&d, &a), &b) in derivative.data().iter().zip(plus.data()).zip(minus.data()) {
        let cd = (a - b) / (2.0 * eps);
        worst = worst.max((d - cd).abs() / (cd.abs() + 1e-12));
    }
    Ok(worst)
}

/// Reverse-mode gradient of a scalar loss with respect to every parameter.
///
/// `loss_fn` receives a fresh tape and one leaf per parameter (in the order
/// of `params`). Parameters the loss never touches get zero gradients.
pub fn grad<F>(loss_fn: F, params: &Params) -> Result<(f64, Params)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let loss = loss_fn(&mut tape, &leaves)?;
    let value = tape
        .value_of(loss)
        .item()
        .map_err(|_| TfmError::Contract(format!("loss must be scalar, got shape {:?}", tape.value_of(loss).shape())))?;
    let mut grads = tape.backward(loss)?;
    let out = params
        .iter()
        .zip(&leaves)
        .map(|((name, t), &v)| (name.to_string(), grads.take_or_zeros(v, t.shape())))
        .collect();
    Ok((value, Params::from_entries(out)?))
}
