use super::{kernels, Activation, Algebra};
use crate::error::{Result, TfmError};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    AddRows { h: Var, table: Var, idx: Vec<usize> },
    Act { x: Var, act: Activation },
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulRows(Var, Var),
    Sinusoid { s: Var, dim: usize, max_period: f64 },
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulRows(a, b) => {
                vec![*a, *b]
            }
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::AddRows { h, table, .. } => vec![*h, *table],
            Op::Act { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::Scale(a, _) | Op::Square(a) | Op::Sum(a) | Op::Mean(a) | Op::SumCols(a) => vec![*a],
            Op::Sinusoid { s, .. } => vec![*s],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Records primal operations with their outputs for reverse accumulation.
///
/// A tape is built for one loss evaluation and consumed by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Evaluates one op from the values of its parents.
fn eval<'a>(op: &Op, vals: impl Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => kernels::matmul(vals(*a), vals(*b))?,
        Op::Linear { x, w, b } => kernels::linear(vals(*x), vals(*w), vals(*b))?,
        Op::AddRows { h, table, idx } => kernels::add_rows(vals(*h), vals(*table), idx)?,
        Op::Act { x, act } => kernels::activate(vals(*x), *act),
        Op::Concat(parts) => {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| vals(p)).collect();
            kernels::concat_cols(&refs)?
        }
        Op::Add(a, b) => vals(*a).add(vals(*b))?,
        Op::Sub(a, b) => vals(*a).sub(vals(*b))?,
        Op::Mul(a, b) => vals(*a).mul(vals(*b))?,
        Op::Scale(a, c) => vals(*a).scale(*c),
        Op::MulRows(a, s) => kernels::mul_rows(vals(*a), vals(*s))?,
        Op::Sinusoid { s, dim, max_period } => kernels::sinusoid(vals(*s), *dim, *max_period)?,
        Op::Square(a) => vals(*a).map(|v| v * v),
        Op::Sum(a) => Tensor::scalar(vals(*a).sum()),
        Op::Mean(a) => {
            let t = vals(*a);
            Tensor::scalar(t.sum() / t.len() as f64)
        }
        Op::SumCols(a) => kernels::sum_cols(vals(*a))?,
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input. Only leaves with `needs_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value_of(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            eval(&op, |v: Var| &nodes[v.0].value)?
        };
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn record_infallible(&mut self, op: Op) -> Var {
        self.record(op).expect("shape-preserving op cannot fail")
    }

    /// Recomputes every non-leaf node from the stored leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf => node.value.clone(),
                op => eval(op, |v: Var| &out[v.0])?,
            };
            out.push(value);
        }
        Ok(out)
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TfmError::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    accumulate_gemm(
                        grads,
                        *a,
                        &[m, k],
                        m,
                        n,
                        k,
                        MatRef::new(g.data(), n, false),
                        MatRef::new(bv.data(), n, true),
                    );
                }
                if self.wants(*b) {
                    accumulate_gemm(
                        grads,
                        *b,
                        &[k, n],
                        k,
                        m,
                        n,
                        MatRef::new(av.data(), k, true),
                        MatRef::new(g.data(), n, false),
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, fan_in, fan_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.wants(*x) {
                    accumulate_gemm(
                        grads,
                        *x,
                        &[n, fan_in],
                        n,
                        fan_out,
                        fan_in,
                        MatRef::new(g.data(), fan_out, false),
                        MatRef::new(wv.data(), fan_out, true),
                    );
                }
                if self.wants(*w) {
                    accumulate_gemm(
                        grads,
                        *w,
                        &[fan_in, fan_out],
                        fan_in,
                        n,
                        fan_out,
                        MatRef::new(xv.data(), fan_in, true),
                        MatRef::new(g.data(), fan_out, false),
                    );
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::vector(kernels::column_sums(g)))?;
                }
            }
            Op::AddRows { h, table, idx } => {
                if self.wants(*h) {
                    accumulate(grads, *h, g.clone())?;
                }
                if self.wants(*table) {
                    let mut dt = Tensor::zeros(val(*table).shape());
                    for (i, &k) in idx.iter().enumerate() {
                        for (o, v) in dt.row_mut(k).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *table, dt)?;
                }
            }
            Op::Act { x, act } => {
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for ((d, &xi), &yi) in dx.data_mut().iter_mut().zip(val(*x).data()).zip(out.data()) {
                        *d *= kernels::activate_grad(xi, yi, *act);
                    }
                    accumulate(grads, *x, dx)?;
                }
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| val(p).cols()).collect();
                for (&p, piece) in parts.iter().zip(kernels::split_cols(g, &widths)) {
                    if self.wants(p) {
                        accumulate(grads, p, piece)?;
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.mul(val(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.mul(val(*a))?)?;
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.scale(*c))?;
                }
            }
            Op::MulRows(a, s) => {
                if self.wants(*a) {
                    accumulate(grads, *a, kernels::mul_rows(g, val(*s))?)?;
                }
                if self.wants(*s) {
                    let av = val(*a);
                    let ds = (0..av.rows()).map(|i| av.row(i).iter().zip(g.row(i)).map(|(x, y)| x * y).sum()).collect();
                    accumulate(grads, *s, Tensor::vector(ds))?;
                }
            }
            Op::Sinusoid { s, dim, max_period } => {
                if self.wants(*s) {
                    let slope = kernels::sinusoid_deriv(val(*s), *dim, *max_period);
                    let ds = (0..slope.rows())
                        .map(|i| slope.row(i).iter().zip(g.row(i)).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(grads, *s, Tensor::vector(ds))?;
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(val(*a), |gi, v| 2.0 * v * gi)?)?;
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::full(val(*a).shape(), g.data()[0]))?;
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = val(*a).len() as f64;
                    accumulate(grads, *a, Tensor::full(val(*a).shape(), g.data()[0] / n))?;
                }
            }
            Op::SumCols(a) => {
                if self.wants(*a) {
                    let av = val(*a);
                    let d = av.cols();
                    let mut da = Tensor::zeros(av.shape());
                    for i in 0..av.rows() {
                        da.row_mut(i).iter_mut().for_each(|v| *v = g.data()[i]);
                    }
                    debug_assert_eq!(da.cols(), d);
                    accumulate(grads, *a, da)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign_scaled(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// `grads[v] += a · b` with `a: [m, k]`, `b: [k, n]` given as strided views.
#[allow(clippy::too_many_arguments)]
fn accumulate_gemm(
    grads: &mut [Option<Tensor>],
    v: Var,
    shape: &[usize],
    m: usize,
    k: usize,
    n: usize,
    a: MatRef,
    b: MatRef,
) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    gemm(m, k, n, a, b, slot.data_mut(), 1.0);
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Removes the gradient of `v`, substituting zeros when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Algebra for Tape {
    type V = Var;
    type P = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.value_of(*v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::MatMul(*a, *b))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Linear { x: *x, w: *w, b: *b })
    }

    fn add_rows(&mut self, h: &Var, table: &Var, idx: &[usize]) -> Result<Var> {
        self.record(Op::AddRows { h: *h, table: *table, idx: idx.to_vec() })
    }

    fn activate(&mut self, x: &Var, act: Activation) -> Var {
        self.record_infallible(Op::Act { x: *x, act })
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::Concat(parts.to_vec()))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Sub(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Mul(*a, *b))
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        self.record_infallible(Op::Scale(*a, c))
    }

    fn mul_rows(&mut self, a: &Var, s: &Var) -> Result<Var> {
        self.record(Op::MulRows(*a, *s))
    }

    fn sinusoid(&mut self, s: &Var, dim: usize, max_period: f64) -> Result<Var> {
        self.record(Op::Sinusoid { s: *s, dim, max_period })
    }

    fn square(&mut self, a: &Var) -> Var {
        self.record_infallible(Op::Square(*a))
    }

    fn sum(&mut self, a: &Var) -> Var {
        self.record_infallible(Op::Sum(*a))
    }

    fn mean(&mut self, a: &Var) -> Var {
        self.record_infallible(Op::Mean(*a))
    }

    fn sum_cols(&mut self, a: &Var) -> Result<Var> {
        self.record(Op::SumCols(*a))
    }
}
