//! Primal kernels shared by every backend. The tape and the plain evaluator
//! call exactly these functions so replayed values match recorded ones bit
//! for bit.

use super::Activation;
use crate::error::{Result, TfmError};
use crate::tensor::{gemm, MatRef, Tensor};

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

fn check_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(TfmError::Shape(format!("linear input {:?} with weight {:?}", x.shape(), w.shape())));
    }
    let out = w.shape()[1];
    if b.shape() != [out] {
        return Err(TfmError::Shape(format!("bias {:?} for {} outputs", b.shape(), out)));
    }
    Ok((x.shape()[0], x.shape()[1], out))
}

/// `x · w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, fan_in, out) = check_linear(x, w, b)?;
    let mut data = Vec::with_capacity(n * out);
    for _ in 0..n {
        data.extend_from_slice(b.data());
    }
    gemm(n, fan_in, out, MatRef::new(x.data(), fan_in, false), MatRef::new(w.data(), out, false), &mut data, 1.0);
    Ok(Tensor::from_parts(vec![n, out], data))
}

/// `x · w` without bias (tangent propagation through a fixed layer).
pub(crate) fn linear_no_bias(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    x.matmul(w)
}

pub(crate) fn add_rows(h: &Tensor, table: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if h.rank() != 2 || table.rank() != 2 || h.shape()[1] != table.shape()[1] {
        return Err(TfmError::Shape(format!("row gather {:?} into {:?}", table.shape(), h.shape())));
    }
    if idx.len() != h.rows() {
        return Err(TfmError::Shape(format!("{} row indices for {} rows", idx.len(), h.rows())));
    }
    let mut out = h.clone();
    for (i, &k) in idx.iter().enumerate() {
        if k >= table.rows() {
            return Err(TfmError::Index(format!("row {k} of a {}-row table", table.rows())));
        }
        for (o, e) in out.row_mut(i).iter_mut().zip(table.row(k)) {
            *o += e;
        }
    }
    Ok(out)
}

pub(crate) fn activate(x: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Identity => x.clone(),
        Activation::Tanh => x.map(f64::tanh),
        Activation::Silu => x.map(|v| v * sigmoid(v)),
    }
}

/// Derivative of the activation at pre-activation `x` given its output `y`.
pub(crate) fn activate_grad(x: f64, y: f64, act: Activation) -> f64 {
    match act {
        Activation::Identity => 1.0,
        Activation::Tanh => 1.0 - y * y,
        Activation::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| TfmError::Shape("concat of nothing".into()))?;
    let n = first.rows();
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rank() != 2 || p.rows() != n {
            return Err(TfmError::Shape(format!("concat operand {:?} with {} rows expected", p.shape(), n)));
        }
        widths.push(p.cols());
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::from_parts(vec![n, total], data))
}

/// Splits `[n, sum(widths)]` back into column blocks.
pub(crate) fn split_cols(g: &Tensor, widths: &[usize]) -> Vec<Tensor> {
    let n = g.rows();
    let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(n * w)).collect();
    for i in 0..n {
        let row = g.row(i);
        let mut off = 0;
        for (o, &w) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    outs.into_iter().zip(widths).map(|(d, &w)| Tensor::from_parts(vec![n, w], d)).collect()
}

pub(crate) fn mul_rows(a: &Tensor, s: &Tensor) -> Result<Tensor> {
    if s.rank() != 1 || s.len() != a.rows() || a.rank() == 0 {
        return Err(TfmError::Shape(format!("row scale {:?} for {:?}", s.shape(), a.shape())));
    }
    a.scale_rows(s.data())
}

fn frequencies(dim: usize, max_period: f64) -> impl Iterator<Item = f64> {
    let half = dim / 2;
    (0..half).map(move |k| max_period.powf(-(2.0 * k as f64) / dim as f64))
}

/// Sinusoidal features `[sin(s f_k), cos(s f_k)]` interleaved, one row per entry of `s`.
pub(crate) fn sinusoid(s: &Tensor, dim: usize, max_period: f64) -> Result<Tensor> {
    if s.rank() != 1 {
        return Err(TfmError::Shape(format!("time input {:?} must be rank 1", s.shape())));
    }
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(TfmError::Precondition(format!("embedding dim {dim} must be even and positive")));
    }
    let freqs: Vec<f64> = frequencies(dim, max_period).collect();
    let mut data = Vec::with_capacity(s.len() * dim);
    for &v in s.data() {
        for &f in &freqs {
            let (sn, cs) = (v * f).sin_cos();
            data.push(sn);
            data.push(cs);
        }
    }
    Ok(Tensor::from_parts(vec![s.len(), dim], data))
}

/// Derivative of [`sinusoid`] with respect to each `s`, same layout.
pub(crate) fn sinusoid_deriv(s: &Tensor, dim: usize, max_period: f64) -> Tensor {
    let freqs: Vec<f64> = frequencies(dim, max_period).collect();
    let mut data = Vec::with_capacity(s.len() * dim);
    for &v in s.data() {
        for &f in &freqs {
            let (sn, cs) = (v * f).sin_cos();
            data.push(f * cs);
            data.push(-f * sn);
        }
    }
    Tensor::from_parts(vec![s.len(), dim], data)
}

pub(crate) fn sum_cols(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(TfmError::Shape(format!("row sums of {:?}", a.shape())));
    }
    Ok(Tensor::vector((0..a.rows()).map(|i| a.row(i).iter().sum()).collect()))
}

/// Column sums of `[n, d]`, used for bias gradients.
pub(crate) fn column_sums(g: &Tensor) -> Vec<f64> {
    let d = g.cols();
    let mut out = vec![0.0; d];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}
