use super::{kernels, Activation, Algebra};
use crate::error::Result;
use crate::tensor::Tensor;

/// Plain value evaluation; no derivative bookkeeping.
#[derive(Debug, Default, Clone, Copy)]
pub struct Primal;

impl Algebra for Primal {
    type V = Tensor;
    type P = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::matmul(a, b)
    }

    fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::linear(x, w, b)
    }

    fn add_rows(&mut self, h: &Tensor, table: &Tensor, idx: &[usize]) -> Result<Tensor> {
        kernels::add_rows(h, table, idx)
    }

    fn activate(&mut self, x: &Tensor, act: Activation) -> Tensor {
        kernels::activate(x, act)
    }

    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        kernels::concat_cols(&refs)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.mul(b)
    }

    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        a.scale(c)
    }

    fn mul_rows(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        kernels::mul_rows(a, s)
    }

    fn sinusoid(&mut self, s: &Tensor, dim: usize, max_period: f64) -> Result<Tensor> {
        kernels::sinusoid(s, dim, max_period)
    }

    fn square(&mut self, a: &Tensor) -> Tensor {
        a.map(|v| v * v)
    }

    fn sum(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum())
    }

    fn mean(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum() / a.len() as f64)
    }

    fn sum_cols(&mut self, a: &Tensor) -> Result<Tensor> {
        kernels::sum_cols(a)
    }
}
