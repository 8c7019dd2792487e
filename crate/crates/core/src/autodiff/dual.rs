use super::{kernels, Activation, Algebra};
use crate::error::Result;
use crate::tensor::Tensor;

/// A value paired with its directional derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor {
    value: Tensor,
    tangent: Tensor,
}

impl DualTensor {
    pub fn new(value: Tensor, tangent: Tensor) -> Result<Self> {
        value.ensure_same_shape(&tangent, "dual value/tangent")?;
        Ok(Self { value, tangent })
    }

    pub fn constant(value: Tensor) -> Self {
        let tangent = Tensor::zeros(value.shape());
        Self { value, tangent }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn tangent(&self) -> &Tensor {
        &self.tangent
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.value, self.tangent)
    }

    fn pair(value: Tensor, tangent: Tensor) -> Self {
        debug_assert_eq!(value.shape(), tangent.shape());
        Self { value, tangent }
    }
}

/// Forward-mode backend: every primitive propagates `(value, tangent)`.
/// Parameters are constants, so affine maps only push the tangent through
/// the weight matrix.
#[derive(Debug, Default, Clone, Copy)]
pub struct Forward;

impl Algebra for Forward {
    type V = DualTensor;
    type P = Tensor;

    fn constant(&mut self, t: Tensor) -> DualTensor {
        DualTensor::constant(t)
    }

    fn value<'a>(&'a self, v: &'a DualTensor) -> &'a Tensor {
        &v.value
    }

    fn matmul(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let value = kernels::matmul(&a.value, &b.value)?;
        let tangent = kernels::matmul(&a.tangent, &b.value)?.add(&kernels::matmul(&a.value, &b.tangent)?)?;
        Ok(DualTensor::pair(value, tangent))
    }

    fn linear(&mut self, x: &DualTensor, w: &Tensor, b: &Tensor) -> Result<DualTensor> {
        let value = kernels::linear(&x.value, w, b)?;
        let tangent = kernels::linear_no_bias(&x.tangent, w)?;
        Ok(DualTensor::pair(value, tangent))
    }

    fn add_rows(&mut self, h: &DualTensor, table: &Tensor, idx: &[usize]) -> Result<DualTensor> {
        let value = kernels::add_rows(&h.value, table, idx)?;
        Ok(DualTensor::pair(value, h.tangent.clone()))
    }

    fn activate(&mut self, x: &DualTensor, act: Activation) -> DualTensor {
        let value = kernels::activate(&x.value, act);
        let mut tangent = x.tangent.clone();
        for ((t, &xi), &yi) in tangent.data_mut().iter_mut().zip(x.value.data()).zip(value.data()) {
            *t *= kernels::activate_grad(xi, yi, act);
        }
        DualTensor::pair(value, tangent)
    }

    fn concat_cols(&mut self, parts: &[DualTensor]) -> Result<DualTensor> {
        let values: Vec<&Tensor> = parts.iter().map(|p| &p.value).collect();
        let tangents: Vec<&Tensor> = parts.iter().map(|p| &p.tangent).collect();
        Ok(DualTensor::pair(kernels::concat_cols(&values)?, kernels::concat_cols(&tangents)?))
    }

    fn add(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        Ok(DualTensor::pair(a.value.add(&b.value)?, a.tangent.add(&b.tangent)?))
    }

    fn sub(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        Ok(DualTensor::pair(a.value.sub(&b.value)?, a.tangent.sub(&b.tangent)?))
    }

    fn mul(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let value = a.value.mul(&b.value)?;
        let tangent = a.tangent.mul(&b.value)?.add(&a.value.mul(&b.tangent)?)?;
        Ok(DualTensor::pair(value, tangent))
    }

    fn scale(&mut self, a: &DualTensor, c: f64) -> DualTensor {
        DualTensor::pair(a.value.scale(c), a.tangent.scale(c))
    }

    fn mul_rows(&mut self, a: &DualTensor, s: &DualTensor) -> Result<DualTensor> {
        let value = kernels::mul_rows(&a.value, &s.value)?;
        let tangent = kernels::mul_rows(&a.tangent, &s.value)?.add(&kernels::mul_rows(&a.value, &s.tangent)?)?;
        Ok(DualTensor::pair(value, tangent))
    }

    fn sinusoid(&mut self, s: &DualTensor, dim: usize, max_period: f64) -> Result<DualTensor> {
        let value = kernels::sinusoid(&s.value, dim, max_period)?;
        let slope = kernels::sinusoid_deriv(&s.value, dim, max_period);
        let tangent = kernels::mul_rows(&slope, &s.tangent)?;
        Ok(DualTensor::pair(value, tangent))
    }

    fn square(&mut self, a: &DualTensor) -> DualTensor {
        let value = a.value.map(|v| v * v);
        let tangent = a.tangent.zip_map(&a.value, |t, v| 2.0 * v * t).expect("dual invariant: equal shapes");
        DualTensor::pair(value, tangent)
    }

    fn sum(&mut self, a: &DualTensor) -> DualTensor {
        DualTensor::pair(Tensor::scalar(a.value.sum()), Tensor::scalar(a.tangent.sum()))
    }

    fn mean(&mut self, a: &DualTensor) -> DualTensor {
        let n = a.value.len() as f64;
        DualTensor::pair(Tensor::scalar(a.value.sum() / n), Tensor::scalar(a.tangent.sum() / n))
    }

    fn sum_cols(&mut self, a: &DualTensor) -> Result<DualTensor> {
        Ok(DualTensor::pair(kernels::sum_cols(&a.value)?, kernels::sum_cols(&a.tangent)?))
    }
}
