//! Velocity-head baseline `v(x, t)` sharing the transition network's layer
//! stack, embeddings and initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Algebra, Primal};
use crate::error::{Result, TfmError};
use crate::flowcore::VelocityField;
use crate::nets::{check_batch, class_rows, Label, MlpLayout, TfmConfig, TimeEmbedConfig};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmConfig {
    pub data_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub time_embed: TimeEmbedConfig,
    pub n_classes: usize,
}

impl Default for FmConfig {
    fn default() -> Self {
        Self::matching(&TfmConfig::default())
    }
}

impl FmConfig {
    /// Same stack as `tfm`, minus the `r` inputs.
    pub fn matching(tfm: &TfmConfig) -> Self {
        Self {
            data_dim: tfm.data_dim,
            hidden_sizes: tfm.hidden_sizes.clone(),
            activation: tfm.activation,
            time_embed: tfm.time_embed,
            n_classes: tfm.n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(TfmError::config("model.data_dim", "must be positive"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(TfmError::config("model.hidden_sizes", "layer widths must be positive"));
        }
        self.time_embed.validate()
    }

    fn layout(&self) -> MlpLayout {
        MlpLayout {
            input: self.data_dim + self.time_embed.dim,
            hidden: self.hidden_sizes.clone(),
            output: self.data_dim,
            activation: self.activation,
            n_classes: self.n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmModel {
    config: FmConfig,
    params: Params,
}

impl FmModel {
    pub fn new<R: Rng + ?Sized>(config: FmConfig, zero_init_final: bool, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = config.layout().init(zero_init_final, rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: FmConfig, params: Params) -> Result<Self> {
        config.validate()?;
        config.layout().check_params(&params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &FmConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Params) -> Result<()> {
        self.config.layout().check_params(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    /// Generic evaluation; `t` has shape `[n]`.
    pub fn apply<A: Algebra>(
        &self,
        alg: &mut A,
        params: &[A::P],
        x: &A::V,
        t: &A::V,
        class_rows: Option<&[usize]>,
    ) -> Result<A::V> {
        check_batch(alg.value(x), self.config.data_dim)?;
        let n = alg.value(x).rows();
        if alg.value(t).shape() != [n] {
            return Err(TfmError::Shape(format!("times {:?} for {n} samples", alg.value(t).shape())));
        }
        let te = self.config.time_embed;
        let emb = alg.sinusoid(t, te.dim, te.max_period)?;
        let input = alg.concat_cols(&[x.clone(), emb])?;
        self.config.layout().forward(alg, params, &input, class_rows)
    }

    /// Velocity estimates for a batch `x: [n, d]` with per-sample times.
    pub fn forward(&self, x: &Tensor, t: &[f64], labels: Option<&[Label]>) -> Result<Tensor> {
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(TfmError::Precondition(format!("t = {bad} outside [0, 1]")));
        }
        let rows = class_rows(self.config.n_classes, labels, x.rows())?;
        self.apply(&mut Primal, self.params.tensors(), x, &Tensor::vector(t.to_vec()), rows.as_deref())
    }

    /// Single-point convenience: `x` has shape `[d]`.
    pub fn fm_forward(&self, x: &Tensor, t: f64, label: Label) -> Result<Tensor> {
        let batch = x.clone().reshape(vec![1, x.len()])?;
        self.forward(&batch, &[t], Some(&[label]))?.reshape(vec![self.config.data_dim])
    }

    /// The model as a field with every sample given `labels`.
    pub fn field<'m>(&'m self, labels: Option<&'m [Label]>) -> impl VelocityField + 'm {
        move |x: &Tensor, t: f64| self.forward(x, &vec![t; x.rows()], labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(n_classes: usize, zero: bool) -> FmModel {
        let cfg = FmConfig {
            data_dim: 2,
            hidden_sizes: vec![16, 16],
            activation: Activation::Silu,
            time_embed: TimeEmbedConfig { dim: 8, max_period: 1e4 },
            n_classes,
        };
        FmModel::new(cfg, zero, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn shape_preserved() {
        let m = small(3, false);
        let x = Tensor::matrix(4, 2, (0..8).map(f64::from).collect()).unwrap();
        let out = m.forward(&x, &[0.0, 0.2, 0.7, 1.0], Some(&[Some(0), None, Some(2), Some(1)])).unwrap();
        assert_eq!(out.shape(), &[4, 2]);
        assert_eq!(m.fm_forward(&Tensor::vector(vec![1.0, 2.0]), 0.5, None).unwrap().shape(), &[2]);
    }

    #[test]
    fn zero_final_layer_gives_zero_velocity() {
        let m = small(0, true);
        let x = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.0]).unwrap();
        assert_eq!(m.forward(&x, &[0.1, 0.5, 0.9], None).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = small(0, false);
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(m.forward(&x, &[1.5], None).is_err());
        assert!(m.forward(&x, &[0.5], Some(&[Some(0)])).is_err());
        assert!(m.forward(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap(), &[0.5], None).is_err());
    }
}
