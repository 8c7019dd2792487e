//! The transition network `X(x, t, r)`: a time-conditioned MLP.
//!
//! Time quantities are encoded with sinusoidal features and concatenated to
//! the state. Class conditioning adds a learned row to the first hidden
//! pre-activation; the last row of that table is the null (unconditional)
//! class. In [`ParamMode::Residual`] the network output is read as an
//! average velocity, `X = x + (r - t) * net`, so `X(x, t, t) = x` holds
//! for any weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Activation, Algebra, Point, Primal, TimeMap};
use crate::error::{Result, TfmError};
use crate::params::Params;
use crate::tensor::Tensor;

/// Optional class label per sample; `None` selects the null class.
pub type Label = Option<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeEmbedConfig {
    pub dim: usize,
    #[serde(default = "default_max_period")]
    pub max_period: f64,
}

fn default_max_period() -> f64 {
    1e4
}

impl Default for TimeEmbedConfig {
    fn default() -> Self {
        Self { dim: 64, max_period: default_max_period() }
    }
}

impl TimeEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(TfmError::config("model.time_embed.dim", format!("{} must be even and positive", self.dim)));
        }
        if !(self.max_period > 0.0) {
            return Err(TfmError::config("model.time_embed.max_period", "must be positive"));
        }
        Ok(())
    }
}

/// Sinusoidal features of one time value: `[sin(s w_k), cos(s w_k)]` with
/// `w_k = max_period^(-2k/dim)`.
pub fn time_embed(s: f64, cfg: &TimeEmbedConfig) -> Result<Tensor> {
    let row = autodiff::kernels::sinusoid(&Tensor::vector(vec![s]), cfg.dim, cfg.max_period)?;
    row.reshape(vec![cfg.dim])
}

/// Which time quantities feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditioningMode {
    #[serde(rename = "T_R")]
    TR,
    #[serde(rename = "T_DT")]
    TDt,
    #[serde(rename = "T_R_DT")]
    TRDt,
    #[serde(rename = "DT_ONLY")]
    DtOnly,
}

impl ConditioningMode {
    pub fn embed_count(self) -> usize {
        match self {
            ConditioningMode::TR | ConditioningMode::TDt => 2,
            ConditioningMode::TRDt => 3,
            ConditioningMode::DtOnly => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamMode {
    #[serde(rename = "DIRECT")]
    Direct,
    #[serde(rename = "RESIDUAL")]
    Residual,
}

/// Architecture of a transition network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TfmConfig {
    pub data_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub time_embed: TimeEmbedConfig,
    pub cond_mode: ConditioningMode,
    pub param_mode: ParamMode,
    pub n_classes: usize,
}

impl Default for TfmConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_sizes: vec![256; 4],
            activation: Activation::Silu,
            time_embed: TimeEmbedConfig::default(),
            cond_mode: ConditioningMode::TDt,
            param_mode: ParamMode::Residual,
            n_classes: 0,
        }
    }
}

impl TfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(TfmError::config("model.data_dim", "must be positive"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(TfmError::config("model.hidden_sizes", "layer widths must be positive"));
        }
        self.time_embed.validate()
    }

    fn input_width(&self) -> usize {
        self.data_dim + self.cond_mode.embed_count() * self.time_embed.dim
    }
}

/// Layer stack shared by the transition network and the velocity baseline.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MlpLayout {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    pub n_classes: usize,
}

impl MlpLayout {
    fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input);
        w.extend_from_slice(&self.hidden);
        w.push(self.output);
        w
    }

    /// Uniform `±sqrt(1/fan_in)` initialization; the final layer is zeroed
    /// when `zero_final` is set.
    pub fn init<R: Rng + ?Sized>(&self, zero_final: bool, rng: &mut R) -> Params {
        let widths = self.widths();
        let mut entries = Vec::with_capacity(2 * self.n_layers() + 1);
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let last = l + 1 == self.n_layers();
            let mut draw = |n: usize| -> Vec<f64> {
                if last && zero_final {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
            };
            let w = draw(fan_in * fan_out);
            let b = draw(fan_out);
            entries.push((format!("layers.{l}.weight"), Tensor::from_parts(vec![fan_in, fan_out], w)));
            entries.push((format!("layers.{l}.bias"), Tensor::from_parts(vec![fan_out], b)));
        }
        if self.n_classes > 0 {
            let width = widths[1];
            let bound = (1.0 / widths[0] as f64).sqrt();
            let table = (0..(self.n_classes + 1) * width).map(|_| rng.gen_range(-bound..bound)).collect();
            entries.push(("class_embed".to_string(), Tensor::from_parts(vec![self.n_classes + 1, width], table)));
        }
        Params::from_entries(entries).expect("generated names are unique")
    }

    pub fn expected_shapes(&self) -> Vec<Vec<usize>> {
        let widths = self.widths();
        let mut shapes = Vec::new();
        for l in 0..self.n_layers() {
            shapes.push(vec![widths[l], widths[l + 1]]);
            shapes.push(vec![widths[l + 1]]);
        }
        if self.n_classes > 0 {
            shapes.push(vec![self.n_classes + 1, widths[1]]);
        }
        shapes
    }

    pub fn check_params(&self, params: &Params) -> Result<()> {
        let expected = self.expected_shapes();
        if expected.len() != params.len() {
            return Err(TfmError::Shape(format!(
                "architecture needs {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, t), shape) in params.iter().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(TfmError::Shape(format!("`{name}` is {:?}, expected {:?}", t.shape(), shape)));
            }
        }
        Ok(())
    }

    pub fn forward<A: Algebra>(
        &self,
        alg: &mut A,
        params: &[A::P],
        input: &A::V,
        class_rows: Option<&[usize]>,
    ) -> Result<A::V> {
        let layers = self.n_layers();
        let mut h = input.clone();
        for l in 0..layers {
            h = alg.linear(&h, &params[2 * l], &params[2 * l + 1])?;
            if l == 0 {
                if let Some(rows) = class_rows {
                    h = alg.add_rows(&h, &params[2 * layers], rows)?;
                }
            }
            if l + 1 < layers {
                h = alg.activate(&h, self.activation);
            }
        }
        Ok(h)
    }
}

/// Resolves per-sample labels to embedding-table rows (`n_classes` is the null row).
pub(crate) fn class_rows(n_classes: usize, labels: Option<&[Label]>, n: usize) -> Result<Option<Vec<usize>>> {
    if n_classes == 0 {
        if let Some(bad) = labels.and_then(|l| l.iter().flatten().next()) {
            return Err(TfmError::Index(format!("class {bad} given to an unconditional model")));
        }
        return Ok(None);
    }
    match labels {
        None => Ok(Some(vec![n_classes; n])),
        Some(l) => {
            if l.len() != n {
                return Err(TfmError::Shape(format!("{} labels for {n} samples", l.len())));
            }
            l.iter()
                .map(|c| match *c {
                    None => Ok(n_classes),
                    Some(c) if c < n_classes => Ok(c),
                    Some(c) => Err(TfmError::Index(format!("class {c} with {n_classes} classes"))),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        }
    }
}

pub(crate) fn check_batch(x: &Tensor, data_dim: usize) -> Result<()> {
    if x.rank() != 2 || x.cols() != data_dim {
        return Err(TfmError::Shape(format!("batch {:?} for data dimension {data_dim}", x.shape())));
    }
    Ok(())
}

fn check_times(t: &Tensor, r: &Tensor, n: usize) -> Result<()> {
    if t.shape() != [n] || r.shape() != [n] {
        return Err(TfmError::Shape(format!("times {:?}/{:?} for {n} samples", t.shape(), r.shape())));
    }
    for (i, (&ti, &ri)) in t.data().iter().zip(r.data()).enumerate() {
        if ti > ri {
            return Err(TfmError::Precondition(format!("sample {i}: t = {ti} > r = {ri}")));
        }
    }
    Ok(())
}

/// The transition network with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TfmModel {
    config: TfmConfig,
    params: Params,
}

impl TfmModel {
    pub fn new<R: Rng + ?Sized>(config: TfmConfig, zero_init_final: bool, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = layout_of(&config).init(zero_init_final, rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: TfmConfig, params: Params) -> Result<Self> {
        config.validate()?;
        layout_of(&config).check_params(&params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TfmConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Params) -> Result<()> {
        layout_of(&self.config).check_params(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    /// Generic evaluation over any backend. `t`, `r` have shape `[n]`.
    pub fn apply<A: Algebra>(
        &self,
        alg: &mut A,
        params: &[A::P],
        x: &A::V,
        t: &A::V,
        r: &A::V,
        class_rows: Option<&[usize]>,
    ) -> Result<A::V> {
        let n = alg.value(x).rows();
        check_batch(alg.value(x), self.config.data_dim)?;
        check_times(alg.value(t), alg.value(r), n)?;
        let te = &self.config.time_embed;
        let dt = alg.sub(r, t)?;
        let mut parts = vec![x.clone()];
        let embeds: Vec<&A::V> = match self.config.cond_mode {
            ConditioningMode::TR => vec![t, r],
            ConditioningMode::TDt => vec![t, &dt],
            ConditioningMode::TRDt => vec![t, r, &dt],
            ConditioningMode::DtOnly => vec![&dt],
        };
        for s in embeds {
            parts.push(alg.sinusoid(s, te.dim, te.max_period)?);
        }
        let input = alg.concat_cols(&parts)?;
        let out = layout_of(&self.config).forward(alg, params, &input, class_rows)?;
        match self.config.param_mode {
            ParamMode::Direct => Ok(out),
            ParamMode::Residual => {
                let step = alg.mul_rows(&out, &dt)?;
                alg.add(x, &step)
            }
        }
    }

    /// Raw network output (the average-velocity head in residual mode).
    pub fn net_output(&self, x: &Tensor, t: &[f64], r: &[f64], labels: Option<&[Label]>) -> Result<Tensor> {
        let direct = TfmModel {
            config: TfmConfig { param_mode: ParamMode::Direct, ..self.config.clone() },
            params: self.params.clone(),
        };
        direct.forward(x, t, r, labels)
    }

    /// `X(x, t, r)` for a batch `x: [n, d]` with per-sample times.
    pub fn forward(&self, x: &Tensor, t: &[f64], r: &[f64], labels: Option<&[Label]>) -> Result<Tensor> {
        let rows = class_rows(self.config.n_classes, labels, x.rows())?;
        let (tv, rv) = (Tensor::vector(t.to_vec()), Tensor::vector(r.to_vec()));
        self.apply(&mut Primal, self.params.tensors(), x, &tv, &rv, rows.as_deref())
    }

    /// Single-point convenience: `x` has shape `[d]`.
    pub fn forward_point(&self, x: &Tensor, t: f64, r: f64, label: Label) -> Result<Tensor> {
        let batch = x.clone().reshape(vec![1, x.len()])?;
        let out = self.forward(&batch, &[t], &[r], Some(&[label]))?;
        out.reshape(vec![self.config.data_dim])
    }

    /// `(X, dX/dt)` where the total derivative follows tangent `(v, 1, 0)`.
    pub fn forward_jvp(
        &self,
        x: &Tensor,
        t: &[f64],
        r: &[f64],
        v: &Tensor,
        labels: Option<&[Label]>,
    ) -> Result<(Tensor, Tensor)> {
        let n = x.rows();
        let (tv, rv) = (Tensor::vector(t.to_vec()), Tensor::vector(r.to_vec()));
        let (one, zero) = (Tensor::full(&[n], 1.0), Tensor::zeros(&[n]));
        self.jvp(Point::new(x, &tv, &rv), Point::new(v, &one, &zero), labels)
    }

    /// Directional derivative along an arbitrary tangent.
    pub fn jvp(&self, at: Point, tangent: Point, labels: Option<&[Label]>) -> Result<(Tensor, Tensor)> {
        let bound = self.bind(labels, at.x.rows())?;
        autodiff::jvp(&bound, self.params.tensors(), at, tangent)
    }

    /// The model with labels fixed, as a [`TimeMap`] over its own parameters.
    pub fn bind(&self, labels: Option<&[Label]>, n: usize) -> Result<BoundModel<'_>> {
        Ok(BoundModel { model: self, rows: class_rows(self.config.n_classes, labels, n)? })
    }
}

fn layout_of(config: &TfmConfig) -> MlpLayout {
    MlpLayout {
        input: config.input_width(),
        hidden: config.hidden_sizes.clone(),
        output: config.data_dim,
        activation: config.activation,
        n_classes: config.n_classes,
    }
}

/// A [`TfmModel`] with resolved class rows.
pub struct BoundModel<'m> {
    model: &'m TfmModel,
    rows: Option<Vec<usize>>,
}

impl TimeMap for BoundModel<'_> {
    fn apply<A: Algebra>(&self, alg: &mut A, params: &[A::P], x: &A::V, t: &A::V, r: &A::V) -> Result<A::V> {
        self.model.apply(alg, params, x, t, r, self.rows.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(mode: ParamMode, cond: ConditioningMode, n_classes: usize) -> TfmModel {
        let cfg = TfmConfig {
            data_dim: 2,
            hidden_sizes: vec![16, 16],
            activation: Activation::Silu,
            time_embed: TimeEmbedConfig { dim: 8, max_period: 1e4 },
            cond_mode: cond,
            param_mode: mode,
            n_classes,
        };
        TfmModel::new(cfg, false, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn embedding_at_zero_alternates() {
        let e = time_embed(0.0, &TimeEmbedConfig { dim: 6, max_period: 1e4 }).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(time_embed(0.7, &TimeEmbedConfig::default()).unwrap().len(), 64);
    }

    #[test]
    fn embedding_is_injective_on_a_grid() {
        let cfg = TimeEmbedConfig::default();
        let embs: Vec<Tensor> = (0..128).map(|i| time_embed(i as f64 / 127.0, &cfg).unwrap()).collect();
        for i in 0..embs.len() {
            for j in 0..i {
                assert!(embs[i].sub(&embs[j]).unwrap().norm() > 0.0);
            }
        }
    }

    #[test]
    fn residual_boundary_is_exact() {
        let m = small(ParamMode::Residual, ConditioningMode::TDt, 0);
        let x = Tensor::matrix(3, 2, vec![0.3, -1.2, 4.0, 0.0, -0.5, 2.5]).unwrap();
        let t = [0.0, 0.4, 1.0];
        assert_eq!(m.forward(&x, &t, &t, None).unwrap(), x);
    }

    #[test]
    fn shapes_do_not_depend_on_mode() {
        let x = Tensor::matrix(2, 2, vec![0.3, -1.2, 4.0, 0.0]).unwrap();
        for cond in [ConditioningMode::TR, ConditioningMode::TDt, ConditioningMode::TRDt, ConditioningMode::DtOnly] {
            let m = small(ParamMode::Direct, cond, 0);
            assert_eq!(m.forward(&x, &[0.1, 0.2], &[0.5, 0.9], None).unwrap().shape(), &[2, 2]);
        }
    }

    #[test]
    fn t_after_r_rejected() {
        let m = small(ParamMode::Residual, ConditioningMode::TDt, 0);
        let x = Tensor::vector(vec![0.0, 0.0]);
        assert!(matches!(m.forward_point(&x, 0.6, 0.5, None), Err(TfmError::Precondition(_))));
    }

    #[test]
    fn class_out_of_range_rejected() {
        let m = small(ParamMode::Residual, ConditioningMode::TDt, 3);
        let x = Tensor::vector(vec![0.0, 0.0]);
        assert!(m.forward_point(&x, 0.1, 0.5, Some(2)).is_ok());
        assert!(m.forward_point(&x, 0.1, 0.5, None).is_ok());
        assert!(matches!(m.forward_point(&x, 0.1, 0.5, Some(3)), Err(TfmError::Index(_))));
        let u = small(ParamMode::Residual, ConditioningMode::TDt, 0);
        assert!(matches!(u.forward_point(&x, 0.1, 0.5, Some(0)), Err(TfmError::Index(_))));
    }

    #[test]
    fn zero_final_layer_gives_identity_transport() {
        let mut cfg = small(ParamMode::Residual, ConditioningMode::TDt, 0).config().clone();
        cfg.hidden_sizes = vec![8];
        let m = TfmModel::new(cfg, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.5, -0.5]).unwrap();
        assert_eq!(m.forward(&x, &[0.0], &[1.0], None).unwrap(), x);
    }

    #[test]
    fn jvp_matches_finite_differences() {
        for cond in [ConditioningMode::TR, ConditioningMode::TDt, ConditioningMode::TRDt, ConditioningMode::DtOnly] {
            let m = small(ParamMode::Residual, cond, 2);
            let x = Tensor::matrix(2, 2, vec![0.3, -1.2, 1.0, 0.5]).unwrap();
            let v = Tensor::matrix(2, 2, vec![1.0, 0.4, -0.7, 0.2]).unwrap();
            let (t, r) = (Tensor::vector(vec![0.2, 0.5]), Tensor::vector(vec![0.7, 0.9]));
            let (one, zero) = (Tensor::full(&[2], 1.0), Tensor::zeros(&[2]));
            let labels = [Some(1), None];
            let bound = m.bind(Some(&labels), 2).unwrap();
            let err = autodiff::check_jvp_fd(
                &bound,
                m.params().tensors(),
                Point::new(&x, &t, &r),
                Point::new(&v, &one, &zero),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{cond:?}: {err}");
        }
    }
}
