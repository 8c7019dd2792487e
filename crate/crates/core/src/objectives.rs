//! Training losses: the self-referential transition objective, the
//! velocity-regression baseline, adaptive weighting, and the optimizer.
//!
//! Both losses reduce to a frozen regression: per sample a target is
//! computed without gradient tracking, then
//! `mean_i sg(w_i) * |X_i - target_i|^2` is differentiated through the
//! model output only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Algebra, Primal, Tape, Var};
use crate::baseline_fm::FmModel;
use crate::error::{Result, TfmError};
use crate::flowcore::{interpolate_rows, CouplingBatch, Schedule, TimePair};
use crate::nets::{class_rows, Label, TfmModel};
use crate::params::Params;
use crate::tensor::Tensor;

/// Loss values above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub power_p: f64,
    pub stabilizer_c: f64,
    pub cfg_dropout: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { power_p: 1.0, stabilizer_c: 1e-3, cfg_dropout: 0.1 }
    }
}

impl LossConfig {
    pub fn plain() -> Self {
        Self { power_p: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.power_p >= 0.0) || !self.power_p.is_finite() {
            return Err(TfmError::config("loss.power_p", "must be a finite value >= 0"));
        }
        if !(self.stabilizer_c > 0.0) || !self.stabilizer_c.is_finite() {
            return Err(TfmError::config("loss.stabilizer_c", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return Err(TfmError::config("loss.cfg_dropout", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-batch telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub weighted_loss: f64,
    /// Mean over samples of `|X - target|^2`.
    pub raw_mse: f64,
    pub mean_weight: f64,
    /// Mean over samples of `|target|`.
    pub target_norm: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.weighted_loss.is_finite()
            && self.raw_mse.is_finite()
            && self.mean_weight.is_finite()
            && self.target_norm.is_finite()
    }
}

/// `1 / (delta_sq + c)^p`.
pub fn adaptive_weight(delta_sq: f64, cfg: &LossConfig) -> f64 {
    debug_assert!(delta_sq >= 0.0);
    if cfg.power_p == 0.0 {
        return 1.0;
    }
    (delta_sq + cfg.stabilizer_c).powf(-cfg.power_p)
}

/// Aborts on NaN or exploding loss. Errors carry `step`.
pub fn divergence_guard(step: usize, report: &LossReport) -> Result<()> {
    if !report.is_finite() || report.weighted_loss > DIVERGENCE_LIMIT {
        return Err(TfmError::Divergence {
            step,
            report: format!(
                "weighted_loss={:e} raw_mse={:e} mean_weight={:e} target_norm={:e}",
                report.weighted_loss, report.raw_mse, report.mean_weight, report.target_norm
            ),
        });
    }
    Ok(())
}

/// Regression inputs with the target already evaluated and detached.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTargets {
    pub x: Tensor,
    pub t: Vec<f64>,
    /// Unused by the velocity baseline.
    pub r: Vec<f64>,
    pub labels: Option<Vec<Label>>,
    pub target: Tensor,
}

impl FrozenTargets {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Replaces each label by the null class with probability `p`. Models
/// without classes get no labels.
pub fn drop_labels<R: Rng + ?Sized>(labels: &[Label], n_classes: usize, p: f64, rng: &mut R) -> Option<Vec<Label>> {
    if n_classes == 0 {
        return None;
    }
    Some(
        labels
            .iter()
            .map(|&l| {
                let drop = p > 0.0 && rng.gen::<f64>() < p;
                if drop {
                    None
                } else {
                    l
                }
            })
            .collect(),
    )
}

fn check_pairs(batch: &CouplingBatch, n: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(TfmError::Precondition("empty batch".into()));
    }
    if n != batch.len() {
        return Err(TfmError::Shape(format!("{n} times for {} samples", batch.len())));
    }
    Ok(())
}

/// `target = x_{t->r} + (r - t) dX/dt`, with the derivative taken along the
/// conditional velocity `(x1 - x0, 1, 0)`.
pub fn tfm_targets(
    model: &TfmModel,
    batch: &CouplingBatch,
    pairs: &[TimePair],
    labels: Option<Vec<Label>>,
) -> Result<FrozenTargets> {
    check_pairs(batch, pairs.len())?;
    let lin = Schedule::linear();
    let t: Vec<f64> = pairs.iter().map(TimePair::t).collect();
    let r: Vec<f64> = pairs.iter().map(TimePair::r).collect();
    let span: Vec<f64> = pairs.iter().map(TimePair::span).collect();
    let x_t = interpolate_rows(&batch.x0, &batch.x1, &t, &lin)?;
    let x_tr = interpolate_rows(&batch.x0, &batch.x1, &r, &lin)?;
    let v = batch.x1.sub(&batch.x0)?;
    let (_, dx_dt) = model.forward_jvp(&x_t, &t, &r, &v, labels.as_deref())?;
    let target = x_tr.add(&dx_dt.scale_rows(&span)?)?;
    Ok(FrozenTargets { x: x_t, t, r, labels, target })
}

/// Velocity-regression targets `x1 - x0` at `x_t`.
pub fn fm_targets(batch: &CouplingBatch, times: &[f64], labels: Option<Vec<Label>>) -> Result<FrozenTargets> {
    check_pairs(batch, times.len())?;
    let x_t = interpolate_rows(&batch.x0, &batch.x1, times, &Schedule::linear())?;
    Ok(FrozenTargets { x: x_t, t: times.to_vec(), r: times.to_vec(), labels, target: batch.x1.sub(&batch.x0)? })
}

fn report_of(delta_sq: &[f64], weights: &[f64], target: &Tensor) -> LossReport {
    let n = delta_sq.len() as f64;
    let norms: f64 = target.row_norms_sq().iter().map(|v| v.sqrt()).sum();
    LossReport {
        weighted_loss: delta_sq.iter().zip(weights).map(|(d, w)| d * w).sum::<f64>() / n,
        raw_mse: delta_sq.iter().sum::<f64>() / n,
        mean_weight: weights.iter().sum::<f64>() / n,
        target_norm: norms / n,
    }
}

/// Shared reverse pass: `output` builds the model output on the tape.
fn regress<F>(params: &Params, targets: &FrozenTargets, cfg: &LossConfig, output: F) -> Result<(LossReport, Params)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut report = None;
    let (_, grads) = autodiff::grad(
        |tape, leaves| {
            let out = output(tape, leaves)?;
            let tgt = tape.constant(targets.target.clone());
            let diff = tape.sub(&out, &tgt)?;
            let sq = tape.square(&diff);
            let per = tape.sum_cols(&sq)?;
            let delta_sq = tape.value_of(per).data().to_vec();
            let weights: Vec<f64> = delta_sq.iter().map(|&d| adaptive_weight(d, cfg)).collect();
            report = Some(report_of(&delta_sq, &weights, &targets.target));
            let w = tape.constant(Tensor::vector(weights));
            let weighted = tape.mul(&per, &w)?;
            Ok(tape.mean(&weighted))
        },
        params,
    )?;
    let report = report.expect("loss closure ran");
    if !report.is_finite() {
        return Err(TfmError::Divergence { step: 0, report: format!("non-finite loss: {report:?}") });
    }
    Ok((report, grads))
}

/// Loss and gradient of a transition model against frozen targets.
pub fn tfm_regress(model: &TfmModel, targets: &FrozenTargets, cfg: &LossConfig) -> Result<(LossReport, Params)> {
    let rows = class_rows(model.n_classes(), targets.labels.as_deref(), targets.len())?;
    regress(model.params(), targets, cfg, |tape, leaves| {
        let x = tape.constant(targets.x.clone());
        let t = tape.constant(Tensor::vector(targets.t.clone()));
        let r = tape.constant(Tensor::vector(targets.r.clone()));
        model.apply(tape, leaves, &x, &t, &r, rows.as_deref())
    })
}

/// One stochastic estimate of the transition objective and its gradient.
/// Divergence errors report step 0; the training loop re-labels them.
pub fn tfm_loss<R: Rng + ?Sized>(
    model: &TfmModel,
    batch: &CouplingBatch,
    pairs: &[TimePair],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(LossReport, Params)> {
    let labels = drop_labels(&batch.labels, model.n_classes(), cfg.cfg_dropout, rng);
    let targets = tfm_targets(model, batch, pairs, labels)?;
    tfm_regress(model, &targets, cfg)
}

pub fn fm_regress(model: &FmModel, targets: &FrozenTargets, cfg: &LossConfig) -> Result<(LossReport, Params)> {
    let rows = class_rows(model.n_classes(), targets.labels.as_deref(), targets.len())?;
    regress(model.params(), targets, cfg, |tape, leaves| {
        let x = tape.constant(targets.x.clone());
        let t = tape.constant(Tensor::vector(targets.t.clone()));
        model.apply(tape, leaves, &x, &t, rows.as_deref())
    })
}

pub fn fm_loss<R: Rng + ?Sized>(
    model: &FmModel,
    batch: &CouplingBatch,
    times: &[f64],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(LossReport, Params)> {
    let labels = drop_labels(&batch.labels, model.n_classes(), cfg.cfg_dropout, rng);
    let targets = fm_targets(batch, times, labels)?;
    fm_regress(model, &targets, cfg)
}

/// Primal value of the frozen objective with fixed per-sample weights,
/// for finite-difference checks of [`tfm_regress`].
pub fn frozen_tfm_objective(model: &TfmModel, targets: &FrozenTargets, weights: &[f64]) -> Result<f64> {
    let rows = class_rows(model.n_classes(), targets.labels.as_deref(), targets.len())?;
    let out = model.apply(
        &mut Primal,
        model.params().tensors(),
        &targets.x,
        &Tensor::vector(targets.t.clone()),
        &Tensor::vector(targets.r.clone()),
        rows.as_deref(),
    )?;
    weighted_mean(&out, targets, weights)
}

pub fn frozen_fm_objective(model: &FmModel, targets: &FrozenTargets, weights: &[f64]) -> Result<f64> {
    let rows = class_rows(model.n_classes(), targets.labels.as_deref(), targets.len())?;
    let out = model.apply(
        &mut Primal,
        model.params().tensors(),
        &targets.x,
        &Tensor::vector(targets.t.clone()),
        rows.as_deref(),
    )?;
    weighted_mean(&out, targets, weights)
}

fn weighted_mean(out: &Tensor, targets: &FrozenTargets, weights: &[f64]) -> Result<f64> {
    let delta = out.sub(&targets.target)?.row_norms_sq();
    if weights.len() != delta.len() {
        return Err(TfmError::Shape(format!("{} weights for {} samples", weights.len(), delta.len())));
    }
    Ok(delta.iter().zip(weights).map(|(d, w)| d * w).sum::<f64>() / delta.len() as f64)
}

/// The per-sample weights [`tfm_regress`] would apply at the current weights.
pub fn tfm_weights(model: &TfmModel, targets: &FrozenTargets, cfg: &LossConfig) -> Result<Vec<f64>> {
    let out = model.forward(&targets.x, &targets.t, &targets.r, targets.labels.as_deref())?;
    Ok(out.sub(&targets.target)?.row_norms_sq().iter().map(|&d| adaptive_weight(d, cfg)).collect())
}

/// `|X(x, t, r) - x_{t->r} - (r - t) dX/dt|` per row, with the derivative
/// along `(velocity, 1, 0)`.
pub fn identity_residuals(
    model: &TfmModel,
    x: &Tensor,
    t: &[f64],
    r: &[f64],
    transition: &Tensor,
    velocity: &Tensor,
    labels: Option<&[Label]>,
) -> Result<Vec<f64>> {
    x.ensure_same_shape(transition, "marginal transition")?;
    let (out, dx_dt) = model.forward_jvp(x, t, r, velocity, labels)?;
    let span: Vec<f64> = t.iter().zip(r).map(|(t, r)| r - t).collect();
    let gap = out.sub(transition)?.sub(&dx_dt.scale_rows(&span)?)?;
    Ok(gap.row_norms_sq().into_iter().map(f64::sqrt).collect())
}

/// Single-point form of [`identity_residuals`]; vectors have shape `[d]`.
pub fn identity_residual(
    model: &TfmModel,
    x_t: &Tensor,
    pair: TimePair,
    marginal_transition: &Tensor,
    marginal_velocity: &Tensor,
    label: Label,
) -> Result<f64> {
    let d = x_t.len();
    let row = |v: &Tensor| v.clone().reshape(vec![1, d]);
    let res = identity_residuals(
        model,
        &row(x_t)?,
        &[pair.t()],
        &[pair.r()],
        &row(marginal_transition)?,
        &row(marginal_velocity)?,
        Some(&[label]),
    )?;
    Ok(res[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, betas: (0.9, 0.999), eps: default_eps() }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TfmError::config("optimizer.lr", "must be positive"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(TfmError::config("optimizer.betas", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(TfmError::config("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Params,
    v: Params,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, like: &Params) -> Self {
        Self { cfg, m: like.zeros_like(), v: like.zeros_like(), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at the configured learning rate.
    pub fn update(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        self.update_with_lr(params, grads, self.cfg.lr)
    }

    pub fn update_with_lr(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        params.ensure_compatible(grads)?;
        self.m.ensure_compatible(params)?;
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        let eps = self.cfg.eps;
        let tensors = params.tensors_mut();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for (i, g) in grads.tensors().iter().enumerate() {
            let p = tensors[i].data_mut();
            let m = m[i].data_mut();
            let v = v[i].data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of weights, used for sampling.
#[derive(Debug, Clone)]
pub struct Ema {
    decay: f64,
    shadow: Params,
}

impl Ema {
    pub fn new(decay: f64, init: &Params) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(TfmError::config("optimizer.ema_decay", "must lie in [0, 1)"));
        }
        Ok(Self { decay, shadow: init.clone() })
    }

    pub fn update(&mut self, params: &Params) -> Result<()> {
        self.shadow.ensure_compatible(params)?;
        let d = self.decay;
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> &Params {
        &self.shadow
    }

    pub fn into_weights(self) -> Params {
        self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::flowcore::{sample_time_pair, TimeSamplerConfig};
    use crate::nets::{ConditioningMode, ParamMode, TfmConfig, TimeEmbedConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn config(mode: ParamMode, hidden: Vec<usize>) -> TfmConfig {
        TfmConfig {
            data_dim: 2,
            hidden_sizes: hidden,
            activation: Activation::Silu,
            time_embed: TimeEmbedConfig { dim: 8, max_period: 1e4 },
            cond_mode: ConditioningMode::TDt,
            param_mode: mode,
            n_classes: 0,
        }
    }

    fn gaussian_batch(n: usize, rng: &mut ChaCha8Rng) -> CouplingBatch {
        let mut draw = |n| {
            let data = (0..2 * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::matrix(n, 2, data).unwrap()
        };
        let x0 = draw(n);
        let x1 = draw(n).map(|v| 2.0 * v + 1.0);
        CouplingBatch { x0, x1, labels: vec![None; n] }
    }

    /// Fourth-order central difference.
    fn stencil(f: &mut impl FnMut(f64) -> f64, h: f64) -> f64 {
        (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
    }

    fn pairs(n: usize, rng: &mut ChaCha8Rng) -> Vec<TimePair> {
        (0..n).map(|_| sample_time_pair(&TimeSamplerConfig::default(), rng)).collect()
    }

    #[test]
    fn weight_examples() {
        let cfg = LossConfig::default();
        assert!((adaptive_weight(0.0, &cfg) - 1000.0).abs() < 1e-9);
        assert!((adaptive_weight(0.999, &cfg) - 1.0).abs() < 1e-12);
        for d in [0.0, 0.5, 1e3] {
            assert_eq!(adaptive_weight(d, &LossConfig::plain()), 1.0);
        }
    }

    #[test]
    fn config_validation_names_key() {
        let bad = LossConfig { stabilizer_c: 0.0, ..LossConfig::default() };
        match bad.validate() {
            Err(TfmError::Config { key, .. }) => assert_eq!(key, "loss.stabilizer_c"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_span_gives_zero_loss_in_residual_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = TfmModel::new(config(ParamMode::Residual, vec![16, 16]), false, &mut rng).unwrap();
        let batch = gaussian_batch(32, &mut rng);
        let pairs: Vec<_> = (0..32).map(|i| TimePair::new(i as f64 / 32.0, i as f64 / 32.0).unwrap()).collect();
        let (report, grads) = tfm_loss(&model, &batch, &pairs, &LossConfig::default(), &mut rng).unwrap();
        assert_eq!(report.weighted_loss, 0.0);
        assert_eq!(report.raw_mse, 0.0);
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_frozen_target_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = TfmModel::new(config(ParamMode::Residual, vec![16, 16]), false, &mut rng).unwrap();
        let batch = gaussian_batch(8, &mut rng);
        let pairs = pairs(8, &mut rng);
        let cfg = LossConfig::default();
        let targets = tfm_targets(&model, &batch, &pairs, None).unwrap();
        let weights = tfm_weights(&model, &targets, &cfg).unwrap();
        let (_, grads) = tfm_regress(&model, &targets, &cfg).unwrap();
        let base = model.params().clone();
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for (k, g) in grads.tensors().iter().enumerate() {
            for j in 0..g.len() {
                let mut shifted = |c: f64| {
                    let mut p = base.clone();
                    p.tensors_mut()[k].data_mut()[j] += c;
                    model.set_params(p).unwrap();
                    frozen_tfm_objective(&model, &targets, &weights).unwrap()
                };
                let fd = stencil(&mut shifted, h);
                worst = worst.max((g.data()[j] - fd).abs() / (fd.abs() + 1e-8));
            }
        }
        assert!(worst < 1e-4, "worst relative gap {worst}");
    }

    #[test]
    fn weighting_only_rescales_single_sample_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = TfmModel::new(config(ParamMode::Direct, vec![8]), false, &mut rng).unwrap();
        let batch = gaussian_batch(1, &mut rng);
        let pairs = pairs(1, &mut rng);
        let targets = tfm_targets(&model, &batch, &pairs, None).unwrap();
        let (_, g0) = tfm_regress(&model, &targets, &LossConfig::plain()).unwrap();
        let (_, g1) = tfm_regress(&model, &targets, &LossConfig::default()).unwrap();
        let (a, b) = (g0.flatten(), g1.flatten());
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn plain_weighting_is_squared_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = TfmModel::new(config(ParamMode::Direct, vec![8]), false, &mut rng).unwrap();
        let batch = gaussian_batch(16, &mut rng);
        let pairs = pairs(16, &mut rng);
        let targets = tfm_targets(&model, &batch, &pairs, None).unwrap();
        let (report, _) = tfm_regress(&model, &targets, &LossConfig::plain()).unwrap();
        let out = model.forward(&targets.x, &targets.t, &targets.r, None).unwrap();
        let mse = out.sub(&targets.target).unwrap().norm_sq() / 16.0;
        assert!((report.weighted_loss - mse).abs() < 1e-12);
        assert_eq!(report.weighted_loss, report.raw_mse);
        assert_eq!(report.mean_weight, 1.0);
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = TfmModel::new(config(ParamMode::Direct, vec![8, 8]), false, &mut rng).unwrap();
        let fm = FmModel::new(crate::baseline_fm::FmConfig::matching(model.config()), false, &mut rng).unwrap();
        for _ in 0..5 {
            let batch = gaussian_batch(16, &mut rng);
            let p = pairs(16, &mut rng);
            let (rep, _) = tfm_loss(&model, &batch, &p, &LossConfig::default(), &mut rng).unwrap();
            assert!(rep.weighted_loss >= 0.0);
            let times: Vec<f64> = p.iter().map(TimePair::t).collect();
            let (rep, _) = fm_loss(&fm, &batch, &times, &LossConfig::default(), &mut rng).unwrap();
            assert!(rep.weighted_loss >= 0.0);
        }
    }

    #[test]
    fn fm_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = crate::baseline_fm::FmConfig::matching(&config(ParamMode::Direct, vec![16, 16]));
        let mut model = FmModel::new(cfg, false, &mut rng).unwrap();
        let batch = gaussian_batch(8, &mut rng);
        let times: Vec<f64> = (0..8).map(|_| rng.gen()).collect();
        let loss_cfg = LossConfig::default();
        let targets = fm_targets(&batch, &times, None).unwrap();
        let (_, grads) = fm_regress(&model, &targets, &loss_cfg).unwrap();
        let out = model.forward(&targets.x, &times, None).unwrap();
        let weights: Vec<f64> =
            out.sub(&targets.target).unwrap().row_norms_sq().iter().map(|&d| adaptive_weight(d, &loss_cfg)).collect();
        let base = model.params().clone();
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for (k, g) in grads.tensors().iter().enumerate() {
            for j in 0..g.len() {
                let mut at = |c: f64| {
                    let mut p = base.clone();
                    p.tensors_mut()[k].data_mut()[j] += c;
                    model.set_params(p).unwrap();
                    frozen_fm_objective(&model, &targets, &weights).unwrap()
                };
                let fd = stencil(&mut at, h);
                worst = worst.max((g.data()[j] - fd).abs() / (fd.abs() + 1e-8));
            }
        }
        assert!(worst < 1e-5, "worst relative gap {worst}");
    }

    #[test]
    fn fm_loss_vanishes_at_exact_velocity() {
        let batch = CouplingBatch {
            x0: Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, -1.0]).unwrap(),
            x1: Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 3.0]).unwrap(),
            labels: vec![None; 2],
        };
        let targets = fm_targets(&batch, &[0.2, 0.8], None).unwrap();
        let exact = batch.x1.sub(&batch.x0).unwrap();
        let r = weighted_mean(&exact, &targets, &[1.0, 1.0]).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn guard_trips_on_nan_and_blowup() {
        let ok = LossReport { weighted_loss: 1.0, raw_mse: 1.0, mean_weight: 1.0, target_norm: 1.0 };
        assert!(divergence_guard(3, &ok).is_ok());
        let nan = LossReport { weighted_loss: f64::NAN, ..ok };
        assert!(matches!(divergence_guard(7, &nan), Err(TfmError::Divergence { step: 7, .. })));
        let big = LossReport { weighted_loss: 2e6, ..ok };
        assert!(divergence_guard(1, &big).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = vec![Some(0), Some(1), Some(2)];
        assert_eq!(drop_labels(&labels, 3, 0.0, &mut rng).unwrap(), labels);
        assert_eq!(drop_labels(&labels, 3, 1.0, &mut rng).unwrap(), vec![None; 3]);
        assert_eq!(drop_labels(&labels, 0, 0.5, &mut rng), None);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let params = Params::from_entries(vec![("w".into(), Tensor::vector(vec![1.0, -1.0]))]).unwrap();
        let grads = Params::from_entries(vec![("w".into(), Tensor::vector(vec![0.5, -3.0]))]).unwrap();
        let mut p = params.clone();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.update(&mut p, &grads).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn ema_tracks_weights() {
        let a = Params::from_entries(vec![("w".into(), Tensor::vector(vec![0.0]))]).unwrap();
        let b = Params::from_entries(vec![("w".into(), Tensor::vector(vec![1.0]))]).unwrap();
        let mut ema = Ema::new(0.5, &a).unwrap();
        ema.update(&b).unwrap();
        ema.update(&b).unwrap();
        assert_eq!(ema.weights().get("w").unwrap().data(), &[0.75]);
        assert!(Ema::new(1.0, &a).is_err());
    }
}
