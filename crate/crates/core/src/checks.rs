//! Named verification suites run by `tfm check`.
//!
//! Each measurement is exposed on its own so tests can apply their own
//! thresholds; [`run_check`] applies the documented tolerances below.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Activation, Algebra, Point};
use crate::baseline_fm::{FmConfig, FmModel};
use crate::error::{Result, TfmError};
use crate::eval::{residual_sweep, sweep_grid, SweepCell};
use crate::experiment::stream;
use crate::flowcore::{sample_time_pair, CouplingBatch, TimePair, TimeSamplerConfig};
use crate::nets::{ConditioningMode, ParamMode, TfmConfig, TfmModel, TimeEmbedConfig};
use crate::objectives::{
    fm_regress, fm_targets, frozen_fm_objective, frozen_tfm_objective, tfm_regress, tfm_targets, tfm_weights, Adam,
    AdamConfig, LossConfig,
};
use crate::oracles::{
    gaussian_marginal_velocity, grad_equivalence_check, integrate_flow_map, AtomTarget, FixedCoupling, GaussianPair,
};
use crate::params::Params;
use crate::sampling::{sample_multistep, sample_onestep, CountingModel, TimeGrid};
use crate::tensor::Tensor;

pub const JVP_MODELS: usize = 50;
pub const JVP_FD_STEP: f64 = 1e-5;
pub const JVP_FD_TOL: f64 = 1e-6;
pub const JVP_LINEARITY_TOL: f64 = 1e-12;
pub const FORWARD_REVERSE_TOL: f64 = 1e-10;
pub const TFM_GRAD_TOL: f64 = 1e-4;
pub const FM_GRAD_TOL: f64 = 1e-5;
/// Step of the five-point stencil used for parameter gradients.
pub const GRAD_FD_STEP: f64 = 1e-3;
pub const SINGLE_ATOM_TOL: f64 = 1e-12;
pub const TWO_ATOM_SAMPLES: usize = 100_000;
pub const TWO_ATOM_MIN_COSINE: f64 = 0.99;
pub const OVERFIT_STEPS: usize = 2000;
pub const OVERFIT_LR: f64 = 1e-2;
pub const OVERFIT_RESIDUAL_TOL: f64 = 1e-2;
#[allow(clippy::approx_constant)]
pub const RK4_EXPECTED: f64 = 0.70711;
pub const RK4_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Suite {
    Jvp,
    Grad,
    Theorem2,
    Identity,
    Sampler,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Jvp, Suite::Grad, Suite::Theorem2, Suite::Identity, Suite::Sampler];
}

impl std::str::FromStr for Suite {
    type Err = TfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "JVP" => Ok(Suite::Jvp),
            "GRAD" => Ok(Suite::Grad),
            "THEOREM2" => Ok(Suite::Theorem2),
            "IDENTITY" => Ok(Suite::Identity),
            "SAMPLER" => Ok(Suite::Sampler),
            _ => Err(TfmError::Precondition(format!(
                "unknown suite `{s}` (expected JVP, GRAD, THEOREM2, IDENTITY or SAMPLER)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">")]
    Above,
    #[serde(rename = "==")]
    Exactly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub value: f64,
    pub comparison: Comparison,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckItem {
    pub fn new(name: &str, value: f64, comparison: Comparison, threshold: f64) -> Self {
        let passed = match comparison {
            Comparison::Below => value < threshold,
            Comparison::Above => value > threshold,
            Comparison::Exactly => value == threshold,
        };
        Self { name: name.into(), value, comparison, threshold, passed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub suite: Suite,
    pub seed: u64,
    pub passed: bool,
    pub items: Vec<CheckItem>,
}

pub fn run_check(suite: Suite, seed: u64) -> Result<CheckReport> {
    use Comparison::*;
    let items = match suite {
        Suite::Jvp => vec![
            CheckItem::new("jvp_vs_central_difference", jvp_fd_error(JVP_MODELS, seed)?, Below, JVP_FD_TOL),
            CheckItem::new("jvp_linearity", jvp_linearity_gap(seed)?, Below, JVP_LINEARITY_TOL),
            CheckItem::new("forward_reverse_consistency", forward_reverse_gap(seed)?, Below, FORWARD_REVERSE_TOL),
        ],
        Suite::Grad => vec![
            CheckItem::new("tfm_grad_vs_finite_difference", tfm_grad_fd_error(seed)?, Below, TFM_GRAD_TOL),
            CheckItem::new("fm_grad_vs_finite_difference", fm_grad_fd_error(seed)?, Below, FM_GRAD_TOL),
        ],
        Suite::Theorem2 => vec![
            CheckItem::new("single_atom_cosine_gap", (single_atom_cosine(seed)? - 1.0).abs(), Below, SINGLE_ATOM_TOL),
            CheckItem::new("two_atom_cosine", two_atom_cosine(TWO_ATOM_SAMPLES, seed)?, Above, TWO_ATOM_MIN_COSINE),
        ],
        Suite::Identity => {
            let coupling = demo_coupling();
            let untrained = TfmModel::new(grad_check_config(), false, &mut stream(seed, 20))?;
            let cells = fixed_pair_sweep(&untrained, &coupling)?;
            let (model, _) = overfit_fixed_pair(&coupling, OVERFIT_STEPS, seed)?;
            let trained = fixed_pair_sweep(&model, &coupling)?;
            vec![
                CheckItem::new("boundary_rows_max_residual", boundary_max(&cells), Exactly, 0.0),
                CheckItem::new("untrained_mean_residual", mean_residual(&cells), Above, 0.0),
                CheckItem::new("overfit_mean_residual", mean_residual(&trained), Below, OVERFIT_RESIDUAL_TOL),
                CheckItem::new("overfit_boundary_max_residual", boundary_max(&trained), Exactly, 0.0),
            ]
        }
        Suite::Sampler => {
            let s = sampler_gaps(seed)?;
            let (err, ratio) = rk4_gaussian(100)?;
            vec![
                CheckItem::new("one_step_vs_grid_0_1", s.one_step_vs_grid, Exactly, 0.0),
                CheckItem::new("call_count_gap", s.call_count_gap, Exactly, 0.0),
                CheckItem::new("rerun_gap", s.rerun_gap, Exactly, 0.0),
                CheckItem::new("unit_guidance_vs_conditional", s.unit_guidance_gap, Exactly, 0.0),
                CheckItem::new("rk4_gaussian_flow_map_error", err, Below, RK4_TOL),
                CheckItem::new("rk4_halving_ratio_gap", (ratio - 16.0).abs(), Below, 2.0),
            ]
        }
    };
    let passed = items.iter().all(|i| i.passed);
    Ok(CheckReport { suite, seed, passed, items })
}

/// Small transition network with a random architecture and nonzero
/// output layer.
pub fn random_tfm_model<R: Rng + ?Sized>(rng: &mut R, param_mode: ParamMode) -> Result<TfmModel> {
    let depth = rng.gen_range(1..=3);
    let cfg = TfmConfig {
        data_dim: rng.gen_range(1..=3),
        hidden_sizes: (0..depth).map(|_| rng.gen_range(4..=24)).collect(),
        activation: *[Activation::Tanh, Activation::Silu].choose(rng).expect("nonempty"),
        time_embed: TimeEmbedConfig { dim: *[4, 8].choose(rng).expect("nonempty"), max_period: 1e4 },
        cond_mode: *[ConditioningMode::TR, ConditioningMode::TDt, ConditioningMode::TRDt, ConditioningMode::DtOnly]
            .choose(rng)
            .expect("nonempty"),
        param_mode,
        n_classes: 0,
    };
    TfmModel::new(cfg, false, rng)
}

fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Inputs with `0.1 <= t <= 0.4 < 0.6 <= r <= 0.9`.
fn random_inputs<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let t = (0..n).map(|_| rng.gen_range(0.1..0.4)).collect();
    let r = (0..n).map(|_| rng.gen_range(0.6..0.9)).collect();
    Ok((normal(rng, &[n, d])?, Tensor::vector(t), Tensor::vector(r)))
}

/// Worst entrywise relative gap between the JVP and a central difference
/// over `models` random networks and tangents.
pub fn jvp_fd_error(models: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, 10);
    let mut worst: f64 = 0.0;
    for k in 0..models {
        let mode = if k % 2 == 0 { ParamMode::Residual } else { ParamMode::Direct };
        let model = random_tfm_model(&mut rng, mode)?;
        let n = 4;
        let (x, t, r) = random_inputs(&mut rng, n, model.data_dim())?;
        let (tx, tt, tr) =
            (normal(&mut rng, &[n, model.data_dim()])?, normal(&mut rng, &[n])?, normal(&mut rng, &[n])?);
        let bound = model.bind(None, n)?;
        let err = autodiff::check_jvp_fd(
            &bound,
            model.params().tensors(),
            Point::new(&x, &t, &r),
            Point::new(&tx, &tt, &tr),
            JVP_FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// `max |J(a u + b w) - a J u - b J w| / (1 + max |J u|, |J w|)`.
pub fn jvp_linearity_gap(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, 11);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let model = random_tfm_model(&mut rng, ParamMode::Residual)?;
        let (n, d) = (3, model.data_dim());
        let (x, t, r) = random_inputs(&mut rng, n, d)?;
        let at = Point::new(&x, &t, &r);
        let u = (normal(&mut rng, &[n, d])?, normal(&mut rng, &[n])?, normal(&mut rng, &[n])?);
        let w = (normal(&mut rng, &[n, d])?, normal(&mut rng, &[n])?, normal(&mut rng, &[n])?);
        let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mix = |p: &Tensor, q: &Tensor| p.zip_map(q, |p, q| a * p + b * q);
        let m = (mix(&u.0, &w.0)?, mix(&u.1, &w.1)?, mix(&u.2, &w.2)?);
        let (_, ju) = model.jvp(at, Point::new(&u.0, &u.1, &u.2), None)?;
        let (_, jw) = model.jvp(at, Point::new(&w.0, &w.1, &w.2), None)?;
        let (_, jm) = model.jvp(at, Point::new(&m.0, &m.1, &m.2), None)?;
        let scale = 1.0 + ju.max_abs().max(jw.max_abs());
        let combo = mix(&ju, &jw)?;
        worst = worst.max(jm.sub(&combo)?.max_abs() / scale);
    }
    Ok(worst)
}

/// For `g = sum(c * X)`, relative gap between `<grad g, u>` from the tape
/// and `<c, J u>` from the JVP.
pub fn forward_reverse_gap(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, 12);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let model = random_tfm_model(&mut rng, ParamMode::Residual)?;
        let (n, d) = (3, model.data_dim());
        let (x, t, r) = random_inputs(&mut rng, n, d)?;
        let c = normal(&mut rng, &[n, d])?;
        let u = (normal(&mut rng, &[n, d])?, normal(&mut rng, &[n])?, normal(&mut rng, &[n])?);
        let inputs =
            Params::from_entries(vec![("x".into(), x.clone()), ("t".into(), t.clone()), ("r".into(), r.clone())])?;
        let (_, g) = autodiff::grad(
            |tape, leaves| {
                let weights: Vec<_> = model.params().tensors().iter().map(|p| tape.leaf(p.clone(), false)).collect();
                let out = model.apply(tape, &weights, &leaves[0], &leaves[1], &leaves[2], None)?;
                let cv = tape.leaf(c.clone(), false);
                let prod = tape.mul(&out, &cv)?;
                Ok(tape.sum(&prod))
            },
            &inputs,
        )?;
        let mut reverse = 0.0;
        for (u, g) in [&u.0, &u.1, &u.2].into_iter().zip(g.tensors()) {
            reverse += u.dot(g)?;
        }
        let (_, ju) = model.jvp(Point::new(&x, &t, &r), Point::new(&u.0, &u.1, &u.2), None)?;
        let forward = c.dot(&ju)?;
        worst = worst.max((reverse - forward).abs() / (1.0 + forward.abs()));
    }
    Ok(worst)
}

fn stencil(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(-2.0 * h)? - 8.0 * f(-h)? + 8.0 * f(h)? - f(2.0 * h)?) / (12.0 * h))
}

/// Worst `|g - fd| / (|fd| + 1e-8)` over all parameter entries, where `fd`
/// differentiates `objective` after nudging one entry.
fn param_fd_error(params: &Params, grads: &Params, objective: impl Fn(&Params) -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (k, g) in grads.tensors().iter().enumerate() {
        for j in 0..g.len() {
            let fd = stencil(
                |h| {
                    let mut p = params.clone();
                    p.tensors_mut()[k].data_mut()[j] += h;
                    objective(&p)
                },
                GRAD_FD_STEP,
            )?;
            worst = worst.max((g.data()[j] - fd).abs() / (fd.abs() + 1e-8));
        }
    }
    Ok(worst)
}

/// The 2-16-16-2 network used for gradient checks.
pub fn grad_check_config() -> TfmConfig {
    TfmConfig {
        data_dim: 2,
        hidden_sizes: vec![16, 16],
        activation: Activation::Silu,
        time_embed: TimeEmbedConfig { dim: 4, max_period: 1e4 },
        cond_mode: ConditioningMode::TDt,
        param_mode: ParamMode::Residual,
        n_classes: 0,
    }
}

fn random_batch<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<CouplingBatch> {
    Ok(CouplingBatch { x0: normal(rng, &[n, 2])?, x1: normal(rng, &[n, 2])?.scale(2.0), labels: vec![None; n] })
}

/// Gradient check of the weighted transition objective with its target
/// and weights frozen.
pub fn tfm_grad_fd_error(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, 13);
    let model = TfmModel::new(grad_check_config(), false, &mut rng)?;
    let batch = random_batch(&mut rng, 8)?;
    let pairs: Vec<TimePair> = (0..8).map(|_| sample_time_pair(&TimeSamplerConfig::default(), &mut rng)).collect();
    let cfg = LossConfig::default();
    let targets = tfm_targets(&model, &batch, &pairs, None)?;
    let weights = tfm_weights(&model, &targets, &cfg)?;
    let (_, grads) = tfm_regress(&model, &targets, &cfg)?;
    param_fd_error(model.params(), &grads, |p| {
        let m = TfmModel::from_params(model.config().clone(), p.clone())?;
        frozen_tfm_objective(&m, &targets, &weights)
    })
}

pub fn fm_grad_fd_error(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, 14);
    let model = FmModel::new(FmConfig::matching(&grad_check_config()), false, &mut rng)?;
    let batch = random_batch(&mut rng, 8)?;
    let times: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
    let cfg = LossConfig::plain();
    let targets = fm_targets(&batch, &times, None)?;
    let (_, grads) = fm_regress(&model, &targets, &cfg)?;
    param_fd_error(model.params(), &grads, |p| {
        let m = FmModel::from_params(model.config().clone(), p.clone())?;
        frozen_fm_objective(&m, &targets, &[1.0; 8])
    })
}

fn equivalence_model(seed: u64) -> Result<TfmModel> {
    let cfg = TfmConfig {
        hidden_sizes: vec![32, 32],
        time_embed: TimeEmbedConfig { dim: 8, max_period: 1e4 },
        ..grad_check_config()
    };
    TfmModel::new(cfg, false, &mut stream(seed, 15))
}

/// Conditional vs marginal gradient cosine for a one-atom target.
pub fn single_atom_cosine(seed: u64) -> Result<f64> {
    let tgt = AtomTarget::uniform(Tensor::matrix(1, 2, vec![0.7, -1.2])?)?;
    grad_equivalence_check(&equivalence_model(seed)?, &tgt, 3000, &TimeSamplerConfig::default(), &mut stream(seed, 16))
}

/// The same cosine for two atoms, estimated from `n` shared draws.
pub fn two_atom_cosine(n: usize, seed: u64) -> Result<f64> {
    let tgt = AtomTarget::uniform(Tensor::matrix(2, 2, vec![-1.0, 0.5, 1.0, -0.5])?)?;
    grad_equivalence_check(&equivalence_model(seed)?, &tgt, n, &TimeSamplerConfig::default(), &mut stream(seed, 17))
}

pub fn demo_coupling() -> FixedCoupling {
    FixedCoupling::new(Tensor::vector(vec![-0.8, 0.3]), Tensor::vector(vec![1.1, 0.9])).expect("matching shapes")
}

pub fn cosine_lr(peak: f64, step: usize, steps: usize) -> f64 {
    0.5 * peak * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
}

/// Trains a small residual network on one coupling with unweighted loss
/// and a cosine-decayed learning rate. Returns the model and the last
/// batch loss.
pub fn overfit_fixed_pair(coupling: &FixedCoupling, steps: usize, seed: u64) -> Result<(TfmModel, f64)> {
    let d = coupling.x0.len();
    let cfg = TfmConfig {
        data_dim: d,
        hidden_sizes: vec![64, 64],
        time_embed: TimeEmbedConfig { dim: 8, max_period: 1e4 },
        ..grad_check_config()
    };
    let mut rng = stream(seed, 18);
    let mut model = TfmModel::new(cfg, true, &mut rng)?;
    let mut adam = Adam::new(AdamConfig::default(), model.params());
    let batch = 32;
    let rep = |v: &Tensor| Tensor::new(vec![batch, d], v.data().repeat(batch));
    let pair = CouplingBatch { x0: rep(&coupling.x0)?, x1: rep(&coupling.x1)?, labels: vec![None; batch] };
    let sampler = TimeSamplerConfig::uniform();
    let loss = LossConfig::plain();
    let mut last = f64::NAN;
    for k in 0..steps {
        let pairs: Vec<TimePair> = (0..batch).map(|_| sample_time_pair(&sampler, &mut rng)).collect();
        let targets = tfm_targets(&model, &pair, &pairs, None)?;
        let (report, grads) = tfm_regress(&model, &targets, &loss)?;
        adam.update_with_lr(model.params_mut(), &grads, cosine_lr(OVERFIT_LR, k, steps))?;
        last = report.raw_mse;
    }
    Ok((model, last))
}

/// 10 x 10 residual sweep at the single coupling's own path.
pub fn fixed_pair_sweep(model: &TfmModel, coupling: &FixedCoupling) -> Result<Vec<SweepCell>> {
    let samples = CouplingBatch {
        x0: coupling.x0.clone().reshape(vec![1, coupling.x0.len()])?,
        x1: coupling.x1.clone().reshape(vec![1, coupling.x1.len()])?,
        labels: vec![None],
    };
    residual_sweep(model, coupling, &sweep_grid(10, 10)?, &samples)
}

pub fn mean_residual(cells: &[SweepCell]) -> f64 {
    cells.iter().map(|c| c.residual_cond).sum::<f64>() / cells.len() as f64
}

/// Largest residual over cells with `r == t`.
pub fn boundary_max(cells: &[SweepCell]) -> f64 {
    cells.iter().filter(|c| c.r == c.t).map(|c| c.residual_cond).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerGaps {
    pub one_step_vs_grid: f64,
    pub call_count_gap: f64,
    pub rerun_gap: f64,
    pub unit_guidance_gap: f64,
}

pub fn sampler_gaps(seed: u64) -> Result<SamplerGaps> {
    let mut rng = stream(seed, 19);
    let cfg = TfmConfig { n_classes: 3, ..grad_check_config() };
    let model = TfmModel::new(cfg, false, &mut rng)?;
    let x0 = normal(&mut rng, &[64, 2])?;
    let one = sample_onestep(&model, &x0, None, None)?;
    let (grid01, _) = sample_multistep(&model, &x0, &TimeGrid::parse("0,1")?, None, None)?;
    let counting = CountingModel::new(&model);
    let grid = TimeGrid::uniform(5)?;
    let (first, _) = sample_multistep(&counting, &x0, &grid, None, None)?;
    let (second, _) = sample_multistep(&model, &x0, &grid, None, None)?;
    let classes: Vec<usize> = (0..64).map(|i| i % 3).collect();
    let (guided, _) = sample_multistep(&model, &x0, &grid, Some(&classes), Some(1.0))?;
    let (plain, _) = sample_multistep(&model, &x0, &grid, Some(&classes), None)?;
    Ok(SamplerGaps {
        one_step_vs_grid: one.sub(&grid01)?.max_abs(),
        call_count_gap: (counting.calls() as f64 - grid.intervals() as f64).abs(),
        rerun_gap: first.sub(&second)?.max_abs(),
        unit_guidance_gap: guided.sub(&plain)?.max_abs(),
    })
}

/// RK4 on the standard Gaussian marginal velocity from `t = 0` to `0.5`
/// at `x = 1`: the error against 0.70711 with `n` steps, and the ratio of
/// errors against `1/sqrt(2)` at 10 and 20 steps.
pub fn rk4_gaussian(n: usize) -> Result<(f64, f64)> {
    let gp = GaussianPair::standard(1);
    let field = |x: &Tensor, t: f64| gaussian_marginal_velocity(x, t, &gp);
    let x = Tensor::vector(vec![1.0]);
    let at = |steps| -> Result<f64> { Ok(integrate_flow_map(&field, &x, 0.0, 0.5, steps)?.data()[0]) };
    let exact = std::f64::consts::FRAC_1_SQRT_2;
    let ratio = (at(10)? - exact).abs() / (at(20)? - exact).abs();
    Ok(((at(n)? - RK4_EXPECTED).abs(), ratio))
}
