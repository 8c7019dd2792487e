//! Interpolants, conditional velocities and transition states, time-pair
//! sampling, and the average-velocity view of a transition.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TfmError};
use crate::nets::Label;
use crate::tensor::Tensor;

/// `X_t = alpha(t) X_0 + beta(t) X_1` with derivatives.
#[derive(Clone, Copy)]
pub struct Schedule {
    name: &'static str,
    alpha: fn(f64) -> f64,
    beta: fn(f64) -> f64,
    alpha_dot: fn(f64) -> f64,
    beta_dot: fn(f64) -> f64,
}

impl std::fmt::Debug for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Schedule").field("name", &self.name).finish()
    }
}

const BOUNDARY_TOL: f64 = 1e-12;

impl Schedule {
    /// Validates `alpha(0)=1, beta(0)=0, alpha(1)=0, beta(1)=1`.
    pub fn new(
        name: &'static str,
        alpha: fn(f64) -> f64,
        beta: fn(f64) -> f64,
        alpha_dot: fn(f64) -> f64,
        beta_dot: fn(f64) -> f64,
    ) -> Result<Self> {
        let checks = [(alpha(0.0), 1.0), (beta(0.0), 0.0), (alpha(1.0), 0.0), (beta(1.0), 1.0)];
        if checks.iter().any(|(got, want)| (got - want).abs() > BOUNDARY_TOL) {
            return Err(TfmError::Precondition(format!("schedule `{name}` violates boundary conditions")));
        }
        Ok(Self { name, alpha, beta, alpha_dot, beta_dot })
    }

    pub fn linear() -> Self {
        Self::new("linear", |t| 1.0 - t, |t| t, |_| -1.0, |_| 1.0).expect("linear schedule")
    }

    /// `alpha = cos(pi t / 2)`, `beta = sin(pi t / 2)`.
    pub fn cosine() -> Self {
        use std::f64::consts::FRAC_PI_2;
        Self::new(
            "cosine",
            |t| (FRAC_PI_2 * t).cos(),
            |t| (FRAC_PI_2 * t).sin(),
            |t| -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
            |t| FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
        )
        .expect("cosine schedule")
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn alpha(&self, t: f64) -> f64 {
        (self.alpha)(t)
    }

    pub fn beta(&self, t: f64) -> f64 {
        (self.beta)(t)
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        (self.alpha_dot)(t)
    }

    pub fn beta_dot(&self, t: f64) -> f64 {
        (self.beta_dot)(t)
    }
}

fn unit_interval(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(TfmError::Precondition(format!("{what} = {v} outside [0, 1]")));
    }
    Ok(())
}

fn combine(x0: &Tensor, x1: &Tensor, a: f64, b: f64) -> Result<Tensor> {
    x0.zip_map(x1, |p, q| a * p + b * q)
}

pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64, sched: &Schedule) -> Result<Tensor> {
    unit_interval("t", t)?;
    combine(x0, x1, sched.alpha(t), sched.beta(t))
}

pub fn conditional_velocity(x0: &Tensor, x1: &Tensor, t: f64, sched: &Schedule) -> Result<Tensor> {
    combine(x0, x1, sched.alpha_dot(t), sched.beta_dot(t))
}

/// Conditional state at `r` given the endpoints; independent of the start time.
pub fn conditional_transition(x0: &Tensor, x1: &Tensor, r: f64, sched: &Schedule) -> Result<Tensor> {
    unit_interval("r", r)?;
    combine(x0, x1, sched.alpha(r), sched.beta(r))
}

/// Row-wise interpolation of `[n, d]` endpoint batches with per-row times.
pub fn interpolate_rows(x0: &Tensor, x1: &Tensor, t: &[f64], sched: &Schedule) -> Result<Tensor> {
    x0.ensure_same_shape(x1, "endpoint batches")?;
    if t.len() != x0.rows() {
        return Err(TfmError::Shape(format!("{} times for {} rows", t.len(), x0.rows())));
    }
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        unit_interval("t", ti)?;
        let (a, b) = (sched.alpha(ti), sched.beta(ti));
        for (o, q) in out.row_mut(i).iter_mut().zip(x1.row(i)) {
            *o = a * *o + b * q;
        }
    }
    Ok(out)
}

/// Ordered transition interval `0 <= t <= r <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePair {
    t: f64,
    r: f64,
}

impl TimePair {
    pub fn new(t: f64, r: f64) -> Result<Self> {
        if !(0.0 <= t && t <= r && r <= 1.0) {
            return Err(TfmError::Precondition(format!("need 0 <= t <= r <= 1, got t={t}, r={r}")));
        }
        Ok(Self { t, r })
    }

    /// `r = t + d (1 - t)` for `t, d` in `[0, 1]`.
    pub fn from_offset(t: f64, d: f64) -> Result<Self> {
        unit_interval("t", t)?;
        unit_interval("d", d)?;
        // rounding can push r a hair past 1
        Self::new(t, (t + d * (1.0 - t)).min(1.0))
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn span(&self) -> f64 {
        self.r - self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeSamplerKind {
    #[serde(rename = "UNIFORM")]
    Uniform,
    #[serde(rename = "LOGNORM")]
    LogNorm,
}

/// Distribution of `(t, r)`; `d_mu`/`d_sigma` default to `mu`/`sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSamplerConfig {
    pub kind: TimeSamplerKind,
    pub mu: f64,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_sigma: Option<f64>,
}

impl Default for TimeSamplerConfig {
    fn default() -> Self {
        Self { kind: TimeSamplerKind::LogNorm, mu: -0.4, sigma: 1.0, d_mu: None, d_sigma: None }
    }
}

impl TimeSamplerConfig {
    pub fn uniform() -> Self {
        Self { kind: TimeSamplerKind::Uniform, ..Self::default() }
    }

    pub fn lognorm(mu: f64, sigma: f64) -> Self {
        Self { kind: TimeSamplerKind::LogNorm, mu, sigma, d_mu: None, d_sigma: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == TimeSamplerKind::LogNorm {
            if !(self.sigma > 0.0) {
                return Err(TfmError::config("time_sampler.sigma", "must be positive"));
            }
            if self.d_sigma.is_some_and(|s| !(s > 0.0)) {
                return Err(TfmError::config("time_sampler.d_sigma", "must be positive"));
            }
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, mu: f64, sigma: f64, rng: &mut R) -> f64 {
        match self.kind {
            TimeSamplerKind::Uniform => rng.gen::<f64>(),
            TimeSamplerKind::LogNorm => {
                let g: f64 = StandardNormal.sample(rng);
                logistic(mu + sigma * g)
            }
        }
    }
}

pub fn logistic(v: f64) -> f64 {
    crate::autodiff::kernels::sigmoid(v)
}

pub fn sample_time_pair<R: Rng + ?Sized>(cfg: &TimeSamplerConfig, rng: &mut R) -> TimePair {
    let t = cfg.draw(cfg.mu, cfg.sigma, rng);
    let d = cfg.draw(cfg.d_mu.unwrap_or(cfg.mu), cfg.d_sigma.unwrap_or(cfg.sigma), rng);
    TimePair::from_offset(t, d).expect("sampler draws lie in [0, 1]")
}

/// `u = (X - x_t) / (r - t)`.
#[allow(non_snake_case)]
pub fn u_from_X(x_out: &Tensor, x_t: &Tensor, pair: TimePair) -> Result<Tensor> {
    let span = pair.span();
    if span <= 0.0 {
        return Err(TfmError::Precondition("average velocity is undefined for r == t".into()));
    }
    x_out.zip_map(x_t, |a, b| (a - b) / span)
}

/// One draw from the independent coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub label: Label,
}

impl CouplingSample {
    pub fn new(x0: Tensor, x1: Tensor, label: Label) -> Result<Self> {
        x0.ensure_same_shape(&x1, "coupling endpoints")?;
        Ok(Self { x0, x1, label })
    }
}

/// A list of couplings packed into `[n, d]` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub labels: Vec<Label>,
}

impl CouplingBatch {
    pub fn from_samples(samples: &[CouplingSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| TfmError::Precondition("empty batch".into()))?;
        let d = first.x0.len();
        let mut x0 = Vec::with_capacity(samples.len() * d);
        let mut x1 = Vec::with_capacity(samples.len() * d);
        for s in samples {
            if s.x0.len() != d {
                return Err(TfmError::Shape("ragged coupling batch".into()));
            }
            x0.extend_from_slice(s.x0.data());
            x1.extend_from_slice(s.x1.data());
        }
        let n = samples.len();
        Ok(Self {
            x0: Tensor::new(vec![n, d], x0)?,
            x1: Tensor::new(vec![n, d], x1)?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A time-dependent velocity field evaluated on `[n, d]` batches.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn interpolation_examples() {
        let lin = Schedule::linear();
        assert_eq!(interpolate(&v(&[0., 0.]), &v(&[2., 4.]), 0.5, &lin).unwrap().data(), &[1., 2.]);
        assert_eq!(interpolate(&v(&[4.]), &v(&[0.]), 0.25, &lin).unwrap().data(), &[3.]);
        let (a, b) = (v(&[1.5, -2.]), v(&[0.25, 7.]));
        assert_eq!(interpolate(&a, &b, 0.0, &lin).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0, &lin).unwrap(), b);
        assert!(interpolate(&v(&[1.]), &v(&[1., 2.]), 0.5, &lin).is_err());
    }

    #[test]
    fn velocity_examples() {
        let lin = Schedule::linear();
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(conditional_velocity(&v(&[0., 0.]), &v(&[2., 4.]), t, &lin).unwrap().data(), &[2., 4.]);
        }
        assert_eq!(conditional_velocity(&v(&[3., 1.]), &v(&[3., 1.]), 0.2, &lin).unwrap().data(), &[0., 0.]);
        // d/dt of sin(pi t / 2) at 0 is pi / 2
        let out = conditional_velocity(&v(&[5.0]), &v(&[2.0]), 0.0, &Schedule::cosine()).unwrap();
        assert!((out.data()[0] - std::f64::consts::FRAC_PI_2 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn transition_examples() {
        let lin = Schedule::linear();
        let out = conditional_transition(&v(&[0.]), &v(&[10.]), 0.3, &lin).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-15);
        assert_eq!(conditional_transition(&v(&[0.]), &v(&[10.]), 1.0, &lin).unwrap().data(), &[10.]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (a, b) = (v(&[rng.gen(), rng.gen()]), v(&[rng.gen(), rng.gen()]));
            let r: f64 = rng.gen();
            assert_eq!(conditional_transition(&a, &b, r, &lin).unwrap(), interpolate(&a, &b, r, &lin).unwrap());
        }
    }

    #[test]
    fn schedules_satisfy_boundaries() {
        for s in [Schedule::linear(), Schedule::cosine()] {
            assert!((s.alpha(0.0) - 1.0).abs() <= 1e-12 && s.beta(0.0).abs() <= 1e-12);
            assert!(s.alpha(1.0).abs() <= 1e-12 && (s.beta(1.0) - 1.0).abs() <= 1e-12);
        }
        assert!(Schedule::new("bad", |t| t, |t| t, |_| 1.0, |_| 1.0).is_err());
    }

    #[test]
    fn offset_map() {
        let p = TimePair::from_offset(0.4, 0.0).unwrap();
        assert_eq!(p.r(), p.t());
        let p = TimePair::from_offset(0.5, 0.5).unwrap();
        assert_eq!(p.r(), 0.75);
        assert!(TimePair::new(0.6, 0.5).is_err());
    }

    #[test]
    fn default_sampler_is_lognorm() {
        let c = TimeSamplerConfig::default();
        assert_eq!((c.kind, c.mu, c.sigma), (TimeSamplerKind::LogNorm, -0.4, 1.0));
        assert!(TimeSamplerConfig::lognorm(0.0, 0.0).validate().is_err());
    }

    #[test]
    fn average_velocity_conversion() {
        let p = TimePair::new(0.2, 0.7).unwrap();
        let x = v(&[1.0, -2.0]);
        assert_eq!(u_from_X(&x, &x, p).unwrap().data(), &[0.0, 0.0]);
        let vel = v(&[0.5, 3.0]);
        let moved = x.axpy(p.span(), &vel).unwrap();
        let u = u_from_X(&moved, &x, p).unwrap();
        assert!(u.sub(&vel).unwrap().max_abs() < 1e-12);
        assert!(u_from_X(&x, &x, TimePair::new(0.3, 0.3).unwrap()).is_err());
    }
}
