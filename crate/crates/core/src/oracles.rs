//! Ground-truth marginal quantities for targets where the posterior over
//! endpoints is tractable, plus a fixed-step RK4 flow map and the
//! conditional/marginal gradient comparison.
//!
//! Two notions of "marginal transition" appear here. [`Oracle::transition`]
//! is the posterior mean of the conditional transition state,
//! `E[(1 - r) X0 + r X1 | X_t = x]`, which is what the training target
//! regresses to. [`Oracle::flow_map`] integrates the marginal velocity ODE.
//! They differ in general (they agree for a single coupling).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};

use crate::autodiff::{self, Algebra};
use crate::error::{Result, TfmError};
use crate::flowcore::{interpolate_rows, sample_time_pair, Schedule, TimeSamplerConfig, VelocityField};
use crate::nets::{class_rows, TfmModel};
use crate::params::Params;
use crate::tensor::Tensor;

/// Finite mixture of point masses with a standard Gaussian source.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomTarget {
    atoms: Tensor,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl AtomTarget {
    /// `atoms` has shape `[k, d]`.
    pub fn new(atoms: Tensor, weights: Vec<f64>) -> Result<Self> {
        if atoms.rank() != 2 || atoms.rows() == 0 {
            return Err(TfmError::Precondition("atom target needs a nonempty [k, d] atom matrix".into()));
        }
        if weights.len() != atoms.rows() {
            return Err(TfmError::Shape(format!("{} weights for {} atoms", weights.len(), atoms.rows())));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(TfmError::Precondition("atom weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TfmError::Precondition(format!("atom weights sum to {total}")));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { atoms, weights, log_weights })
    }

    pub fn uniform(atoms: Tensor) -> Result<Self> {
        let k = atoms.rows();
        if k == 0 {
            return Err(TfmError::Precondition("atom target needs at least one atom".into()));
        }
        let mut weights = vec![1.0 / k as f64; k];
        // absorb rounding so the sum is exact enough
        let drift: f64 = 1.0 - weights.iter().sum::<f64>();
        weights[0] += drift;
        Self::new(atoms, weights)
    }

    pub fn atoms(&self) -> &Tensor {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.atoms.cols()
    }

    /// Draws `(x0, x1)` from the independent coupling.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let x0 = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        let j = WeightedIndex::new(&self.weights).expect("validated weights").sample(rng);
        (x0, self.atoms.row(j).to_vec())
    }

    /// `p(atom j | X_t = x)`, normalized in log space.
    pub fn posterior_weights(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_time(t)?;
        if x.len() != self.dim() {
            return Err(TfmError::Shape(format!("point of dim {} for {}-dim atoms", x.len(), self.dim())));
        }
        let denom = 2.0 * (1.0 - t) * (1.0 - t);
        let logits: Vec<f64> = (0..self.atoms.rows())
            .map(|j| {
                let sq: f64 = x.iter().zip(self.atoms.row(j)).map(|(xi, a)| (xi - t * a).powi(2)).sum();
                self.log_weights[j] - sq / denom
            })
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= z);
        Ok(w)
    }

    /// Posterior average of `alpha * x0_j(x) + beta * a_j` for each row.
    fn posterior_combination(&self, x: &Tensor, t: f64, alpha: f64, beta: f64) -> Result<Tensor> {
        check_rows(x, self.dim())?;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.rows() {
            let xi = x.row(i);
            let w = self.posterior_weights(xi, t)?;
            let o = out.row_mut(i);
            for (j, &wj) in w.iter().enumerate() {
                if wj == 0.0 {
                    continue;
                }
                for ((o, &xv), &a) in o.iter_mut().zip(xi).zip(self.atoms.row(j)) {
                    let x0 = (xv - t * a) / (1.0 - t);
                    *o += wj * (alpha * x0 + beta * a);
                }
            }
        }
        Ok(out)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(TfmError::Precondition(format!("oracle time t = {t} must lie in [0, 1)")));
    }
    Ok(())
}

fn check_rows(x: &Tensor, d: usize) -> Result<()> {
    if x.rank() != 2 || x.cols() != d {
        return Err(TfmError::Shape(format!("batch {:?} for dimension {d}", x.shape())));
    }
    Ok(())
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        1 => x.clone().reshape(vec![1, x.len()]),
        2 => Ok(x.clone()),
        _ => Err(TfmError::Shape(format!("expected a point or batch, got {:?}", x.shape()))),
    }
}

fn like_input(out: Tensor, x: &Tensor) -> Result<Tensor> {
    out.reshape(x.shape().to_vec())
}

/// Posterior mean of `X1 - X0` given `X_t = x`. `x` is `[d]` or `[n, d]`.
pub fn marginal_velocity_atoms(x: &Tensor, t: f64, tgt: &AtomTarget) -> Result<Tensor> {
    let b = as_batch(x)?;
    like_input(tgt.posterior_combination(&b, t, -1.0, 1.0)?, x)
}

/// Posterior mean of the conditional transition state `(1 - r) X0 + r X1`.
pub fn marginal_transition_atoms(x: &Tensor, t: f64, r: f64, tgt: &AtomTarget) -> Result<Tensor> {
    if !(t <= r && r <= 1.0) {
        return Err(TfmError::Precondition(format!("need t <= r <= 1, got t={t}, r={r}")));
    }
    let b = as_batch(x)?;
    like_input(tgt.posterior_combination(&b, t, 1.0 - r, r)?, x)
}

/// `X0 ~ N(0, I)` to `X1 ~ N(m, s^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPair {
    m: Tensor,
    s: f64,
}

impl GaussianPair {
    pub fn new(m: Tensor, s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return Err(TfmError::Precondition(format!("target scale {s} must be positive")));
        }
        if m.rank() != 1 {
            return Err(TfmError::Shape("target mean must be a vector".into()));
        }
        Ok(Self { m, s })
    }

    pub fn standard(d: usize) -> Self {
        Self { m: Tensor::zeros(&[d]), s: 1.0 }
    }

    pub fn mean(&self) -> &Tensor {
        &self.m
    }

    pub fn scale(&self) -> f64 {
        self.s
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Marginal standard deviation of `X_t` per coordinate.
    pub fn std_at(&self, t: f64) -> f64 {
        ((1.0 - t).powi(2) + (t * self.s).powi(2)).sqrt()
    }

    /// Applies `c0 + c1 * (x - t m)` row-wise with `c0 = k * m`.
    fn affine(&self, x: &Tensor, t: f64, k: f64, c1: f64) -> Result<Tensor> {
        let b = as_batch(x)?;
        check_rows(&b, self.dim())?;
        let mut out = b.clone();
        for i in 0..b.rows() {
            for ((o, &xv), &m) in out.row_mut(i).iter_mut().zip(b.row(i)).zip(self.m.data()) {
                *o = k * m + c1 * (xv - t * m);
            }
        }
        like_input(out, x)
    }
}

/// `E[X1 - X0 | X_t = x] = m + (t s^2 - (1 - t)) / s_t^2 * (x - t m)`.
pub fn gaussian_marginal_velocity(x: &Tensor, t: f64, gp: &GaussianPair) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(TfmError::Precondition(format!("t = {t} outside [0, 1]")));
    }
    let var = gp.std_at(t).powi(2);
    gp.affine(x, t, 1.0, (t * gp.s * gp.s - (1.0 - t)) / var)
}

/// Posterior mean of `(1 - r) X0 + r X1` given `X_t = x`.
pub fn gaussian_marginal_transition(x: &Tensor, t: f64, r: f64, gp: &GaussianPair) -> Result<Tensor> {
    if !(0.0 <= t && t <= r && r <= 1.0) {
        return Err(TfmError::Precondition(format!("need 0 <= t <= r <= 1, got t={t}, r={r}")));
    }
    let var = gp.std_at(t).powi(2);
    let gain = ((1.0 - r) * (1.0 - t) + r * t * gp.s * gp.s) / var;
    gp.affine(x, t, r, gain)
}

/// Exact solution of the marginal velocity ODE from `t` to `r`:
/// `r m + (s_r / s_t) (x - t m)`.
pub fn gaussian_flow_map(x: &Tensor, t: f64, r: f64, gp: &GaussianPair) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&r) {
        return Err(TfmError::Precondition(format!("times t={t}, r={r} outside [0, 1]")));
    }
    gp.affine(x, t, r, gp.std_at(r) / gp.std_at(t))
}

/// Classical RK4 with `n_steps` uniform steps from `t` to `r`. `x` is a
/// point `[d]` or a batch `[n, d]`.
pub fn integrate_flow_map<V: VelocityField + ?Sized>(
    v_fn: &V,
    x: &Tensor,
    t: f64,
    r: f64,
    n_steps: usize,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(TfmError::Precondition("n_steps must be at least 1".into()));
    }
    let mut state = as_batch(x)?;
    let h = (r - t) / n_steps as f64;
    for step in 0..n_steps {
        let tau = t + h * step as f64;
        let k1 = v_fn.velocity(&state, tau)?;
        let k2 = v_fn.velocity(&state.axpy(h / 2.0, &k1)?, tau + h / 2.0)?;
        let k3 = v_fn.velocity(&state.axpy(h / 2.0, &k2)?, tau + h / 2.0)?;
        let k4 = v_fn.velocity(&state.axpy(h, &k3)?, tau + h)?;
        let incr = k1.add(&k2.scale(2.0))?.add(&k3.scale(2.0))?.add(&k4)?;
        state = state.axpy(h / 6.0, &incr)?;
        if !state.all_finite() {
            return Err(TfmError::Integration { step });
        }
    }
    like_input(state, x)
}

/// Marginal quantities on `[n, d]` batches.
pub trait Oracle {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
    /// Posterior mean of the conditional transition state.
    fn transition(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor>;
    /// Solution of the marginal velocity ODE.
    fn flow_map(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor>;
}

/// Steps used when an oracle has no closed-form flow map.
pub const ORACLE_RK4_STEPS: usize = 400;

impl Oracle for AtomTarget {
    fn dim(&self) -> usize {
        AtomTarget::dim(self)
    }

    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        marginal_velocity_atoms(x, t, self)
    }

    fn transition(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor> {
        marginal_transition_atoms(x, t, r, self)
    }

    /// Undefined at `r = 1`, where the velocity is singular.
    fn flow_map(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor> {
        check_time(r)?;
        let field = |x: &Tensor, tau: f64| marginal_velocity_atoms(x, tau, self);
        integrate_flow_map(&field, x, t, r, ORACLE_RK4_STEPS)
    }
}

impl Oracle for GaussianPair {
    fn dim(&self) -> usize {
        GaussianPair::dim(self)
    }

    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        gaussian_marginal_velocity(x, t, self)
    }

    fn transition(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor> {
        gaussian_marginal_transition(x, t, r, self)
    }

    fn flow_map(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor> {
        gaussian_flow_map(x, t, r, self)
    }
}

/// A single deterministic coupling `(x0, x1)`. Quantities are exact on the
/// segment between the endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedCoupling {
    pub x0: Tensor,
    pub x1: Tensor,
}

impl FixedCoupling {
    pub fn new(x0: Tensor, x1: Tensor) -> Result<Self> {
        x0.ensure_same_shape(&x1, "coupling endpoints")?;
        if x0.rank() != 1 {
            return Err(TfmError::Shape("coupling endpoints must be vectors".into()));
        }
        Ok(Self { x0, x1 })
    }

    /// Points `x_t` on the segment, one row per time.
    pub fn path(&self, times: &[f64]) -> Result<Tensor> {
        let n = times.len();
        let d = self.x0.len();
        let rep = |v: &Tensor| Tensor::new(vec![n, d], v.data().repeat(n));
        interpolate_rows(&rep(&self.x0)?, &rep(&self.x1)?, times, &Schedule::linear())
    }

    fn drift(&self, x: &Tensor, span: f64) -> Result<Tensor> {
        check_rows(x, self.x0.len())?;
        let v = self.x1.sub(&self.x0)?;
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (o, &vj) in out.row_mut(i).iter_mut().zip(v.data()) {
                *o += span * vj;
            }
        }
        Ok(out)
    }
}

impl Oracle for FixedCoupling {
    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn velocity(&self, x: &Tensor, _t: f64) -> Result<Tensor> {
        let zero = Tensor::zeros(x.shape());
        self.drift(&zero, 1.0)
    }

    fn transition(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor> {
        self.drift(x, r - t)
    }

    fn flow_map(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor> {
        self.drift(x, r - t)
    }
}

/// Cosine of two flattened gradients.
pub fn gradient_cosine(a: &Params, b: &Params) -> Result<f64> {
    a.ensure_compatible(b)?;
    let (a, b) = (a.flatten(), b.flatten());
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(TfmError::UndefinedCosine(format!("gradient norms {na:e} and {nb:e}")));
    }
    Ok(dot / (na * nb))
}

/// Samples evaluated per reverse pass in [`grad_equivalence_check`].
const EQUIVALENCE_CHUNK: usize = 2000;

/// Gradients of the conditional and marginal unweighted objectives over one
/// shared stream of `(x0, x1, t, r)` draws.
pub fn grad_equivalence_gradients<R: Rng + ?Sized>(
    model: &TfmModel,
    tgt: &AtomTarget,
    n_samples: usize,
    pair_cfg: &TimeSamplerConfig,
    rng: &mut R,
) -> Result<(Params, Params)> {
    if n_samples == 0 {
        return Err(TfmError::Precondition("n_samples must be positive".into()));
    }
    if model.data_dim() != tgt.dim() {
        return Err(TfmError::Shape(format!("model dim {} vs target dim {}", model.data_dim(), tgt.dim())));
    }
    let d = tgt.dim();
    let mut g_cond = model.params().zeros_like();
    let mut g_marg = model.params().zeros_like();
    let mut done = 0;
    while done < n_samples {
        let n = EQUIVALENCE_CHUNK.min(n_samples - done);
        let (mut x0, mut x1, mut t, mut r) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let (a, b) = tgt.sample_pair(rng);
            x0.extend(a);
            x1.extend(b);
            let mut pair = sample_time_pair(pair_cfg, rng);
            while pair.t() >= 1.0 {
                pair = sample_time_pair(pair_cfg, rng);
            }
            t.push(pair.t());
            r.push(pair.r());
        }
        let x0 = Tensor::new(vec![n, d], x0)?;
        let x1 = Tensor::new(vec![n, d], x1)?;
        let lin = Schedule::linear();
        let x_t = interpolate_rows(&x0, &x1, &t, &lin)?;
        let span: Vec<f64> = t.iter().zip(&r).map(|(t, r)| r - t).collect();

        let cond_v = x1.sub(&x0)?;
        let cond_tr = interpolate_rows(&x0, &x1, &r, &lin)?;
        let mut marg_v = Tensor::zeros(&[n, d]);
        let mut marg_tr = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = Tensor::new(vec![1, d], x_t.row(i).to_vec())?;
            marg_v.row_mut(i).copy_from_slice(marginal_velocity_atoms(&row, t[i], tgt)?.data());
            marg_tr.row_mut(i).copy_from_slice(marginal_transition_atoms(&row, t[i], r[i], tgt)?.data());
        }

        let weight = n as f64 / n_samples as f64;
        for (velocity, transition, acc) in [(&cond_v, &cond_tr, &mut g_cond), (&marg_v, &marg_tr, &mut g_marg)] {
            let (_, dx_dt) = model.forward_jvp(&x_t, &t, &r, velocity, None)?;
            let target = transition.add(&dx_dt.scale_rows(&span)?)?;
            let g = plain_regression_grad(model, &x_t, &t, &r, &target)?;
            for (a, b) in acc.tensors_mut().iter_mut().zip(g.tensors()) {
                a.add_assign_scaled(weight, b)?;
            }
        }
        done += n;
    }
    Ok((g_cond, g_marg))
}

/// `cos(g_cond, g_marg)` under the unweighted squared loss.
pub fn grad_equivalence_check<R: Rng + ?Sized>(
    model: &TfmModel,
    tgt: &AtomTarget,
    n_samples: usize,
    pair_cfg: &TimeSamplerConfig,
    rng: &mut R,
) -> Result<f64> {
    let (g_cond, g_marg) = grad_equivalence_gradients(model, tgt, n_samples, pair_cfg, rng)?;
    gradient_cosine(&g_cond, &g_marg)
}

/// Gradient of `mean_i |X_i - target_i|^2` with the null class.
fn plain_regression_grad(model: &TfmModel, x: &Tensor, t: &[f64], r: &[f64], target: &Tensor) -> Result<Params> {
    let rows = class_rows(model.n_classes(), None, x.rows())?;
    let (_, g) = autodiff::grad(
        |tape, leaves| {
            let xv = tape.constant(x.clone());
            let tv = tape.constant(Tensor::vector(t.to_vec()));
            let rv = tape.constant(Tensor::vector(r.to_vec()));
            let out = model.apply(tape, leaves, &xv, &tv, &rv, rows.as_deref())?;
            let tgt = tape.constant(target.clone());
            let diff = tape.sub(&out, &tgt)?;
            let sq = tape.square(&diff);
            let per = tape.sum_cols(&sq)?;
            Ok(tape.mean(&per))
        },
        model.params(),
    )?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pm1() -> AtomTarget {
        AtomTarget::uniform(Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap()).unwrap()
    }

    fn v1(x: f64) -> Tensor {
        Tensor::vector(vec![x])
    }

    #[test]
    fn weights_are_validated() {
        let atoms = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(AtomTarget::new(atoms.clone(), vec![0.5, 0.6]).is_err());
        assert!(AtomTarget::new(atoms.clone(), vec![1.5, -0.5]).is_err());
        assert!(AtomTarget::new(atoms, vec![1.0]).is_err());
        assert!(AtomTarget::uniform(Tensor::zeros(&[0, 1])).is_err());
    }

    #[test]
    fn single_atom_velocity_recovers_source_point() {
        let a = [0.7, -1.2];
        let tgt = AtomTarget::uniform(Tensor::matrix(1, 2, a.to_vec()).unwrap()).unwrap();
        let (x, t) = ([0.3, 0.4], 0.35);
        let got = marginal_velocity_atoms(&Tensor::vector(x.to_vec()), t, &tgt).unwrap();
        for k in 0..2 {
            let want = a[k] - (x[k] - t * a[k]) / (1.0 - t);
            assert!((got.data()[k] - want).abs() < 1e-14);
        }
        let r = 0.8;
        let tr = marginal_transition_atoms(&Tensor::vector(x.to_vec()), t, r, &tgt).unwrap();
        for k in 0..2 {
            let x0 = (x[k] - t * a[k]) / (1.0 - t);
            assert!((tr.data()[k] - ((1.0 - r) * x0 + r * a[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn two_atoms_at_time_zero_use_the_prior() {
        let v = marginal_velocity_atoms(&v1(0.5), 0.0, &pm1()).unwrap();
        assert!((v.data()[0] + 0.5).abs() < 1e-15);
        for x in [-3.0, 0.0, 2.5] {
            let tr = marginal_transition_atoms(&v1(x), 0.0, 1.0, &pm1()).unwrap();
            assert!(tr.data()[0].abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_atoms_give_zero_at_origin() {
        for t in [0.0, 0.3, 0.9, 0.999] {
            assert!(marginal_velocity_atoms(&v1(0.0), t, &pm1()).unwrap().data()[0].abs() < 1e-12);
        }
    }

    #[test]
    fn transition_at_zero_span_is_identity() {
        for t in [0.0, 0.4, 0.95] {
            let tr = marginal_transition_atoms(&v1(0.37), t, t, &pm1()).unwrap();
            assert!((tr.data()[0] - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn time_one_is_rejected() {
        assert!(marginal_velocity_atoms(&v1(0.0), 1.0, &pm1()).is_err());
        assert!(marginal_transition_atoms(&v1(0.0), 1.0, 1.0, &pm1()).is_err());
    }

    #[test]
    fn posterior_is_normalized_near_one() {
        let tgt = pm1();
        for t in [0.0, 0.5, 0.99, 0.999999] {
            for x in [-5.0, 0.1, 3.0] {
                let w = tgt.posterior_weights(&[x], t).unwrap();
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_closed_form_examples() {
        let gp = GaussianPair::standard(1);
        for x in [-2.0, 0.3, 4.0] {
            assert_eq!(gaussian_marginal_velocity(&v1(x), 0.5, &gp).unwrap().data()[0], 0.0);
        }
        let v = gaussian_marginal_velocity(&v1(1.0), 0.0, &gp).unwrap();
        assert!((v.data()[0] + 1.0).abs() < 1e-15);
        // conditional expectation at t = 0, r = 0.5 is 0.5 x; the flow map is x / sqrt(2)
        let tr = gaussian_marginal_transition(&v1(1.0), 0.0, 0.5, &gp).unwrap();
        assert!((tr.data()[0] - 0.5).abs() < 1e-15);
        let fm = gaussian_flow_map(&v1(1.0), 0.0, 0.5, &gp).unwrap();
        assert!((fm.data()[0] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn shifted_gaussian_velocity_matches_conditioning() {
        // brute-force regression of X1 - X0 on X_t for m = 1.5, s = 0.5
        let gp = GaussianPair::new(Tensor::vector(vec![1.5]), 0.5).unwrap();
        let t = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let (mut sx, mut sv, mut sxx, mut sxv) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x0: f64 = StandardNormal.sample(&mut rng);
            let g: f64 = StandardNormal.sample(&mut rng);
            let x1 = 1.5 + 0.5 * g;
            let (xt, v) = ((1.0 - t) * x0 + t * x1, x1 - x0);
            sx += xt;
            sv += v;
            sxx += xt * xt;
            sxv += xt * v;
        }
        let nf = n as f64;
        let slope = (sxv / nf - sx * sv / nf / nf) / (sxx / nf - (sx / nf).powi(2));
        let icpt = sv / nf - slope * sx / nf;
        for x in [-1.0, 0.5, 2.0] {
            let want = icpt + slope * x;
            let got = gaussian_marginal_velocity(&v1(x), t, &gp).unwrap().data()[0];
            assert!((got - want).abs() < 2e-2, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn rk4_examples() {
        let zero = |x: &Tensor, _t: f64| Ok(Tensor::zeros(x.shape()));
        let x = Tensor::vector(vec![1.0, -2.0]);
        assert_eq!(integrate_flow_map(&zero, &x, 0.1, 0.9, 10).unwrap(), x);
        let gp = GaussianPair::standard(1);
        let field = |x: &Tensor, t: f64| gaussian_marginal_velocity(x, t, &gp);
        assert_eq!(integrate_flow_map(&field, &v1(0.8), 0.3, 0.3, 5).unwrap().data(), &[0.8]);
        let out = integrate_flow_map(&field, &v1(1.0), 0.0, 0.5, 100).unwrap();
        assert!((out.data()[0] - crate::checks::RK4_EXPECTED).abs() < 1e-5);
        assert!(integrate_flow_map(&field, &v1(1.0), 0.0, 0.5, 0).is_err());
    }

    #[test]
    fn rk4_reports_blowup_step() {
        let explode = |x: &Tensor, _t: f64| Ok(x.map(|v| v * 1e200));
        match integrate_flow_map(&explode, &v1(1.0), 0.0, 1.0, 4) {
            Err(TfmError::Integration { step }) => assert!(step < 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_atom_gradients_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = crate::nets::TfmConfig {
            hidden_sizes: vec![16, 16],
            time_embed: crate::nets::TimeEmbedConfig { dim: 8, max_period: 1e4 },
            param_mode: crate::nets::ParamMode::Direct,
            ..Default::default()
        };
        let model = TfmModel::new(cfg, false, &mut rng).unwrap();
        let tgt = AtomTarget::uniform(Tensor::matrix(1, 2, vec![1.0, -0.5]).unwrap()).unwrap();
        let cos = grad_equivalence_check(&model, &tgt, 3000, &TimeSamplerConfig::default(), &mut rng).unwrap();
        assert!((cos - 1.0).abs() < 1e-12, "cosine {cos}");
    }

    #[test]
    fn zero_gradient_cosine_is_undefined() {
        let p = Params::from_entries(vec![("w".into(), Tensor::vector(vec![0.0, 0.0]))]).unwrap();
        assert!(matches!(gradient_cosine(&p, &p), Err(TfmError::UndefinedCosine(_))));
    }

    #[test]
    fn fixed_coupling_quantities() {
        let fc = FixedCoupling::new(Tensor::vector(vec![1.0, 0.0]), Tensor::vector(vec![-1.0, 2.0])).unwrap();
        let path = fc.path(&[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(path.row(1), &[0.0, 1.0]);
        let tr = fc.transition(&path, 0.5, 0.75).unwrap();
        assert_eq!(tr.row(1), &[-0.5, 1.5]);
        assert_eq!(fc.velocity(&path, 0.2).unwrap().row(2), &[-2.0, 2.0]);
    }
}
