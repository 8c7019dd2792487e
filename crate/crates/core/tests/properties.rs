use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use tfm_core::checks::{forward_reverse_gap, grad_check_config, jvp_linearity_gap, random_tfm_model};
use tfm_core::flowcore::{
    conditional_transition, interpolate, logistic, sample_time_pair, u_from_X, CouplingBatch, Schedule, TimePair,
    TimeSamplerConfig,
};
use tfm_core::nets::{ParamMode, TfmModel};
use tfm_core::objectives::{tfm_loss, LossConfig};
use tfm_core::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One-sample KS statistic of `xs` against `N(mu, sigma)`.
fn ks_normal(mut xs: Vec<f64>, mu: f64, sigma: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let dist = Normal::new(mu, sigma).unwrap();
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = dist.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn sampled_pairs_never_leave_the_simplex() {
    let cfgs = [TimeSamplerConfig::default(), TimeSamplerConfig::uniform(), TimeSamplerConfig::lognorm(2.0, 3.0)];
    for (k, cfg) in cfgs.iter().enumerate() {
        let mut g = rng(k as u64);
        let bad = (0..100_000)
            .map(|_| sample_time_pair(cfg, &mut g))
            .filter(|p| !(0.0 <= p.t() && p.t() <= p.r() && p.r() <= 1.0))
            .count();
        assert_eq!(bad, 0, "{cfg:?}");
    }
}

#[test]
fn lognorm_marginals_pass_ks() {
    let (mu, sigma) = (-0.4, 1.0);
    let mut g = rng(7);
    let pairs: Vec<TimePair> =
        (0..100_000).map(|_| sample_time_pair(&TimeSamplerConfig::lognorm(mu, sigma), &mut g)).collect();
    let t: Vec<f64> = pairs.iter().map(|p| logit(p.t())).collect();
    let d: Vec<f64> = pairs.iter().filter(|p| p.t() < 1.0).map(|p| logit(p.span() / (1.0 - p.t()))).collect();
    let (ks_t, ks_d) = (ks_normal(t, mu, sigma), ks_normal(d, mu, sigma));
    assert!(ks_t < 0.01, "t marginal KS {ks_t}");
    assert!(ks_d < 0.01, "offset marginal KS {ks_d}");
}

#[test]
fn logistic_is_the_inverse_of_logit() {
    for v in [-5.0, -0.4, 0.0, 1.3] {
        assert!((logit(logistic(v)) - v).abs() < 1e-12);
    }
}

fn residual_model(seed: u64) -> TfmModel {
    TfmModel::new(grad_check_config(), false, &mut rng(seed)).unwrap()
}

#[test]
fn average_velocity_of_residual_model_is_the_raw_head() {
    let model = residual_model(3);
    let mut g = rng(4);
    for _ in 0..100 {
        let x = Tensor::matrix(1, 2, vec![g.gen_range(-3.0..3.0), g.gen_range(-3.0..3.0)]).unwrap();
        let t: f64 = g.gen_range(0.0..0.95);
        let r = g.gen_range(t + 0.01..=1.0);
        let out = model.forward(&x, &[t], &[r], None).unwrap();
        let u = u_from_X(&out, &x, TimePair::new(t, r).unwrap()).unwrap();
        let head = model.net_output(&x, &[t], &[r], None).unwrap();
        let gap = u.sub(&head).unwrap().max_abs();
        assert!(gap < 1e-12 * (1.0 + head.max_abs()) / (r - t), "gap {gap} at t={t} r={r}");
    }
}

#[test]
fn repeated_forward_passes_are_bit_identical() {
    let model = residual_model(5);
    let x = Tensor::matrix(3, 2, vec![0.1, -0.2, 1.5, 0.3, -2.0, 0.7]).unwrap();
    let (t, r) = ([0.1, 0.2, 0.3], [0.5, 0.9, 0.3]);
    let a = model.forward(&x, &t, &r, None).unwrap();
    let b = residual_model(5).forward(&x, &t, &r, None).unwrap();
    assert_eq!(a.data(), b.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_hits_both_endpoints(a in prop::collection::vec(-10.0..10.0f64, 3), b in prop::collection::vec(-10.0..10.0f64, 3)) {
        let (x0, x1) = (Tensor::vector(a), Tensor::vector(b));
        let lin = Schedule::linear();
        prop_assert_eq!(interpolate(&x0, &x1, 0.0, &lin).unwrap(), x0.clone());
        prop_assert_eq!(interpolate(&x0, &x1, 1.0, &lin).unwrap(), x1.clone());
        let cos = Schedule::cosine();
        prop_assert!(interpolate(&x0, &x1, 0.0, &cos).unwrap().sub(&x0).unwrap().max_abs() < 1e-12);
        prop_assert!(interpolate(&x0, &x1, 1.0, &cos).unwrap().sub(&x1).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn transition_state_is_the_interpolant_at_r(a in -5.0..5.0f64, b in -5.0..5.0f64, r in 0.0..=1.0f64) {
        let (x0, x1) = (Tensor::vector(vec![a, b]), Tensor::vector(vec![b, a]));
        let lin = Schedule::linear();
        prop_assert_eq!(conditional_transition(&x0, &x1, r, &lin).unwrap(), interpolate(&x0, &x1, r, &lin).unwrap());
    }

    #[test]
    fn average_velocity_round_trip(x in prop::collection::vec(-10.0..10.0f64, 2), big in prop::collection::vec(-10.0..10.0f64, 2),
                                   t in 0.0..0.99f64, frac in 0.01..=1.0f64) {
        let r = t + frac * (1.0 - t);
        prop_assume!(r > t);
        let pair = TimePair::new(t, r).unwrap();
        let (x, big) = (Tensor::vector(x), Tensor::vector(big));
        let u = u_from_X(&big, &x, pair).unwrap();
        let back = x.axpy(r - t, &u).unwrap();
        prop_assert!(back.sub(&big).unwrap().max_abs() <= 1e-12 * (1.0 + big.max_abs()));
    }

    #[test]
    fn residual_boundary_is_exact(seed in 0u64..1000, a in -5.0..5.0f64, b in -5.0..5.0f64, t in 0.0..=1.0f64) {
        let model = random_tfm_model(&mut rng(seed), ParamMode::Residual).unwrap();
        let d = model.data_dim();
        let x = Tensor::matrix(1, d, (0..d).map(|i| if i % 2 == 0 { a } else { b }).collect()).unwrap();
        prop_assert_eq!(model.forward(&x, &[t], &[t], None).unwrap(), x);
    }

    #[test]
    fn offset_map_stays_ordered(t in 0.0..=1.0f64, d in 0.0..=1.0f64) {
        let p = TimePair::from_offset(t, d).unwrap();
        prop_assert!(p.t() <= p.r() && p.r() <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn jvp_is_linear_in_the_tangent(seed in any::<u64>()) {
        let gap = jvp_linearity_gap(seed).unwrap();
        prop_assert!(gap < 1e-12, "linearity gap {gap}");
    }

    #[test]
    fn forward_and_reverse_modes_agree(seed in any::<u64>()) {
        let gap = forward_reverse_gap(seed).unwrap();
        prop_assert!(gap < 1e-10, "forward/reverse gap {gap}");
    }

    #[test]
    fn transition_loss_is_nonnegative_and_plain_when_unweighted(seed in any::<u64>()) {
        let mut g = rng(seed);
        let model = TfmModel::new(grad_check_config(), false, &mut g).unwrap();
        let n = 16;
        let mut normal = |s: f64| Tensor::matrix(n, 2, (0..2 * n).map(|_| s * g.gen_range(-1.0..1.0)).collect()).unwrap();
        let batch = CouplingBatch { x0: normal(1.0), x1: normal(2.0), labels: vec![None; n] };
        let mut g = rng(seed ^ 1);
        let pairs: Vec<TimePair> = (0..n).map(|_| sample_time_pair(&TimeSamplerConfig::default(), &mut g)).collect();
        let (weighted, _) = tfm_loss(&model, &batch, &pairs, &LossConfig::default(), &mut g).unwrap();
        prop_assert!(weighted.weighted_loss >= 0.0 && weighted.is_finite());
        let (plain, _) = tfm_loss(&model, &batch, &pairs, &LossConfig::plain(), &mut g).unwrap();
        prop_assert!((plain.weighted_loss - plain.raw_mse).abs() <= 1e-15 * plain.raw_mse.max(1.0));
        prop_assert_eq!(plain.mean_weight, 1.0);
    }
}
