use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smcgfn::autodiff::{Mlp, Tensor};
use smcgfn::enumerate::{enumerate, exact_policy_marginal};
use smcgfn::metrics::{elbo, estimate_log_marginal, eubo};
use smcgfn::process::{
    Diffusion, DiffusionSchedule, DiscreteReward, NoiseSchedule, PolicyParams, PrependAppend, Process,
};
use smcgfn::targets::{Mixture, Target};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn diffusion(target: Target, steps: usize, sigma: f64) -> Diffusion {
    Diffusion::new(target, DiffusionSchedule::new(steps, sigma, NoiseSchedule::Constant { rate: 3.0 }).unwrap())
}

/// Policy whose drift is the constant `c` in every coordinate.
fn constant_drift(p: &Diffusion, c: f64) -> PolicyParams {
    let mut net = Mlp::zeros(p.feature_dim(), 4, p.dim());
    net.b3 = Tensor::row(vec![c; p.dim()]);
    PolicyParams { net, langevin: None, log_z: 0.0 }
}

#[test]
fn perfect_sampler_bounds_are_tight() {
    // With p_0 equal to the normalised target, zero drift is the exact reversal.
    let p = diffusion(Target::planted_gaussian(1, 7f64.ln()), 6, 1.0);
    let policy = constant_drift(&p, 0.0);
    let lo = elbo(&p, &policy, 2000, &mut rng(1)).unwrap();
    let hi = eubo(&p, &policy, 2000, &mut rng(2)).unwrap();
    for e in [lo, hi] {
        assert!((e.value - 7f64.ln()).abs() <= 3.0 * e.std_error.max(1e-12), "{e:?}");
    }
}

#[test]
fn elbo_never_exceeds_log_z_and_gap_is_nonnegative() {
    let p = diffusion(Target::planted_gaussian(1, 7f64.ln()), 6, 2.0);
    let policy = constant_drift(&p, 0.7);
    let mut r = rng(3);
    let mut lows = Vec::new();
    let mut gaps = Vec::new();
    for _ in 0..100 {
        let lo = elbo(&p, &policy, 50, &mut r).unwrap().value;
        let hi = eubo(&p, &policy, 50, &mut r).unwrap().value;
        lows.push(lo);
        gaps.push(hi - lo);
    }
    let se = |v: &[f64]| smcgfn::math::standard_error(v);
    assert!(smcgfn::math::mean(&lows) <= 7f64.ln() + 3.0 * se(&lows));
    assert!(smcgfn::math::mean(&gaps) >= -3.0 * se(&gaps));
}

#[test]
fn collapsed_sampler_has_a_wide_bound_gap() {
    let target = Target::mixture("two", Mixture::uniform(vec![vec![-10.0], vec![10.0]], 1.0));
    let p = diffusion(target, 1, 10.0);
    // A single step with a large constant drift parks all mass near +10.
    let alpha = 1.0 - (-6.0f64).exp();
    let policy = constant_drift(&p, 10.0 / alpha);
    let lo = elbo(&p, &policy, 2000, &mut rng(4)).unwrap().value;
    let hi = eubo(&p, &policy, 2000, &mut rng(5)).unwrap().value;
    assert!(hi - lo > 10.0, "elbo {lo} eubo {hi}");
}

#[test]
fn one_step_marginal_matches_gaussian_convolution() {
    let p = diffusion(Target::planted_gaussian(1, 0.0), 1, 1.5);
    let c = 0.8;
    let policy = constant_drift(&p, c);
    let alpha = 1.0 - (-6.0f64).exp();
    // x_1 = sqrt(1 - a) x_0 + a c + noise with x_0 ~ N(0, s^2): mean a c, variance s^2.
    let x = 0.4;
    let var = 1.5f64 * 1.5;
    let exact = (-(x - alpha * c).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    let mut r = rng(6);
    let v: Vec<f64> = (0..10_000).map(|_| estimate_log_marginal(&p, &policy, &vec![x], &mut r).unwrap().exp()).collect();
    let (m, se) = (smcgfn::math::mean(&v), smcgfn::math::standard_error(&v));
    assert!((m - exact).abs() <= 3.0 * se, "{m} +/- {se} vs {exact}");
}

#[test]
fn discrete_marginal_estimator_is_unbiased() {
    let vocab = vec!['A', 'B'];
    let p = PrependAppend::new(vocab.clone(), 4, DiscreteReward::from_name("count_a_pow2", &vocab).unwrap()).unwrap();
    let mut r = rng(7);
    let policy = PolicyParams {
        net: Mlp::init(p.feature_dim(), 8, p.num_actions(), 1.0, &mut r),
        langevin: None,
        log_z: 0.0,
    };
    let table = enumerate(&p).unwrap();
    let exact = exact_policy_marginal(&p, &table, &policy).unwrap();
    for s in ["ABAB", "AAAA", "BBAB"] {
        let x = p.parse(s).unwrap();
        let v: Vec<f64> =
            (0..10_000).map(|_| estimate_log_marginal(&p, &policy, &x, &mut r).unwrap().exp()).collect();
        let (m, se) = (smcgfn::math::mean(&v), smcgfn::math::standard_error(&v));
        let e = exact[table.index_of(&x).unwrap()];
        assert!((m - e).abs() <= 3.0 * se.max(1e-12), "{s}: {m} +/- {se} vs {e}");
    }
}

#[test]
fn balanced_policy_gives_zero_variance_marginal_estimates() {
    // Zero drift with p_0 equal to the target satisfies TB on every trajectory.
    let p = diffusion(Target::planted_gaussian(1, 0.0), 4, 1.0);
    let policy = constant_drift(&p, 0.0);
    let mut r = rng(8);
    let v: Vec<f64> = (0..20).map(|_| estimate_log_marginal(&p, &policy, &vec![0.2], &mut r).unwrap()).collect();
    assert!(v.iter().all(|&e| (e - v[0]).abs() < 1e-12));
}
