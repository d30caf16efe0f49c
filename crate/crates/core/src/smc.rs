//! Weighted particle propagation: effective sample size, adaptive weight
//! tempering, tempered resampling, twisted SMC with learnt flows and the AIS
//! special case. All weights are carried as log-weights.

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_normalise, logsumexp};
use crate::process::{sample_forward, FlowParams, PolicyParams, Process};

/// Iteration budget of the binary search for `lambda*`.
pub const TEMPERING_ITERATIONS: usize = 40;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScheme {
    #[default]
    Multinomial,
    Systematic,
}

/// `(sum w)^2 / sum w^2`, with `-inf` weights contributing nothing.
pub fn ess(log_w: &[f64]) -> Result<f64> {
    if log_w.is_empty() || log_w.iter().all(|&v| v == f64::NEG_INFINITY) {
        return Err(Error::DegenerateWeights);
    }
    if log_w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::DegenerateWeights);
    }
    let sq: Vec<f64> = log_w.iter().map(|v| 2.0 * v).collect();
    let value = (2.0 * logsumexp(log_w) - logsumexp(&sq)).exp();
    let live = log_w.iter().filter(|v| v.is_finite()).count() as f64;
    Ok(value.clamp(1.0, live))
}

fn temper(log_w: &[f64], lambda: f64) -> Vec<f64> {
    log_w.iter().map(|&v| if v == f64::NEG_INFINITY { v } else { lambda * v }).collect()
}

/// Largest `lambda` in `[0, 1]` with `ess(lambda * log_w) >= gamma * K`,
/// where `K` counts the particles with finite weight.
pub fn adaptive_iw_tempering(log_w: &[f64], gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("tempering threshold gamma = {gamma} outside [0, 1]")));
    }
    let threshold = gamma * log_w.iter().filter(|v| v.is_finite()).count() as f64;
    if ess(log_w)? >= threshold {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..TEMPERING_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if ess(&temper(log_w, mid))? >= threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Draws `count` ancestor indices with probabilities `exp(log_p)` (normalised).
pub fn resample_indices<R: Rng + ?Sized>(
    log_p: &[f64],
    count: usize,
    scheme: ResampleScheme,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut p = log_p.to_vec();
    if !log_normalise(&mut p).is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let probs: Vec<f64> = p.iter().map(|v| v.exp()).collect();
    match scheme {
        ResampleScheme::Multinomial => {
            let dist = WeightedIndex::new(&probs).map_err(|_| Error::DegenerateWeights)?;
            Ok((0..count).map(|_| dist.sample(rng)).collect())
        }
        ResampleScheme::Systematic => {
            let u: f64 = rng.random();
            let mut out = Vec::with_capacity(count);
            let mut cum = probs[0];
            let mut i = 0;
            for k in 0..count {
                let target = (k as f64 + u) / count as f64;
                while cum < target && i + 1 < probs.len() {
                    i += 1;
                    cum += probs[i];
                }
                while probs[i] == 0.0 && i + 1 < probs.len() {
                    i += 1;
                    cum += probs[i];
                }
                out.push(i);
            }
            Ok(out)
        }
    }
}

/// Result of resampling with adaptive tempering.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampled {
    pub ancestors: Vec<usize>,
    /// Residual `(1 - lambda) log w` of each ancestor, self-normalised.
    pub log_w: Vec<f64>,
    pub lambda: f64,
}

/// Ancestors drawn proportionally to `w^lambda` with residual weights `w^(1 - lambda)`.
pub fn tempered_resample<R: Rng + ?Sized>(
    log_w: &[f64],
    gamma: f64,
    scheme: ResampleScheme,
    rng: &mut R,
) -> Result<Resampled> {
    let lambda = adaptive_iw_tempering(log_w, gamma)?;
    let ancestors = resample_indices(&temper(log_w, lambda), log_w.len(), scheme, rng)?;
    let mut residual: Vec<f64> = ancestors.iter().map(|&a| (1.0 - lambda) * log_w[a]).collect();
    log_normalise(&mut residual);
    Ok(Resampled { ancestors, log_w: residual, lambda })
}

/// Incremental log-weight `log F_{n+1}(x') + log_back - log F_n(x) - log_fwd` of one step.
pub fn smc_weight_update(log_f_next: f64, log_back: f64, log_f: f64, log_fwd: f64) -> f64 {
    log_f_next + log_back - log_f - log_fwd
}

/// Particle states at step `step` with their log-weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem<S> {
    pub particles: Vec<S>,
    pub log_w: Vec<f64>,
    pub step: usize,
    pub log_z_hat: f64,
    pub resample_steps: Vec<usize>,
}

impl<S> ParticleSystem<S> {
    pub fn new(particles: Vec<S>) -> Self {
        let k = particles.len() as f64;
        ParticleSystem {
            log_w: vec![-k.ln(); particles.len()],
            particles,
            step: 0,
            log_z_hat: 0.0,
            resample_steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

/// What happened on one `L`-step segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub start: usize,
    pub end: usize,
    /// Self-normalised log-weights at the segment start.
    pub log_w_start: Vec<f64>,
    /// Sum of incremental log-weights over the segment.
    pub log_increment: Vec<f64>,
    /// ESS of the weights at the segment end, before any resampling.
    pub ess: f64,
    /// Tempering exponent if the segment ended with a resampling step.
    pub lambda: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmcSettings {
    pub particles: usize,
    pub chunk: usize,
    pub kappa: f64,
    pub gamma: f64,
    #[serde(default)]
    pub scheme: ResampleScheme,
}

impl SmcSettings {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::config("SMC needs at least one particle"));
        }
        if self.chunk == 0 || steps % self.chunk != 0 {
            return Err(Error::config(format!("chunk length {} does not divide N = {steps}", self.chunk)));
        }
        for (name, v) in [("kappa", self.kappa), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmcOutput<S> {
    pub states: Vec<S>,
    /// Combined weights `log(K Z_hat W_N)`.
    pub log_w_bar: Vec<f64>,
    pub log_z_hat: f64,
    pub resample_steps: Vec<usize>,
    pub segments: Vec<SegmentRecord>,
    /// Number of particles flagged for a non-finite flow or density.
    pub flagged: usize,
}

impl<S> SmcOutput<S> {
    pub fn min_segment_ess(&self) -> f64 {
        self.segments.iter().map(|s| s.ess).fold(f64::INFINITY, f64::min)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.segments.iter().filter_map(|s| s.lambda).collect()
    }
}

/// Twisted SMC with proposals `policy` and intermediate targets `flow`.
///
/// Forward moves draw from `rng` in the same order as [`sample_forward`], so
/// with `kappa = 0` the particles coincide with an AIS run on the same stream.
pub fn smc_sampling<P: Process, R: Rng + ?Sized>(
    process: &P,
    policy: &PolicyParams,
    flow: &FlowParams,
    settings: &SmcSettings,
    rng: &mut R,
) -> Result<SmcOutput<P::State>> {
    let steps = process.steps();
    settings.validate(steps)?;
    if flow.steps() != steps {
        return Err(Error::input(format!("flow has {} steps, process has {steps}", flow.steps())));
    }
    let k = settings.particles;
    let initial: Vec<P::State> = (0..k).map(|_| process.sample_initial(rng)).collect();
    let mut sys = ParticleSystem::new(initial);
    let mut log_f = flow.log_values(process, &sys.particles, 0)?;
    let mut segments = Vec::with_capacity(steps / settings.chunk);
    let mut flagged = vec![false; k];
    let n_segments = steps / settings.chunk;

    for j in 1..=n_segments {
        let start = sys.step;
        let end = start + settings.chunk;
        let log_w_start = sys.log_w.clone();
        let mut inc = vec![0.0; k];
        for n in start..end {
            let (next, lf) = process.forward_batch(policy, &sys.particles, n, 0.0, rng)?;
            for i in 0..k {
                inc[i] += process.backward_logpdf(&sys.particles[i], &next[i], n + 1) - lf[i];
            }
            sys.particles = next;
        }
        sys.step = end;
        let log_f_end = flow.log_values(process, &sys.particles, end)?;
        for i in 0..k {
            let v = inc[i] + log_f_end[i] - log_f[i];
            inc[i] = if v.is_finite() && !flagged[i] {
                v
            } else {
                if !flagged[i] {
                    warn!("particle {i} has a non-finite weight at step {end}; dropping it");
                }
                flagged[i] = true;
                f64::NEG_INFINITY
            };
            sys.log_w[i] += inc[i];
        }
        log_f = log_f_end;
        let seg_log_z = logsumexp(&sys.log_w);
        if !seg_log_z.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        sys.log_z_hat += seg_log_z;
        let seg_ess = ess(&sys.log_w)?;
        let mut lambda = None;
        if seg_ess < settings.kappa * k as f64 && j < n_segments {
            let r = tempered_resample(&sys.log_w, settings.gamma, settings.scheme, rng)?;
            sys.particles = r.ancestors.iter().map(|&a| sys.particles[a].clone()).collect();
            log_f = r.ancestors.iter().map(|&a| log_f[a]).collect();
            flagged = r.ancestors.iter().map(|&a| flagged[a]).collect();
            sys.log_w = r.log_w;
            sys.resample_steps.push(end);
            lambda = Some(r.lambda);
        } else {
            log_normalise(&mut sys.log_w);
        }
        segments.push(SegmentRecord { start, end, log_w_start, log_increment: inc, ess: seg_ess, lambda });
    }

    let shift = (k as f64).ln() + sys.log_z_hat;
    let log_w_bar = sys.log_w.iter().map(|w| w + shift).collect();
    Ok(SmcOutput {
        states: sys.particles,
        log_w_bar,
        log_z_hat: sys.log_z_hat,
        resample_steps: sys.resample_steps,
        segments,
        flagged: flagged.iter().filter(|&&f| f).count(),
    })
}

/// Forward rollouts weighted by the trajectory-level AIS log-weight.
pub fn ais_sampling<P: Process, R: Rng + ?Sized>(
    process: &P,
    policy: &PolicyParams,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<P::State>, Vec<f64>)> {
    let trajs = sample_forward(process, policy, count, 0.0, rng)?;
    let log_w = trajs.iter().map(|t| t.log_weight()).collect();
    let states = trajs.into_iter().map(|mut t| t.states.pop().expect("non-empty trajectory")).collect();
    Ok((states, log_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logmeanexp;
    use crate::process::{BetaSchedule, Diffusion, DiffusionSchedule, NoiseSchedule};
    use crate::targets::Target;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.0; 4]).unwrap() - 4.0).abs() < 1e-12);
        let v = ess(&[2f64.ln(), 0.0, 0.0]).unwrap();
        assert!((v - 16.0 / 6.0).abs() < 1e-12);
        let d = ess(&[30.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-10);
        assert!(matches!(ess(&[f64::NEG_INFINITY; 3]), Err(Error::DegenerateWeights)));
        assert!((ess(&[0.0, f64::NEG_INFINITY, 0.0]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tempering_guard_and_search() {
        assert_eq!(adaptive_iw_tempering(&[0.0, 0.1, 0.2], 0.5).unwrap(), 1.0);
        assert!(matches!(adaptive_iw_tempering(&[0.0], 1.5), Err(Error::Config(_))));
        let lw = [10.0, 0.0, 0.0, 0.0];
        let l = adaptive_iw_tempering(&lw, 0.9).unwrap();
        assert!(l < 1.0);
        let e = ess(&temper(&lw, l)).unwrap();
        assert!((3.6..3.6 + 1e-6).contains(&e), "{e}");
        let grid = (0..=10_000)
            .map(|i| i as f64 * 1e-4)
            .filter(|&g| ess(&temper(&lw, g)).unwrap() >= 3.6)
            .fold(0.0, f64::max);
        assert!((l - grid).abs() <= 1e-4);
    }

    #[test]
    fn lambda_zero_flattens_weights() {
        assert!((ess(&temper(&[3.0, -1.0, 7.0], 0.0)).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn resampling_with_gamma_zero_leaves_uniform_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = tempered_resample(&[0.0, 1.0, -2.0, 0.5], 0.0, ResampleScheme::Multinomial, &mut rng).unwrap();
        assert_eq!(r.lambda, 1.0);
        assert_eq!(r.ancestors.len(), 4);
        for v in &r.log_w {
            assert!((v + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn resampling_with_gamma_one_is_uniform_with_original_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lw = [0.0, 2.0, -1.0];
        let r = tempered_resample(&lw, 1.0, ResampleScheme::Multinomial, &mut rng).unwrap();
        assert!(r.lambda < 1e-6);
        let mut expect: Vec<f64> = r.ancestors.iter().map(|&a| lw[a]).collect();
        log_normalise(&mut expect);
        for (a, b) in r.log_w.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(logsumexp(&r.log_w).abs() < 1e-12);
    }

    #[test]
    fn systematic_resampling_counts_are_near_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lw = [0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()];
        let idx = resample_indices(&lw, 10, ResampleScheme::Systematic, &mut rng).unwrap();
        let counts: Vec<usize> = (0..3).map(|i| idx.iter().filter(|&&a| a == i).count()).collect();
        assert_eq!(counts, vec![2, 3, 5]);
    }

    #[test]
    fn zero_weight_particles_are_never_resampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lw = [0.0, f64::NEG_INFINITY, 0.0];
        for scheme in [ResampleScheme::Multinomial, ResampleScheme::Systematic] {
            let idx = resample_indices(&lw, 1000, scheme, &mut rng).unwrap();
            assert!(idx.iter().all(|&a| a != 1));
        }
    }

    fn gaussian_setup(steps: usize) -> (Diffusion, PolicyParams, FlowParams) {
        let s = DiffusionSchedule::new(steps, 1.0, NoiseSchedule::Constant { rate: 3.0 }).unwrap();
        let p = Diffusion::new(Target::planted_gmm1d(7f64.ln()), s);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let policy = p.init_policy(8, &mut rng);
        let flow = FlowParams::new(&p, BetaSchedule::Learnt, Some(8), &mut rng);
        (p, policy, flow)
    }

    #[test]
    fn kappa_zero_reproduces_ais_weights() {
        let (p, policy, flow) = gaussian_setup(6);
        let settings = SmcSettings { particles: 16, chunk: 2, kappa: 0.0, gamma: 0.3, scheme: ResampleScheme::Multinomial };
        let out = smc_sampling(&p, &policy, &flow, &settings, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (states, lw) = ais_sampling(&p, &policy, 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(out.states, states);
        for (a, b) in out.log_w_bar.iter().zip(&lw) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((out.log_z_hat - logmeanexp(&lw)).abs() < 1e-9);
        assert!(out.resample_steps.is_empty());
    }

    #[test]
    fn single_particle_estimate_is_its_weight() {
        let (p, policy, flow) = gaussian_setup(4);
        let settings = SmcSettings { particles: 1, chunk: 1, kappa: 1.0, gamma: 0.0, scheme: ResampleScheme::Multinomial };
        let out = smc_sampling(&p, &policy, &flow, &settings, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let total: f64 = out.segments.iter().map(|s| s.log_increment[0]).sum();
        assert!((out.log_z_hat - total).abs() < 1e-9);
        assert!((out.log_w_bar[0] - total).abs() < 1e-9);
    }

    #[test]
    fn resampling_keeps_count_and_records_steps() {
        let (p, policy, flow) = gaussian_setup(8);
        let settings = SmcSettings { particles: 64, chunk: 2, kappa: 1.0, gamma: 0.5, scheme: ResampleScheme::Systematic };
        let out = smc_sampling(&p, &policy, &flow, &settings, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(out.states.len(), 64);
        assert_eq!(out.resample_steps, vec![2, 4, 6]);
        for s in &out.segments {
            assert!(logsumexp(&s.log_w_start).abs() < 1e-9);
            assert!(s.ess >= 1.0 && s.ess <= 64.0);
        }
        assert_eq!(out.lambdas().len(), 3);
    }

    #[test]
    fn weight_update_telescopes_without_resampling() {
        let parts = [(-1.0, -0.5, -2.0, -0.25), (-3.0, -0.1, -1.0, -1.5)];
        let sum: f64 = parts.iter().map(|&(a, b, c, d)| smc_weight_update(a, b, c, d)).sum();
        // log F_2 - log F_0 + sum(back - fwd) when the shared F_1 cancels
        let direct = smc_weight_update(-3.0, -0.5 - 0.1, -2.0, -0.25 - 1.5);
        assert!((sum - direct).abs() < 1e-12);
    }

    #[test]
    fn invalid_settings_rejected() {
        let (p, policy, flow) = gaussian_setup(6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = SmcSettings { particles: 4, chunk: 4, kappa: 0.5, gamma: 0.5, scheme: ResampleScheme::Multinomial };
        assert!(matches!(smc_sampling(&p, &policy, &flow, &bad, &mut rng), Err(Error::Config(_))));
        let bad = SmcSettings { chunk: 3, kappa: 1.5, ..bad };
        assert!(matches!(smc_sampling(&p, &policy, &flow, &bad, &mut rng), Err(Error::Config(_))));
    }
}
