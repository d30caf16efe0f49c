//! Closed-form unnormalised target densities with gradients, exact samplers
//! and (where known) exact log-normalisers.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logsumexp, std_normal, LN_2PI};

/// Smallest log-variance the funnel uses for its conditional coordinates.
pub const FUNNEL_LOG_VAR_FLOOR: f64 = -60.0;

/// Means of a GMM-style target, drawn uniformly from `[-bound, bound]^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub means: Vec<Vec<f64>>,
    pub seed: u64,
}

impl GmmSpec {
    pub const BOUND: f64 = 40.0;

    pub fn generate(dim: usize, components: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = (0..components)
            .map(|_| (0..dim).map(|_| rng.random_range(-Self::BOUND..=Self::BOUND)).collect())
            .collect();
        GmmSpec { means, seed }
    }
}

/// Weighted mixture of isotropic Gaussians, scaled by `exp(log_scale)`.
///
/// With `log_scale = 0` and normalised weights this is a normalised density,
/// so `log Z = log_scale` exactly. This is what the planted-Z tests rely on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub log_scale: f64,
}

impl Mixture {
    pub fn uniform(means: Vec<Vec<f64>>, var: f64) -> Self {
        let m = means.len();
        Mixture {
            vars: vec![var; m],
            log_weights: vec![-(m as f64).ln(); m],
            means,
            log_scale: 0.0,
        }
    }

    fn component_logs(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        self.means
            .iter()
            .zip(&self.vars)
            .zip(&self.log_weights)
            .map(|((mu, &v), &lw)| {
                let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                lw - 0.5 * sq / v - 0.5 * d * (LN_2PI + v.ln())
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_scale + logsumexp(&self.component_logs(x))
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let logs = self.component_logs(x);
        let lse = logsumexp(&logs);
        let mut g = vec![0.0; x.len()];
        for ((mu, &v), &l) in self.means.iter().zip(&self.vars).zip(&logs) {
            let r = (l - lse).exp();
            for i in 0..x.len() {
                g[i] -= r * (x[i] - mu[i]) / v;
            }
        }
        g
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.means.len() - 1;
        for (i, lw) in self.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                idx = i;
                break;
            }
        }
        let sd = self.vars[idx].sqrt();
        self.means[idx]
            .iter()
            .map(|m| m + sd * std_normal(rng))
            .collect()
    }
}

/// Which closed-form density a [`Target`] evaluates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TargetKind {
    Mixture(Mixture),
    Funnel,
    ManyWell,
}

/// A pluggable unnormalised log-density `log R(x)` on `R^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    pub dim: usize,
    pub kind: TargetKind,
}

/// Selection of a named target in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub name: String,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Planted `log Z` for the synthetic Gaussian targets.
    #[serde(default)]
    pub log_z: f64,
}

impl Target {
    /// GMM with `components` unit-covariance modes, means from `seed`.
    pub fn gmm(dim: usize, components: usize, seed: u64) -> Self {
        let spec = GmmSpec::generate(dim, components, seed);
        Target { name: "gmm40".into(), dim, kind: TargetKind::Mixture(Mixture::uniform(spec.means, 1.0)) }
    }

    pub fn funnel() -> Self {
        Target { name: "funnel".into(), dim: 10, kind: TargetKind::Funnel }
    }

    pub fn many_well(dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::input(format!("manywell needs an even dimension, got {dim}")));
        }
        Ok(Target { name: "manywell".into(), dim, kind: TargetKind::ManyWell })
    }

    /// `exp(log_z) * N(0, I_dim)`.
    pub fn planted_gaussian(dim: usize, log_z: f64) -> Self {
        let mut m = Mixture::uniform(vec![vec![0.0; dim]], 1.0);
        m.log_scale = log_z;
        Target { name: "gaussian".into(), dim, kind: TargetKind::Mixture(m) }
    }

    /// One-dimensional two-component mixture times `exp(log_z)`.
    pub fn planted_gmm1d(log_z: f64) -> Self {
        let m = Mixture {
            means: vec![vec![-2.0], vec![3.0]],
            vars: vec![0.5, 1.0],
            log_weights: vec![0.3f64.ln(), 0.7f64.ln()],
            log_scale: log_z,
        };
        Target { name: "planted_gmm1d".into(), dim: 1, kind: TargetKind::Mixture(m) }
    }

    pub fn mixture(name: &str, mixture: Mixture) -> Self {
        let dim = mixture.means[0].len();
        Target { name: name.into(), dim, kind: TargetKind::Mixture(mixture) }
    }

    pub fn from_config(cfg: &TargetConfig) -> Result<Self> {
        match cfg.name.as_str() {
            "gmm40" => Ok(Target::gmm(cfg.dim.unwrap_or(2), 40, cfg.seed)),
            "funnel" => match cfg.dim {
                None | Some(10) => Ok(Target::funnel()),
                Some(d) => Err(Error::config(format!("target.dim: funnel is 10-dimensional, got {d}"))),
            },
            "manywell" => Target::many_well(cfg.dim.unwrap_or(32)),
            "gaussian" => Ok(Target::planted_gaussian(cfg.dim.unwrap_or(1), cfg.log_z)),
            "planted_gmm1d" => Ok(Target::planted_gmm1d(cfg.log_z)),
            other => Err(Error::config(format!("target.name: unknown target '{other}'"))),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::input(format!(
                "target '{}' expects dimension {}, got {}",
                self.name,
                self.dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// `log R(x)`.
    pub fn log_r(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.log_r_unchecked(x))
    }

    pub(crate) fn log_r_unchecked(&self, x: &[f64]) -> f64 {
        match &self.kind {
            TargetKind::Mixture(m) => m.log_density(x),
            TargetKind::Funnel => funnel_log_density(x),
            TargetKind::ManyWell => many_well_log_density(x),
        }
    }

    pub fn has_grad(&self) -> bool {
        true
    }

    /// `grad log R(x)`.
    pub fn grad_log_r(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(match &self.kind {
            TargetKind::Mixture(m) => m.grad(x),
            TargetKind::Funnel => funnel_grad(x),
            TargetKind::ManyWell => many_well_grad(x),
        })
    }

    pub fn exact_log_z(&self) -> Option<f64> {
        match &self.kind {
            TargetKind::Mixture(m) => Some(m.log_scale),
            TargetKind::Funnel => Some(0.0),
            TargetKind::ManyWell => Some(self.dim as f64 / 2.0 * (double_well_log_z() + 0.5 * LN_2PI)),
        }
    }

    pub fn supports_exact_sampling(&self) -> bool {
        true
    }

    /// Draws `count` i.i.d. samples from `pi = R / Z`.
    pub fn exact_sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<Vec<f64>>> {
        Ok((0..count)
            .map(|_| match &self.kind {
                TargetKind::Mixture(m) => m.sample(rng),
                TargetKind::Funnel => {
                    let x1 = 3.0 * std_normal(rng);
                    let sd = (0.5 * x1.max(FUNNEL_LOG_VAR_FLOOR)).exp();
                    std::iter::once(x1)
                        .chain((1..10).map(|_| sd * std_normal(rng)))
                        .collect()
                }
                TargetKind::ManyWell => {
                    let mut x = Vec::with_capacity(self.dim);
                    for _ in 0..self.dim / 2 {
                        x.push(sample_double_well_quartic(rng));
                        x.push(std_normal(rng));
                    }
                    x
                }
            })
            .collect())
    }

    /// Centres of the modes, for mixture targets.
    pub fn mode_means(&self) -> Option<&[Vec<f64>]> {
        match &self.kind {
            TargetKind::Mixture(m) => Some(&m.means),
            _ => None,
        }
    }
}

/// `log (1/M) sum_i N(x; mean_i, I)`.
pub fn gmm_log_density(spec: &GmmSpec, x: &[f64]) -> Result<f64> {
    if spec.means.iter().any(|m| m.len() != x.len()) {
        return Err(Error::input("gmm: dimension mismatch"));
    }
    Ok(Mixture::uniform(spec.means.clone(), 1.0).log_density(x))
}

/// Neal's funnel in 10 dimensions; the conditional log-variance is floored.
pub fn funnel_log_density(x: &[f64]) -> f64 {
    let x1 = x[0];
    let lv = x1.max(FUNNEL_LOG_VAR_FLOOR);
    let head = -0.5 * x1 * x1 / 9.0 - 0.5 * (LN_2PI + 9f64.ln());
    let inv = (-lv).exp();
    let tail: f64 = x[1..].iter().map(|&xi| -0.5 * xi * xi * inv - 0.5 * (LN_2PI + lv)).sum();
    head + tail
}

fn funnel_grad(x: &[f64]) -> Vec<f64> {
    let x1 = x[0];
    let clamped = x1 < FUNNEL_LOG_VAR_FLOOR;
    let lv = x1.max(FUNNEL_LOG_VAR_FLOOR);
    let inv = (-lv).exp();
    let mut g = vec![0.0; x.len()];
    g[0] = -x1 / 9.0;
    if !clamped {
        g[0] += x[1..].iter().map(|&xi| 0.5 * xi * xi * inv - 0.5).sum::<f64>();
    }
    for i in 1..x.len() {
        g[i] = -x[i] * inv;
    }
    g
}

/// Double-well energy `a^4 - 6a^2 - a/2 + b^2/2`.
pub fn double_well_energy(a: f64, b: f64) -> f64 {
    a.powi(4) - 6.0 * a * a - 0.5 * a + 0.5 * b * b
}

/// `-sum_i E_DW(x_{2i-1}, x_{2i})`.
pub fn many_well_log_density(x: &[f64]) -> f64 {
    -x.chunks_exact(2).map(|p| double_well_energy(p[0], p[1])).sum::<f64>()
}

pub fn manywell_log_density(x: &[f64]) -> Result<f64> {
    if x.len() % 2 != 0 {
        return Err(Error::input(format!("manywell needs an even dimension, got {}", x.len())));
    }
    Ok(many_well_log_density(x))
}

fn many_well_grad(x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for (i, p) in x.chunks_exact(2).enumerate() {
        let a = p[0];
        g[2 * i] = -(4.0 * a.powi(3) - 12.0 * a - 0.5);
        g[2 * i + 1] = -p[1];
    }
    g
}

fn quartic_log_density(a: f64) -> f64 {
    -a.powi(4) + 6.0 * a * a + 0.5 * a
}

const ENVELOPE_SD: f64 = 3.0;

/// Maximum over `a` of the log ratio between the quartic density and the
/// `N(0, 3^2)` envelope (both unnormalised), found from the stationary points
/// of a cubic by Newton iteration.
fn quartic_envelope_bound() -> f64 {
    // h(a) = -a^4 + (6 + 1/18) a^2 + a/2; h'(a) = -4a^3 + 2(6 + 1/18) a + 1/2.
    let c = 2.0 * (6.0 + 1.0 / 18.0);
    let h = |a: f64| -a.powi(4) + 0.5 * c * a * a + 0.5 * a;
    let mut best = f64::NEG_INFINITY;
    for start in [-3.0, 0.0, 3.0] {
        let mut a: f64 = start;
        for _ in 0..100 {
            let d1 = -4.0 * a.powi(3) + c * a + 0.5;
            let d2 = -12.0 * a * a + c;
            if d2.abs() < 1e-12 {
                break;
            }
            a -= d1 / d2;
        }
        best = best.max(h(a));
    }
    best
}

fn sample_double_well_quartic<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let bound = quartic_envelope_bound();
    loop {
        let a = ENVELOPE_SD * std_normal(rng);
        let log_ratio = quartic_log_density(a) + 0.5 * a * a / (ENVELOPE_SD * ENVELOPE_SD) - bound;
        let u: f64 = rng.random();
        if u.ln() < log_ratio {
            return a;
        }
    }
}

/// `log of the integral of exp(-a^4 + 6a^2 + a/2)` by composite Simpson quadrature.
pub fn double_well_log_z() -> f64 {
    let (lo, hi, n) = (-8.0, 8.0, 20_000usize);
    let h = (hi - lo) / n as f64;
    let shift = 10.0;
    let f = |a: f64| (quartic_log_density(a) - shift).exp();
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    (s * h / 3.0).ln() + shift
}
