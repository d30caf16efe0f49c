//! Evaluation of a trained sampler: log-partition bounds, marginal likelihood
//! estimates and sample-based distances. Everything here uses the amortised
//! sampler on its own; no SMC is involved.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logsumexp, mean, standard_error};
use crate::process::{sample_backward, sample_forward, PolicyParams, Process};

/// Sinkhorn iteration cap.
pub const SINKHORN_MAX_ITER: usize = 1000;
/// Sinkhorn stopping tolerance on the marginal violation.
pub const SINKHORN_TOL: f64 = 1e-10;
/// Default mode-coverage radius.
pub const MODE_RADIUS: f64 = 3.0;
/// Number of evaluations averaged when reporting end-of-training metrics.
pub const REPORT_WINDOW: usize = 5;

/// A Monte Carlo mean with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let std_error = if v.len() > 1 { standard_error(v) } else { 0.0 };
        Estimate { value: mean(v), std_error, samples: v.len() }
    }
}

/// Log-weights `log R + sum log_back - log p_0 - sum log_fwd` of forward rollouts.
pub fn forward_log_weights<P: Process, R: Rng + ?Sized>(
    process: &P,
    policy: &PolicyParams,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(sample_forward(process, policy, count, 0.0, rng)?.iter().map(|t| t.log_weight()).collect())
}

/// The same log-ratio on backward trajectories from exact target samples.
pub fn backward_log_weights<P: Process, R: Rng + ?Sized>(
    process: &P,
    policy: &PolicyParams,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let xs = process.exact_sample(rng, count)?;
    Ok(sample_backward(process, policy, &xs, rng)?.iter().map(|t| t.log_weight()).collect())
}

/// Evidence lower bound on `log Z`.
pub fn elbo<P: Process, R: Rng + ?Sized>(process: &P, policy: &PolicyParams, count: usize, rng: &mut R) -> Result<Estimate> {
    if count == 0 {
        return Err(Error::input("ELBO needs at least one sample"));
    }
    Ok(Estimate::from_samples(&forward_log_weights(process, policy, count, rng)?))
}

/// Evidence upper bound on `log Z`; needs an exact sampler for the target.
pub fn eubo<P: Process, R: Rng + ?Sized>(process: &P, policy: &PolicyParams, count: usize, rng: &mut R) -> Result<Estimate> {
    if count == 0 {
        return Err(Error::input("EUBO needs at least one sample"));
    }
    Ok(Estimate::from_samples(&backward_log_weights(process, policy, count, rng)?))
}

/// One-sample estimate of `log p_theta(x)` through a backward trajectory.
pub fn estimate_log_marginal<P: Process, R: Rng + ?Sized>(
    process: &P,
    policy: &PolicyParams,
    x: &P::State,
    rng: &mut R,
) -> Result<f64> {
    let t = sample_backward(process, policy, std::slice::from_ref(x), rng)?.remove(0);
    Ok(t.log_p0 + t.log_fwd.iter().sum::<f64>() - t.log_back.iter().sum::<f64>())
}

/// Sample Pearson correlation.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::input("correlation needs two equal-length series of at least two points"));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::input("correlation is undefined for a constant series"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_batches(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<usize> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::input("distance between empty sample sets"));
    }
    let d = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != d) {
        return Err(Error::input("sample sets must share one dimension"));
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// Transport cost `sum P_ij C_ij` of the entropic plan.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Entropic optimal transport with squared-Euclidean cost and uniform marginals,
/// solved by log-domain Sinkhorn iterations.
pub fn sinkhorn(x: &[Vec<f64>], y: &[Vec<f64>], reg: f64) -> Result<SinkhornResult> {
    check_batches(x, y)?;
    if !(reg > 0.0) {
        return Err(Error::input("Sinkhorn regularisation must be positive"));
    }
    let (n, m) = (x.len(), y.len());
    let cost: Vec<f64> = x.iter().flat_map(|a| y.iter().map(move |b| sq_dist(a, b))).collect();
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < SINKHORN_MAX_ITER {
        iterations += 1;
        for i in 0..n {
            for j in 0..m {
                buf[j] = (g[j] - cost[i * m + j]) / reg;
            }
            f[i] = reg * (log_a - logsumexp(&buf[..m]));
        }
        for j in 0..m {
            for i in 0..n {
                buf[i] = (f[i] - cost[i * m + j]) / reg;
            }
            g[j] = reg * (log_b - logsumexp(&buf[..n]));
        }
        // Column marginals are exact after the g update; check the rows.
        let mut violation: f64 = 0.0;
        for i in 0..n {
            let row: f64 = (0..m).map(|j| ((f[i] + g[j] - cost[i * m + j]) / reg).exp()).sum();
            violation = violation.max((row - log_a.exp()).abs());
        }
        if violation < SINKHORN_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("Sinkhorn stopped after {iterations} iterations without converging");
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost[i * m + j];
            total += ((f[i] + g[j] - c) / reg).exp() * c;
        }
    }
    Ok(SinkhornResult { cost: total, iterations, converged })
}

/// Biased MMD with kernel `exp(-|a - b| / l)`, `l` the median pairwise distance of the pooled samples.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    check_batches(x, y)?;
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    let scale = median(&mut dists).filter(|&m| m > 0.0).unwrap_or(1.0);
    let k_mean = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for u in a {
            for v in b {
                s += (-sq_dist(u, v).sqrt() / scale).exp();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    let v = k_mean(x, x) + k_mean(y, y) - 2.0 * k_mean(x, y);
    Ok(v.max(0.0).sqrt())
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Number of `means` with at least one sample within `radius`.
pub fn mode_coverage(samples: &[Vec<f64>], means: &[Vec<f64>], radius: f64) -> usize {
    let r2 = radius * radius;
    means.iter().filter(|m| samples.iter().any(|s| sq_dist(s, m) < r2)).count()
}

/// Trailing mean over the last `window` values.
pub fn moving_average(values: &[f64], window: usize) -> Option<f64> {
    if values.is_empty() || window == 0 {
        return None;
    }
    let start = values.len().saturating_sub(window);
    Some(mean(&values[start..]))
}

/// Metrics requested from [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Elbo,
    Eubo,
    Sinkhorn,
    Mmd,
    Modes,
    /// Correlation of one-sample log-marginal estimates with log rewards.
    Pearson,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "elbo" => Ok(Metric::Elbo),
            "eubo" => Ok(Metric::Eubo),
            "sinkhorn" => Ok(Metric::Sinkhorn),
            "mmd" => Ok(Metric::Mmd),
            "modes" => Ok(Metric::Modes),
            "pearson" => Ok(Metric::Pearson),
            other => Err(Error::input(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elbo: Option<Estimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eubo: Option<Estimate>,
    pub log_z_theta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_log_z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sinkhorn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmd: Option<f64>,
    /// Kernel bandwidth rule used for the MMD.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmd_bandwidth: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode_total: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson_r: Option<f64>,
    pub sample_count: usize,
    pub seed: u64,
}

/// Evaluates the metrics defined for any process: ELBO, EUBO and the
/// Pearson correlation over `count` policy samples. Returns the terminal
/// states of the forward samples when any were drawn.
pub fn evaluate_bounds<P, R>(
    process: &P,
    policy: &PolicyParams,
    metrics: &[Metric],
    count: usize,
    seed: u64,
    rng: &mut R,
) -> Result<(EvalReport, Option<Vec<P::State>>)>
where
    P: Process,
    R: Rng + ?Sized,
{
    if count == 0 {
        return Err(Error::input("evaluation needs at least one sample"));
    }
    let mut report = EvalReport {
        log_z_theta: policy.log_z,
        exact_log_z: process.exact_log_z(),
        sample_count: count,
        seed,
        ..EvalReport::default()
    };
    let need_samples = metrics.iter().any(|m| !matches!(m, Metric::Eubo));
    let mut samples = None;
    if need_samples {
        let trajs = sample_forward(process, policy, count, 0.0, rng)?;
        if metrics.contains(&Metric::Elbo) {
            let lw: Vec<f64> = trajs.iter().map(|t| t.log_weight()).collect();
            report.elbo = Some(Estimate::from_samples(&lw));
        }
        samples = Some(trajs.into_iter().map(|mut t| t.states.pop().expect("non-empty")).collect::<Vec<_>>());
    }
    if metrics.contains(&Metric::Eubo) {
        report.eubo = Some(eubo(process, policy, count, rng)?);
    }
    if let (true, Some(xs)) = (metrics.contains(&Metric::Pearson), &samples) {
        let mut marginals = Vec::with_capacity(xs.len());
        for x in xs {
            marginals.push(estimate_log_marginal(process, policy, x, rng)?);
        }
        let rewards: Vec<f64> = xs.iter().map(|x| process.log_reward(x)).collect();
        report.pearson_r = Some(pearson_r(&marginals, &rewards)?);
    }
    Ok((report, samples))
}

/// Evaluates a continuous sampler. Sample-based metrics compare `count`
/// policy samples against `count` exact target samples.
pub fn evaluate<P, R>(
    process: &P,
    policy: &PolicyParams,
    metrics: &[Metric],
    count: usize,
    mode_means: Option<&[Vec<f64>]>,
    seed: u64,
    rng: &mut R,
) -> Result<EvalReport>
where
    P: Process<State = Vec<f64>>,
    R: Rng + ?Sized,
{
    let (mut report, samples) = evaluate_bounds(process, policy, metrics, count, seed, rng)?;
    if let Some(xs) = &samples {
        if metrics.iter().any(|m| matches!(m, Metric::Sinkhorn | Metric::Mmd)) {
            let truth = process.exact_sample(rng, count)?;
            if metrics.contains(&Metric::Sinkhorn) {
                report.sinkhorn = Some(sinkhorn(xs, &truth, 1.0)?.cost);
            }
            if metrics.contains(&Metric::Mmd) {
                report.mmd = Some(mmd(xs, &truth)?);
                report.mmd_bandwidth = Some("median pairwise distance".to_string());
            }
        }
        if metrics.contains(&Metric::Modes) {
            let means = mode_means.ok_or_else(|| Error::capability("mode coverage needs a target with known modes"))?;
            report.mode_count = Some(mode_coverage(xs, means, MODE_RADIUS));
            report.mode_total = Some(means.len());
        }
    }
    Ok(report)
}
