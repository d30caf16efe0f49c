//! Discretised Ornstein-Uhlenbeck diffusion on `R^d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PolicyParams, PolicyVars, Process};
use crate::autodiff::{Mlp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::math::{gaussian_logpdf, std_normal, LN_2PI};
use crate::targets::Target;

/// Largest allowed residual mean coefficient `prod sqrt(1 - alpha_n)`.
pub const MIXING_BOUND: f64 = 0.05;

/// Rate function `b_s` of the noising OU process over noising time `s in [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    Constant { rate: f64 },
    /// `b_s = min_rate + (max_rate - min_rate) s`.
    Linear { min_rate: f64, max_rate: f64 },
}

impl NoiseSchedule {
    fn integral(&self, s0: f64, s1: f64) -> f64 {
        match *self {
            NoiseSchedule::Constant { rate } => rate * (s1 - s0),
            NoiseSchedule::Linear { min_rate, max_rate } => {
                min_rate * (s1 - s0) + 0.5 * (max_rate - min_rate) * (s1 * s1 - s0 * s0)
            }
        }
    }
}

/// Per-transition noise levels. `alpha[n]` is shared by the forward kernel
/// `x_n -> x_{n+1}` and the backward kernel `x_{n+1} -> x_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub sigma: f64,
    pub alpha: Vec<f64>,
}

impl DiffusionSchedule {
    /// `alpha = 1 - exp(-2 int b_s ds)` over each step's noising-time interval.
    /// Generation step `n` covers noising times `[1 - (n+1)/N, 1 - n/N]`.
    pub fn new(steps: usize, sigma: f64, noise: NoiseSchedule) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("steps: must be at least 1"));
        }
        let n = steps as f64;
        let alpha = (0..steps)
            .map(|i| {
                let s1 = 1.0 - i as f64 / n;
                let s0 = 1.0 - (i + 1) as f64 / n;
                -(-2.0 * noise.integral(s0, s1)).exp_m1()
            })
            .collect();
        DiffusionSchedule::from_alphas(sigma, alpha)
    }

    pub fn from_alphas(sigma: f64, alpha: Vec<f64>) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("sigma: must be positive, got {sigma}")));
        }
        if alpha.is_empty() {
            return Err(Error::config("steps: must be at least 1"));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::config(format!("alpha values must lie in (0, 1), got {a}")));
        }
        Ok(DiffusionSchedule { steps: alpha.len(), sigma, alpha })
    }

    /// `prod_n sqrt(1 - alpha_n)`: how much of `x_N` survives to `x_0`.
    pub fn residual_mean_coefficient(&self) -> f64 {
        self.alpha.iter().map(|a| (1.0 - a).sqrt()).product()
    }

    pub fn check_mixing(&self) -> Result<()> {
        let c = self.residual_mean_coefficient();
        if c > MIXING_BOUND {
            return Err(Error::config(format!(
                "ou_rate: residual mean coefficient {c:.4} exceeds {MIXING_BOUND}; increase the rate"
            )));
        }
        Ok(())
    }
}

/// `log N(x_prev; sqrt(1 - alpha) x, sigma^2 alpha I)` for the backward step out of `x_n`.
pub fn backward_kernel_logpdf(schedule: &DiffusionSchedule, x_prev: &[f64], x: &[f64], n: usize) -> Result<f64> {
    if x_prev.len() != x.len() {
        return Err(Error::input(format!("dimension mismatch: {} vs {}", x_prev.len(), x.len())));
    }
    if n == 0 || n > schedule.steps {
        return Err(Error::input(format!("backward step index {n} outside 1..={}", schedule.steps)));
    }
    Ok(kernel_logpdf(schedule, x_prev, x, n))
}

fn kernel_logpdf(schedule: &DiffusionSchedule, x_prev: &[f64], x: &[f64], n: usize) -> f64 {
    let a = schedule.alpha[n - 1];
    let c = (1.0 - a).sqrt();
    let mean: Vec<f64> = x.iter().map(|v| c * v).collect();
    gaussian_logpdf(x_prev, &mean, schedule.sigma * schedule.sigma * a)
}

/// Diffusion sampler for a continuous target with `p_0 = N(0, sigma^2 I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diffusion {
    pub target: Target,
    pub schedule: DiffusionSchedule,
    pub langevin: bool,
    /// Maximum Euclidean norm of `grad log R` inside the Langevin term.
    pub grad_clip: f64,
    /// Multiplier on the drift network output.
    pub drift_scale: f64,
}

impl Diffusion {
    pub fn new(target: Target, schedule: DiffusionSchedule) -> Self {
        Diffusion { target, schedule, langevin: false, grad_clip: 1e2, drift_scale: 1.0 }
    }

    pub fn with_langevin(mut self, enabled: bool, grad_clip: f64) -> Result<Self> {
        if enabled && !self.target.has_grad() {
            return Err(Error::capability(format!(
                "langevin parametrisation needs grad log R, which '{}' does not provide",
                self.target.name
            )));
        }
        self.langevin = enabled;
        self.grad_clip = grad_clip;
        Ok(self)
    }

    pub fn with_drift_scale(mut self, scale: f64) -> Self {
        self.drift_scale = scale;
        self
    }

    pub fn dim(&self) -> usize {
        self.target.dim
    }

    fn time(&self, n: usize) -> f64 {
        n as f64 / self.schedule.steps as f64
    }

    fn clipped_grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.target.grad_log_r(x).unwrap_or_else(|_| vec![0.0; x.len()]);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.grad_clip {
            let k = self.grad_clip / norm;
            g.iter_mut().for_each(|v| *v *= k);
        }
        if g.iter().any(|v| !v.is_finite()) {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        g
    }

    fn feature_tensor(&self, xs: &[&Vec<f64>], ns: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(xs.len() * self.feature_dim());
        for (x, &n) in xs.iter().zip(ns) {
            self.features(x, n, &mut data);
        }
        Tensor::new(xs.len(), self.feature_dim(), data)
    }

    /// The drift `f~_theta(x, n/N)` for every state.
    pub fn drift(&self, policy: &PolicyParams, xs: &[&Vec<f64>], ns: &[usize]) -> Result<Tensor> {
        let feats = self.feature_tensor(xs, ns);
        let mut out = policy.net.forward(&feats)?;
        if self.drift_scale != 1.0 {
            out = out.map(|v| v * self.drift_scale);
        }
        if self.langevin {
            let net2 = policy
                .langevin
                .as_ref()
                .ok_or_else(|| Error::input("langevin parametrisation enabled but policy has no scale network"))?;
            let ts = Tensor::column(ns.iter().map(|&n| self.time(n)).collect());
            let scale = net2.forward(&ts)?;
            let d = self.dim();
            for (r, x) in xs.iter().enumerate() {
                let g = self.clipped_grad(x);
                for j in 0..d {
                    out.data[r * d + j] += scale.data[r] * g[j];
                }
            }
        }
        Ok(out)
    }
}

impl Process for Diffusion {
    type State = Vec<f64>;

    fn steps(&self) -> usize {
        self.schedule.steps
    }

    fn feature_dim(&self) -> usize {
        self.dim() + 1
    }

    fn features(&self, x: &Vec<f64>, n: usize, out: &mut Vec<f64>) {
        let inv = 1.0 / self.schedule.sigma;
        out.extend(x.iter().map(|v| v * inv));
        out.push(self.time(n));
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let s = self.schedule.sigma;
        (0..self.dim()).map(|_| s * std_normal(rng)).collect()
    }

    fn log_p0(&self, x: &Vec<f64>) -> f64 {
        self.log_reference(x)
    }

    fn log_reference(&self, x: &Vec<f64>) -> f64 {
        let s2 = self.schedule.sigma * self.schedule.sigma;
        let sq: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * sq / s2 - 0.5 * x.len() as f64 * (LN_2PI + s2.ln())
    }

    fn log_reward(&self, x: &Vec<f64>) -> f64 {
        self.target.log_r_unchecked(x)
    }

    fn log_reward_interior(&self, x: &Vec<f64>) -> f64 {
        self.target.log_r_unchecked(x)
    }

    fn init_policy<R: Rng + ?Sized>(&self, hidden: usize, rng: &mut R) -> PolicyParams {
        let d = self.dim();
        let net = Mlp::init(d + 1, hidden, d, 0.01, rng);
        let langevin = self.langevin.then(|| Mlp::init(1, hidden, 1, 0.01, rng));
        PolicyParams { net, langevin, log_z: 0.0 }
    }

    fn forward_batch<R: Rng + ?Sized>(
        &self,
        policy: &PolicyParams,
        xs: &[Vec<f64>],
        n: usize,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if epsilon != 0.0 {
            return Err(Error::capability("epsilon exploration applies to discrete processes only"));
        }
        let refs: Vec<&Vec<f64>> = xs.iter().collect();
        let drift = self.drift(policy, &refs, &vec![n; xs.len()])?;
        let a = self.schedule.alpha[n];
        let c = (1.0 - a).sqrt();
        let var = self.schedule.sigma * self.schedule.sigma * a;
        let sd = var.sqrt();
        let d = self.dim();
        let mut next = Vec::with_capacity(xs.len());
        let mut log_fwd = Vec::with_capacity(xs.len());
        for (r, x) in xs.iter().enumerate() {
            let mean: Vec<f64> = (0..d).map(|j| c * x[j] + a * drift.data[r * d + j]).collect();
            let y: Vec<f64> = mean.iter().map(|m| m + sd * std_normal(rng)).collect();
            log_fwd.push(gaussian_logpdf(&y, &mean, var));
            next.push(y);
        }
        Ok((next, log_fwd))
    }

    fn record_log_fwd(
        &self,
        tape: &mut Tape,
        vars: &PolicyVars,
        prev: &[&Vec<f64>],
        next: &[&Vec<f64>],
        ns: &[usize],
    ) -> Result<Var> {
        let m = prev.len();
        let d = self.dim();
        let feats = self.feature_tensor(prev, ns);
        let feats = tape.constant(feats);
        let mut f = vars.net.forward(tape, feats);
        if self.drift_scale != 1.0 {
            f = tape.scale(f, self.drift_scale);
        }
        if self.langevin {
            let net2 = vars
                .langevin
                .as_ref()
                .ok_or_else(|| Error::input("langevin parametrisation enabled but policy has no scale network"))?;
            let ts = tape.constant(Tensor::column(ns.iter().map(|&n| self.time(n)).collect()));
            let s = net2.forward(tape, ts);
            let mut g = Vec::with_capacity(m * d);
            for x in prev {
                g.extend(self.clipped_grad(x));
            }
            let g = tape.constant(Tensor::new(m, d, g));
            let lg = tape.mul_col(g, s);
            f = tape.add(f, lg);
        }
        let s2 = self.schedule.sigma * self.schedule.sigma;
        let mut shrunk = Vec::with_capacity(m * d);
        let mut target = Vec::with_capacity(m * d);
        let mut alphas = Vec::with_capacity(m);
        let mut inv_var = Vec::with_capacity(m);
        let mut norm = Vec::with_capacity(m);
        for ((x, y), &n) in prev.iter().zip(next).zip(ns) {
            if x.len() != d || y.len() != d {
                return Err(Error::input(format!("state dimension must be {d}")));
            }
            let a = self.schedule.alpha[n];
            let c = (1.0 - a).sqrt();
            shrunk.extend(x.iter().map(|v| c * v));
            target.extend(y.iter().copied());
            alphas.push(a);
            inv_var.push(-0.5 / (s2 * a));
            norm.push(-0.5 * d as f64 * (LN_2PI + (s2 * a).ln()));
        }
        let shrunk = tape.constant(Tensor::new(m, d, shrunk));
        let alphas = tape.constant(Tensor::column(alphas));
        let step = tape.mul_col(f, alphas);
        let mean = tape.add(shrunk, step);
        let target = tape.constant(Tensor::new(m, d, target));
        let diff = tape.sub(target, mean);
        let sq = tape.square(diff);
        let rs = tape.row_sum(sq);
        let inv_var = tape.constant(Tensor::column(inv_var));
        let quad = tape.mul_col(rs, inv_var);
        let norm = tape.constant(Tensor::column(norm));
        Ok(tape.add(quad, norm))
    }

    fn backward_sample<R: Rng + ?Sized>(&self, x: &Vec<f64>, n: usize, rng: &mut R) -> (Vec<f64>, f64) {
        let a = self.schedule.alpha[n - 1];
        let c = (1.0 - a).sqrt();
        let var = self.schedule.sigma * self.schedule.sigma * a;
        let sd = var.sqrt();
        let mean: Vec<f64> = x.iter().map(|v| c * v).collect();
        let prev: Vec<f64> = mean.iter().map(|m| m + sd * std_normal(rng)).collect();
        let lp = gaussian_logpdf(&prev, &mean, var);
        (prev, lp)
    }

    fn backward_logpdf(&self, x_prev: &Vec<f64>, x: &Vec<f64>, n: usize) -> f64 {
        kernel_logpdf(&self.schedule, x_prev, x, n)
    }

    fn exact_sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<Vec<f64>>> {
        self.target.exact_sample(rng, count)
    }

    fn exact_log_z(&self) -> Option<f64> {
        self.target.exact_log_z()
    }

    fn check_terminal(&self, x: &Vec<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::input(format!("state dimension must be {}, got {}", self.dim(), x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("terminal state has non-finite coordinates"));
        }
        Ok(())
    }

    fn state_columns(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x{i}")).collect()
    }

    fn state_fields(&self, x: &Vec<f64>) -> Vec<String> {
        x.iter().map(|v| v.to_string()).collect()
    }
}
