//! Flow functions `log F_n(x) = (1 - beta_n) log p_0(x) + beta_n log R(x) + log F~(x, n)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Process;
use crate::autodiff::{Mlp, MlpVars, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::math::softplus;

/// How the interpolation schedule `beta_n` is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// `beta_n = sum_{i<=n} softplus(phi_i) / sum_j softplus(phi_j)`.
    Learnt,
    Linear,
    Cosine,
}

/// Twist parameters `phi`: raw schedule values and an optional correction network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub schedule: BetaSchedule,
    /// `phi_1..phi_N`; only used by [`BetaSchedule::Learnt`].
    pub raw: Vec<f64>,
    pub correction: Option<Mlp>,
}

#[derive(Clone, Debug)]
pub struct FlowVars {
    pub raw: Option<Var>,
    pub correction: Option<MlpVars>,
}

impl FlowParams {
    pub fn new<P: Process, R: Rng + ?Sized>(
        process: &P,
        schedule: BetaSchedule,
        correction_hidden: Option<usize>,
        rng: &mut R,
    ) -> Self {
        FlowParams {
            schedule,
            raw: vec![0.0; process.steps()],
            correction: correction_hidden.map(|h| Mlp::init(process.feature_dim(), h, 1, 0.01, rng)),
        }
    }

    pub fn steps(&self) -> usize {
        self.raw.len()
    }

    pub fn is_learnt(&self) -> bool {
        self.schedule == BetaSchedule::Learnt || self.correction.is_some()
    }

    /// `beta_0..beta_N` with `beta_0 = 0` and `beta_N = 1` exactly.
    pub fn betas(&self) -> Vec<f64> {
        let n = self.steps();
        let mut b = Vec::with_capacity(n + 1);
        b.push(0.0);
        match self.schedule {
            BetaSchedule::Learnt => {
                let sp: Vec<f64> = self.raw.iter().map(|&p| softplus(p)).collect();
                let total: f64 = sp.iter().sum();
                let mut acc = 0.0;
                for s in &sp[..n - 1] {
                    acc += s;
                    b.push(acc / total);
                }
            }
            BetaSchedule::Linear => b.extend((1..n).map(|i| i as f64 / n as f64)),
            BetaSchedule::Cosine => {
                b.extend((1..n).map(|i| 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / n as f64).cos())))
            }
        }
        b.push(1.0);
        b
    }

    /// `log F_n(x)`; pinned to `log p_0` at `n = 0` and `log R` at `n = N`.
    pub fn log_value<P: Process>(&self, process: &P, x: &P::State, n: usize) -> Result<f64> {
        Ok(self.log_values(process, std::slice::from_ref(x), n)?[0])
    }

    /// `log F_n` for a batch of states sharing the step `n`.
    pub fn log_values<P: Process>(&self, process: &P, xs: &[P::State], n: usize) -> Result<Vec<f64>> {
        let steps = self.steps();
        if n > steps {
            return Err(Error::input(format!("flow step {n} outside 0..={steps}")));
        }
        if n == 0 {
            return Ok(xs.iter().map(|x| process.log_p0(x)).collect());
        }
        if n == steps {
            return Ok(xs.iter().map(|x| process.log_reward(x)).collect());
        }
        let beta = self.betas()[n];
        let mut out: Vec<f64> = xs
            .iter()
            .map(|x| (1.0 - beta) * process.log_reference(x) + beta * process.log_reward_interior(x))
            .collect();
        if let Some(net) = &self.correction {
            let mut feats = Vec::with_capacity(xs.len() * process.feature_dim());
            for x in xs {
                process.features(x, n, &mut feats);
            }
            let c = net.forward(&Tensor::new(xs.len(), process.feature_dim(), feats))?;
            for (o, v) in out.iter_mut().zip(&c.data) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn record(&self, tape: &mut Tape) -> FlowVars {
        FlowVars {
            raw: (self.schedule == BetaSchedule::Learnt).then(|| tape.param(Tensor::row(self.raw.clone()))),
            correction: self.correction.as_ref().map(|m| m.record(tape)),
        }
    }

    /// Records `log F_{ns[i]}(xs[i])` for interior steps `0 < n < N` as an `m x 1` column.
    pub fn record_log_values<P: Process>(
        &self,
        tape: &mut Tape,
        vars: &FlowVars,
        process: &P,
        xs: &[&P::State],
        ns: &[usize],
    ) -> Result<Var> {
        let steps = self.steps();
        if let Some(&n) = ns.iter().find(|&&n| n == 0 || n >= steps) {
            return Err(Error::input(format!("recorded flow values need interior steps, got {n}")));
        }
        let beta_row = match vars.raw {
            Some(raw) => {
                let sp = tape.softplus(raw);
                let cs = tape.cumsum(sp);
                let total = tape.sum(sp);
                tape.div_scalar(cs, total)
            }
            None => {
                let b = self.betas();
                tape.constant(Tensor::row(b[1..].to_vec()))
            }
        };
        let beta = tape.gather_cols(beta_row, ns.iter().map(|n| n - 1).collect());
        let mut base = Vec::with_capacity(xs.len());
        let mut span = Vec::with_capacity(xs.len());
        for x in xs {
            let r = process.log_reference(x);
            base.push(r);
            span.push(process.log_reward_interior(x) - r);
        }
        let span = tape.constant(Tensor::column(span));
        let interp = tape.mul(beta, span);
        let base = tape.constant(Tensor::column(base));
        let mut out = tape.add(base, interp);
        if let (Some(net), Some(_)) = (&vars.correction, &self.correction) {
            let mut feats = Vec::with_capacity(xs.len() * process.feature_dim());
            for (x, &n) in xs.iter().zip(ns) {
                process.features(x, n, &mut feats);
            }
            let feats = tape.constant(Tensor::new(xs.len(), process.feature_dim(), feats));
            let c = net.forward(tape, feats);
            out = tape.add(out, c);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::diffusion::{Diffusion, DiffusionSchedule, NoiseSchedule};
    use crate::targets::Target;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn process(n: usize) -> Diffusion {
        let s = DiffusionSchedule::new(n, 1.0, NoiseSchedule::Constant { rate: 3.0 }).unwrap();
        Diffusion::new(Target::planted_gaussian(1, 0.0), s)
    }

    #[test]
    fn equal_raw_values_give_linear_schedule() {
        let p = process(5);
        let mut f = FlowParams::new(&p, BetaSchedule::Learnt, None, &mut ChaCha8Rng::seed_from_u64(0));
        f.raw = vec![0.7; 5];
        for (i, b) in f.betas().iter().enumerate() {
            assert!((b - i as f64 / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_one_gives_halves() {
        let p = process(2);
        let mut f = FlowParams::new(&p, BetaSchedule::Learnt, None, &mut ChaCha8Rng::seed_from_u64(0));
        let v = (std::f64::consts::E - 1.0).ln();
        f.raw = vec![v, v];
        assert_eq!(f.betas(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn betas_strictly_increase() {
        let p = process(6);
        let mut f = FlowParams::new(&p, BetaSchedule::Learnt, None, &mut ChaCha8Rng::seed_from_u64(0));
        f.raw = vec![-5.0, 3.0, 0.0, -30.0, 1.0, 2.0];
        assert!(f.betas().windows(2).all(|w| w[1] > w[0]));
        for s in [BetaSchedule::Linear, BetaSchedule::Cosine] {
            f.schedule = s;
            let b = f.betas();
            assert!(b.windows(2).all(|w| w[1] > w[0]));
            assert_eq!((b[0], b[6]), (0.0, 1.0));
        }
    }

    #[test]
    fn beta_gradient_matches_finite_differences() {
        let s = DiffusionSchedule::new(4, 1.0, NoiseSchedule::Constant { rate: 3.0 }).unwrap();
        let p = Diffusion::new(Target::planted_gmm1d(0.0), s);
        let mut f = FlowParams::new(&p, BetaSchedule::Learnt, None, &mut ChaCha8Rng::seed_from_u64(0));
        f.raw = vec![0.3, -0.8, 1.2, 0.1];
        // d log F_1 / d phi_1 = (log R - log p0) d beta_1 / d phi_1
        let x = vec![1.5];
        let mut tape = Tape::new();
        let vars = f.record(&mut tape);
        let y = f.record_log_values(&mut tape, &vars, &p, &[&x], &[1]).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        let span = p.log_reward_interior(&x) - p.log_reference(&x);
        let ga = g.wrt(vars.raw.unwrap()).unwrap().data[0] / span;
        let h = 1e-6;
        let beta1 = |d: f64| {
            let mut q = f.clone();
            q.raw[0] += d;
            q.betas()[1]
        };
        let fd = (beta1(h) - beta1(-h)) / (2.0 * h);
        assert!((ga - fd).abs() < 1e-6, "{ga} vs {fd}");
    }

    #[test]
    fn boundaries_are_pinned() {
        let s = DiffusionSchedule::new(4, 1.0, NoiseSchedule::Constant { rate: 3.0 }).unwrap();
        let p = Diffusion::new(Target::planted_gmm1d(7f64.ln()), s);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut f = FlowParams::new(&p, BetaSchedule::Learnt, Some(8), &mut rng);
        f.raw = vec![1.0, -2.0, 0.5, 3.0];
        for x in [vec![0.3], vec![-4.0], vec![10.0]] {
            assert_eq!(f.log_value(&p, &x, 4).unwrap().to_bits(), p.log_reward(&x).to_bits());
            assert_eq!(f.log_value(&p, &x, 0).unwrap().to_bits(), p.log_p0(&x).to_bits());
        }
    }

    #[test]
    fn geometric_mean_of_identical_gaussians() {
        // p0 = N(0, 1) and R = N(0, 1): any beta gives log N(0; 0, 1).
        let p = process(2);
        let f = FlowParams::new(&p, BetaSchedule::Linear, None, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(f.betas()[1], 0.5);
        let v = f.log_value(&p, &vec![0.0], 1).unwrap();
        assert!((v + 0.9189385332046727).abs() < 1e-12);
    }

    #[test]
    fn recorded_values_match_plain_values() {
        let s = DiffusionSchedule::new(4, 2.0, NoiseSchedule::Constant { rate: 3.0 }).unwrap();
        let p = Diffusion::new(Target::planted_gmm1d(0.0), s);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut f = FlowParams::new(&p, BetaSchedule::Learnt, Some(8), &mut rng);
        f.raw = vec![0.2, 0.4, -1.0, 0.0];
        let xs = [vec![0.5], vec![-1.5], vec![2.0]];
        let mut tape = Tape::new();
        let vars = f.record(&mut tape);
        let refs: Vec<&Vec<f64>> = xs.iter().collect();
        let col = f.record_log_values(&mut tape, &vars, &p, &refs, &[1, 2, 3]).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let plain = f.log_value(&p, x, i + 1).unwrap();
            assert!((tape.value(col).data[i] - plain).abs() < 1e-12);
        }
    }
}
