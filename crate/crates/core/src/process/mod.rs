//! Hierarchical forward samplers `p_theta`, fixed backward kernels `p_back`
//! and the flow parametrisation used as SMC twists.

pub mod diffusion;
pub mod flow;
pub mod prepend_append;

use std::fmt::Debug;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mlp, MlpVars, Tape, Var};
use crate::error::Result;

pub use diffusion::{backward_kernel_logpdf, Diffusion, DiffusionSchedule, NoiseSchedule};
pub use flow::{BetaSchedule, FlowParams, FlowVars};
pub use prepend_append::{DiscreteReward, PrependAppend};

/// Learnable sampler parameters: the drift or logit network, an optional
/// Langevin scale network and `log Z_theta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub net: Mlp,
    pub langevin: Option<Mlp>,
    pub log_z: f64,
}

/// Tape handles for one recording of a [`PolicyParams`].
#[derive(Clone, Debug)]
pub struct PolicyVars {
    pub net: MlpVars,
    pub langevin: Option<MlpVars>,
    pub log_z: Var,
}

impl PolicyParams {
    pub fn record(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars {
            net: self.net.record(tape),
            langevin: self.langevin.as_ref().map(|m| m.record(tape)),
            log_z: tape.param(crate::autodiff::Tensor::scalar(self.log_z)),
        }
    }

    /// Records the networks as constants (no gradients flow into them).
    pub fn record_detached(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars {
            net: self.net.record_constant(tape),
            langevin: self.langevin.as_ref().map(|m| m.record_constant(tape)),
            log_z: tape.constant(crate::autodiff::Tensor::scalar(self.log_z)),
        }
    }
}

/// A latent chain `x_0..x_N` with its per-step log-densities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<S> {
    pub states: Vec<S>,
    /// `log p_theta(x_{n+1} | x_n)` for `n = 0..N`.
    pub log_fwd: Vec<f64>,
    /// `log p_back(x_n | x_{n+1})` for `n = 0..N`.
    pub log_back: Vec<f64>,
    pub log_p0: f64,
    pub log_r: f64,
}

impl<S> Trajectory<S> {
    pub fn steps(&self) -> usize {
        self.log_fwd.len()
    }

    pub fn terminal(&self) -> &S {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Annealed importance log-weight `log R + sum log_back - log p_0 - sum log_fwd`.
    pub fn log_weight(&self) -> f64 {
        self.log_r + self.log_back.iter().sum::<f64>() - self.log_p0 - self.log_fwd.iter().sum::<f64>()
    }
}

/// A generative process together with its target (terminal reward).
///
/// Step `n` of the forward policy maps `x_n` to `x_{n+1}` for `0 <= n < N`;
/// the backward kernel at index `n` maps `x_n` to `x_{n-1}` for `1 <= n <= N`.
pub trait Process {
    type State: Clone + Debug + PartialEq + Serialize + DeserializeOwned;

    fn steps(&self) -> usize;

    /// Width of the feature vector fed to policy and flow networks.
    fn feature_dim(&self) -> usize;

    /// Appends the network features of `x` at step `n` to `out`.
    fn features(&self, x: &Self::State, n: usize, out: &mut Vec<f64>);

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;

    fn log_p0(&self, x: &Self::State) -> f64;

    /// `log p_0` term of the geometric flow interpolation at interior steps.
    fn log_reference(&self, x: &Self::State) -> f64;

    /// `log R` of a terminal state.
    fn log_reward(&self, x: &Self::State) -> f64;

    /// `log R` term of the geometric flow interpolation at interior steps.
    fn log_reward_interior(&self, x: &Self::State) -> f64;

    fn init_policy<R: Rng + ?Sized>(&self, hidden: usize, rng: &mut R) -> PolicyParams;

    /// Samples `x_{n+1}` for every state in `xs`, returning the new states and
    /// their forward log-densities under `policy`. With `epsilon > 0` actions
    /// are drawn uniformly with that probability while the returned
    /// log-densities remain those of the policy itself.
    fn forward_batch<R: Rng + ?Sized>(
        &self,
        policy: &PolicyParams,
        xs: &[Self::State],
        n: usize,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<(Vec<Self::State>, Vec<f64>)>;

    /// Records `log p_theta(next_i | prev_i)` at steps `ns[i]` as an `m x 1` column.
    fn record_log_fwd(
        &self,
        tape: &mut Tape,
        vars: &PolicyVars,
        prev: &[&Self::State],
        next: &[&Self::State],
        ns: &[usize],
    ) -> Result<Var>;

    /// Draws `x_{n-1}` from `p_back(. | x_n)` and returns it with its log-density.
    fn backward_sample<R: Rng + ?Sized>(&self, x: &Self::State, n: usize, rng: &mut R) -> (Self::State, f64);

    /// `log p_back(x_prev | x)` where `x` sits at step `n`.
    fn backward_logpdf(&self, x_prev: &Self::State, x: &Self::State, n: usize) -> f64;

    fn exact_sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<Self::State>>;

    fn exact_log_z(&self) -> Option<f64>;

    /// Rejects states that cannot be terminal states of this process.
    fn check_terminal(&self, x: &Self::State) -> Result<()>;

    /// Column names used when writing states to CSV.
    fn state_columns(&self) -> Vec<String>;

    /// CSV fields of a state, matching [`Process::state_columns`].
    fn state_fields(&self, x: &Self::State) -> Vec<String>;
}

/// `log p_theta` of every transition, evaluated without gradients.
pub fn log_fwd_values<P: Process>(
    process: &P,
    policy: &PolicyParams,
    prev: &[&P::State],
    next: &[&P::State],
    ns: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = policy.record_detached(&mut tape);
    let out = process.record_log_fwd(&mut tape, &vars, prev, next, ns)?;
    Ok(tape.value(out).data.clone())
}

/// Forward rollouts of `count` trajectories from `p_0`.
pub fn sample_forward<P: Process, R: Rng + ?Sized>(
    process: &P,
    policy: &PolicyParams,
    count: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<Trajectory<P::State>>> {
    let n_steps = process.steps();
    let mut xs: Vec<P::State> = (0..count).map(|_| process.sample_initial(rng)).collect();
    let mut trajs: Vec<Trajectory<P::State>> = xs
        .iter()
        .map(|x| Trajectory {
            states: vec![x.clone()],
            log_fwd: Vec::with_capacity(n_steps),
            log_back: Vec::with_capacity(n_steps),
            log_p0: process.log_p0(x),
            log_r: 0.0,
        })
        .collect();
    for n in 0..n_steps {
        let (next, lf) = process.forward_batch(policy, &xs, n, epsilon, rng)?;
        for ((t, x), l) in trajs.iter_mut().zip(&next).zip(lf) {
            let lb = process.backward_logpdf(t.states.last().unwrap(), x, n + 1);
            t.log_fwd.push(l);
            t.log_back.push(lb);
            t.states.push(x.clone());
        }
        xs = next;
    }
    for t in &mut trajs {
        t.log_r = process.log_reward(t.terminal());
    }
    Ok(trajs)
}

/// Ancestral backward sampling from terminal states, with forward
/// log-densities scored under the current policy.
pub fn sample_backward<P: Process, R: Rng + ?Sized>(
    process: &P,
    policy: &PolicyParams,
    terminals: &[P::State],
    rng: &mut R,
) -> Result<Vec<Trajectory<P::State>>> {
    let n_steps = process.steps();
    let mut trajs = Vec::with_capacity(terminals.len());
    for x_n in terminals {
        process.check_terminal(x_n)?;
        let mut rev = vec![x_n.clone()];
        let mut log_back = vec![0.0; n_steps];
        for n in (1..=n_steps).rev() {
            let (prev, lb) = process.backward_sample(rev.last().unwrap(), n, rng);
            log_back[n - 1] = lb;
            rev.push(prev);
        }
        rev.reverse();
        trajs.push(Trajectory {
            log_p0: process.log_p0(&rev[0]),
            log_r: process.log_reward(x_n),
            states: rev,
            log_fwd: Vec::new(),
            log_back,
        });
    }
    rescore_forward(process, policy, &mut trajs)?;
    Ok(trajs)
}

/// Recomputes every stored `log_fwd` under `policy`.
pub fn rescore_forward<P: Process>(
    process: &P,
    policy: &PolicyParams,
    trajs: &mut [Trajectory<P::State>],
) -> Result<()> {
    let n_steps = process.steps();
    let mut prev = Vec::with_capacity(trajs.len() * n_steps);
    let mut next = Vec::with_capacity(trajs.len() * n_steps);
    let mut ns = Vec::with_capacity(trajs.len() * n_steps);
    for t in trajs.iter() {
        for n in 0..n_steps {
            prev.push(&t.states[n]);
            next.push(&t.states[n + 1]);
            ns.push(n);
        }
    }
    let values = log_fwd_values(process, policy, &prev, &next, &ns)?;
    for (t, chunk) in trajs.iter_mut().zip(values.chunks(n_steps.max(1))) {
        t.log_fwd = chunk.to_vec();
    }
    Ok(())
}

/// Flattens the transitions of a batch in trajectory-major order.
pub(crate) fn transitions<S>(trajs: &[Trajectory<S>]) -> (Vec<&S>, Vec<&S>, Vec<usize>) {
    let mut prev = Vec::new();
    let mut next = Vec::new();
    let mut ns = Vec::new();
    for t in trajs {
        for n in 0..t.steps() {
            prev.push(&t.states[n]);
            next.push(&t.states[n + 1]);
            ns.push(n);
        }
    }
    (prev, next, ns)
}
