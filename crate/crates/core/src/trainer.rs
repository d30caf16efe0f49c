//! Training loops: importance-weighted training, SMC as behaviour policy,
//! importance-weighted replay and the combined SMC + replay loop.

use std::io::Write;
use std::time::Instant;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Gradients, Tape, Tensor, Var};
use crate::buffer::{batch_z_ais, batch_z_smc, Priority, Provenance, ReplayBuffer};
use crate::config::{Algo, FlowLoss, PolicyLoss, TrainConfig};
use crate::error::{Error, Result};
use crate::math::{mean, normalised_weights};
use crate::objectives::{
    record_lv, record_subtb_chunk, record_subtb_lambda, record_tb, uniform_weights, PolicyTerms, RecordedLoss,
};
use crate::process::{sample_backward, sample_forward, BetaSchedule, FlowParams, PolicyParams, Process, Trajectory};
use crate::smc::{adaptive_iw_tempering, ess, smc_sampling};

/// Where the training batch of an epoch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochMode {
    OnPolicy,
    Iwt,
    Smc,
    Replay,
    Combined,
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: EpochMode,
    /// Policy loss (TB, or log-variance when configured).
    pub loss_tb: f64,
    pub loss_subtb: Option<f64>,
    pub lambda_star: Option<f64>,
    pub ess_mean: Option<f64>,
    pub log_z_hat: Option<f64>,
    pub log_z_theta: f64,
    pub wall_ms: u64,
    #[serde(skip)]
    pub ess_min: Option<f64>,
}

/// Adam states of the four parameter groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub policy: AdamState,
    pub log_z: AdamState,
    pub flow_net: Option<AdamState>,
    pub beta: Option<AdamState>,
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: serde::de::DeserializeOwned"))]
pub struct TrainerState<S> {
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    pub policy: PolicyParams,
    pub flow: Option<FlowParams>,
    pub optimizers: Optimizers,
    pub buffer: Option<ReplayBuffer<S>>,
}

/// Squared gradient norms of each parameter group under each loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GroupGrads {
    pub policy_loss_on_policy: f64,
    pub policy_loss_on_flow: f64,
    pub flow_loss_on_policy: f64,
    pub flow_loss_on_flow: f64,
}

/// The training batch of one epoch.
struct Batch<S> {
    trajs: Vec<Trajectory<S>>,
    weights: Vec<f64>,
    drawn: Option<Vec<usize>>,
    inserted: Option<usize>,
}

pub struct Trainer<P: Process> {
    pub config: TrainConfig,
    pub process: P,
    pub state: TrainerState<P::State>,
    forward_rollouts: u64,
}

impl<P: Process> Trainer<P> {
    pub fn new(config: TrainConfig, process: P) -> Result<Self> {
        config.validate()?;
        if process.steps() != config.steps {
            return Err(Error::config(format!("steps: process has {} steps, config has {}", process.steps(), config.steps)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut policy = process.init_policy(config.hidden, &mut rng);
        policy.log_z = config.init_log_z;
        let flow = config
            .algo
            .uses_flows()
            .then(|| FlowParams::new(&process, config.beta_schedule, config.flow_hidden, &mut rng));
        let buffer = if config.algo.uses_buffer() { Some(ReplayBuffer::new(config.buffer_capacity)?) } else { None };
        let optimizers = init_optimizers(&config, &policy, flow.as_ref());
        let state = TrainerState { epoch: 0, policy, flow, optimizers, buffer };
        Ok(Trainer { config, process, state, forward_rollouts: 0 })
    }

    /// Restores a trainer from saved state.
    pub fn from_state(config: TrainConfig, process: P, state: TrainerState<P::State>) -> Result<Self> {
        config.validate()?;
        if config.algo.uses_flows() != state.flow.is_some() || config.algo.uses_buffer() != state.buffer.is_some() {
            return Err(Error::input("saved state does not match the configured algorithm"));
        }
        Ok(Trainer { config, process, state, forward_rollouts: 0 })
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.state.policy
    }

    pub fn flow(&self) -> Option<&FlowParams> {
        self.state.flow.as_ref()
    }

    pub fn buffer(&self) -> Option<&ReplayBuffer<P::State>> {
        self.state.buffer.as_ref()
    }

    /// Number of forward proposal rollouts (on-policy batches and SMC runs) so far.
    pub fn forward_rollouts(&self) -> u64 {
        self.forward_rollouts
    }

    /// Whether epoch `i` (1-based) trains on fresh forward rollouts.
    pub fn is_on_policy_epoch(&self, i: usize) -> bool {
        self.config.algo == Algo::OnPolicy || i % self.config.off_policy_ratio == 0
    }

    /// The random stream of epoch `i`, a function of the seed and `i` only.
    pub fn epoch_rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(i as u64);
        rng
    }

    /// Runs epochs until `config.n_epoch`, handing each record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&Self, &EpochRecord) -> Result<()>) -> Result<()> {
        while self.state.epoch < self.config.n_epoch {
            let rec = self.step()?;
            sink(self, &rec)?;
        }
        Ok(())
    }

    /// Runs all remaining epochs and returns their records.
    pub fn train(&mut self) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::with_capacity(self.config.n_epoch.saturating_sub(self.state.epoch));
        self.run(|_, r| {
            out.push(r.clone());
            Ok(())
        })?;
        Ok(out)
    }

    /// Runs a single epoch.
    pub fn step(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let i = self.state.epoch + 1;
        let mut rng = self.epoch_rng(i);
        let k = self.config.batch_size;
        let mut rec = EpochRecord {
            epoch: i,
            mode: EpochMode::OnPolicy,
            loss_tb: 0.0,
            loss_subtb: None,
            lambda_star: None,
            ess_mean: None,
            log_z_hat: None,
            log_z_theta: 0.0,
            wall_ms: 0,
            ess_min: None,
        };

        let buffer_empty = self.state.buffer.as_ref().is_some_and(|b| b.is_empty());
        let on_policy = self.is_on_policy_epoch(i) || (self.config.algo == Algo::Replay && buffer_empty);
        if on_policy && !self.is_on_policy_epoch(i) {
            info!("epoch {i}: replay buffer is empty, running an on-policy epoch instead");
        }

        let batch = if on_policy {
            let trajs = self.rollouts(k, self.config.epsilon, &mut rng)?;
            let log_w: Vec<f64> = trajs.iter().map(|t| t.log_weight()).collect();
            rec.ess_mean = ess(&log_w).ok();
            rec.ess_min = rec.ess_mean;
            rec.log_z_hat = Some(batch_z_ais(&log_w));
            let inserted = match self.state.buffer.as_mut() {
                Some(buf) => {
                    let terminals: Vec<P::State> = trajs.iter().map(|t| t.terminal().clone()).collect();
                    let log_r: Vec<f64> = trajs.iter().map(|t| t.log_r).collect();
                    Some(insert_finite(buf, terminals, &log_w, &log_r, i, Provenance::OnPolicy)?)
                }
                None => None,
            };
            Batch { trajs, weights: uniform_weights(k), drawn: None, inserted }
        } else {
            match self.config.algo {
                Algo::Iwt => {
                    rec.mode = EpochMode::Iwt;
                    let trajs = self.rollouts(k, self.config.epsilon, &mut rng)?;
                    let log_w: Vec<f64> = trajs.iter().map(|t| t.log_weight()).collect();
                    let lambda = adaptive_iw_tempering(&log_w, self.config.gamma)?;
                    let tempered: Vec<f64> =
                        log_w.iter().map(|&w| if w == f64::NEG_INFINITY { w } else { lambda * w }).collect();
                    rec.lambda_star = Some(lambda);
                    rec.ess_mean = ess(&log_w).ok();
                    rec.ess_min = rec.ess_mean;
                    rec.log_z_hat = Some(batch_z_ais(&log_w));
                    Batch { trajs, weights: normalised_weights(&tempered), drawn: None, inserted: None }
                }
                Algo::Smc => {
                    rec.mode = EpochMode::Smc;
                    let terminals = self.smc_terminals(&mut rec, &mut rng)?.0;
                    let trajs = sample_backward(&self.process, &self.state.policy, &terminals, &mut rng)?;
                    Batch { trajs, weights: uniform_weights(k), drawn: None, inserted: None }
                }
                Algo::Replay | Algo::Combined => {
                    if self.config.algo == Algo::Combined {
                        rec.mode = EpochMode::Combined;
                        let (terminals, log_w_bar) = self.smc_terminals(&mut rec, &mut rng)?;
                        let log_r: Vec<f64> = terminals.iter().map(|x| self.process.log_reward(x)).collect();
                        let buf = self.state.buffer.as_mut().expect("combined training has a buffer");
                        insert_finite(buf, terminals, &log_w_bar, &log_r, i, Provenance::Smc)?;
                    } else {
                        rec.mode = EpochMode::Replay;
                    }
                    let buf = self.state.buffer.as_ref().expect("replay training has a buffer");
                    let draw = buf.draw(k, self.config.gamma, self.config.priority, &mut rng)?;
                    rec.lambda_star = Some(draw.lambda);
                    let terminals = buf.states(&draw.indices);
                    let trajs = sample_backward(&self.process, &self.state.policy, &terminals, &mut rng)?;
                    Batch { trajs, weights: uniform_weights(k), drawn: Some(draw.indices), inserted: None }
                }
                Algo::OnPolicy => unreachable!("on-policy training has no off-policy epochs"),
            }
        };

        let (policy_report, flow_value) = self.update(&batch, i)?;
        rec.loss_tb = policy_report.value;
        rec.loss_subtb = flow_value;

        if self.config.priority == Priority::Loss {
            if let Some(buf) = self.state.buffer.as_mut() {
                if let Some(idx) = &batch.drawn {
                    buf.update_losses(idx, &policy_report.per_trajectory)?;
                } else if let Some(start) = batch.inserted {
                    let idx: Vec<usize> = (start..buf.len()).collect();
                    let losses: Vec<f64> = policy_report.per_trajectory[policy_report.per_trajectory.len() - idx.len()..]
                        .to_vec();
                    buf.update_losses(&idx, &losses)?;
                }
            }
        }

        self.state.epoch = i;
        rec.log_z_theta = self.state.policy.log_z;
        if self.config.record_wall_time {
            rec.wall_ms = started.elapsed().as_millis() as u64;
        }
        debug!("epoch {i} {:?}: loss {:.4} log Z_theta {:.4}", rec.mode, rec.loss_tb, rec.log_z_theta);
        Ok(rec)
    }

    fn rollouts(&mut self, count: usize, epsilon: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Trajectory<P::State>>> {
        self.forward_rollouts += 1;
        sample_forward(&self.process, &self.state.policy, count, epsilon, rng)
    }

    /// Runs SMC and records its diagnostics; returns terminals and `log w_bar`.
    fn smc_terminals(&mut self, rec: &mut EpochRecord, rng: &mut ChaCha8Rng) -> Result<(Vec<P::State>, Vec<f64>)> {
        self.forward_rollouts += 1;
        let flow = self.state.flow.as_ref().expect("SMC training has flows");
        let out = smc_sampling(&self.process, &self.state.policy, flow, &self.config.smc_settings(), rng)?;
        if out.flagged > 0 {
            warn!("epoch {}: {} SMC particles dropped for non-finite weights", rec.epoch, out.flagged);
        }
        let ess_values: Vec<f64> = out.segments.iter().map(|s| s.ess).collect();
        rec.ess_mean = Some(mean(&ess_values));
        rec.ess_min = Some(out.min_segment_ess());
        rec.log_z_hat = Some(batch_z_smc(&out.segments));
        let lambdas = out.lambdas();
        if !lambdas.is_empty() {
            rec.lambda_star = Some(mean(&lambdas));
        }
        Ok((out.states, out.log_w_bar))
    }

    /// One optimiser step on every group from the batch; returns the policy
    /// loss report and the flow loss value.
    fn update(&mut self, batch: &Batch<P::State>, epoch: usize) -> Result<(crate::objectives::LossReport, Option<f64>)> {
        let mut tape = Tape::new();
        let handles = self.record_params(&mut tape);
        let (policy_loss, flow_loss) = self.record_losses(&mut tape, &handles, batch)?;
        for (name, loss) in [("policy", Some(&policy_loss)), ("flow", flow_loss.as_ref())] {
            if let Some(l) = loss {
                if !l.report.value.is_finite() {
                    return Err(Error::Training { epoch, message: format!("{name} loss is {}", l.report.value) });
                }
            }
        }

        let g = tape.backward(policy_loss.total)?;
        let training = |e: Error| match e {
            Error::Training { message, .. } => Error::Training { epoch, message },
            other => other,
        };
        let policy_grads = collect(&tape, &g, &handles.policy);
        let mut params: Vec<&mut Tensor> = self.state.policy.net.tensors_mut().into_iter().collect();
        if let Some(l) = self.state.policy.langevin.as_mut() {
            params.extend(l.tensors_mut());
        }
        let info = self.state.optimizers.policy.step(&mut params, &policy_grads, &handles.policy_names).map_err(training)?;
        if info.clipped {
            debug!("epoch {epoch}: policy gradient norm {:.3} clipped", info.grad_norm);
        }
        if self.config.policy_loss == PolicyLoss::Tb {
            let mut z = Tensor::scalar(self.state.policy.log_z);
            let gz = g.wrt_or_zeros(handles.log_z, 1, 1);
            self.state.optimizers.log_z.step(&mut [&mut z], &[gz], &["log_z".into()]).map_err(training)?;
            self.state.policy.log_z = z.item();
        }

        let flow_value = match flow_loss {
            Some(fl) => {
                let g = tape.backward(fl.total)?;
                let flow = self.state.flow.as_mut().expect("flow loss implies flows");
                if let (Some(opt), Some(net)) = (self.state.optimizers.flow_net.as_mut(), flow.correction.as_mut()) {
                    let grads = collect(&tape, &g, &handles.flow_net);
                    let names: Vec<String> = (0..6).map(|j| format!("flow.{j}")).collect();
                    let mut params: Vec<&mut Tensor> = net.tensors_mut().into_iter().collect();
                    opt.step(&mut params, &grads, &names).map_err(training)?;
                }
                if let (Some(opt), Some(raw)) = (self.state.optimizers.beta.as_mut(), handles.beta) {
                    let n = flow.raw.len();
                    let mut t = Tensor::row(flow.raw.clone());
                    opt.step(&mut [&mut t], &[g.wrt_or_zeros(raw, 1, n)], &["beta".into()]).map_err(training)?;
                    flow.raw = t.data;
                }
                Some(fl.report.value)
            }
            None => None,
        };
        Ok((policy_loss.report, flow_value))
    }

    fn record_params(&self, tape: &mut Tape) -> Handles {
        let pv = self.state.policy.record(tape);
        let mut policy: Vec<Var> = pv.net.vars().to_vec();
        let mut policy_names: Vec<String> = (0..6).map(|j| format!("policy.{j}")).collect();
        if let Some(l) = &pv.langevin {
            policy.extend(l.vars());
            policy_names.extend((0..6).map(|j| format!("langevin.{j}")));
        }
        let fv = self.state.flow.as_ref().map(|f| f.record(tape));
        let flow_net = fv.as_ref().and_then(|f| f.correction.as_ref()).map(|c| c.vars().to_vec()).unwrap_or_default();
        let beta = fv.as_ref().and_then(|f| f.raw);
        Handles { log_z: pv.log_z, policy, policy_names, flow_net, beta, policy_vars: pv, flow_vars: fv }
    }

    fn record_losses(
        &self,
        tape: &mut Tape,
        h: &Handles,
        batch: &Batch<P::State>,
    ) -> Result<(RecordedLoss, Option<RecordedLoss>)> {
        let policy_loss = match self.config.policy_loss {
            PolicyLoss::Tb => {
                record_tb(tape, &self.process, &h.policy_vars, &batch.trajs, &batch.weights, self.config.residual_cap)?
            }
            PolicyLoss::Lv => record_lv(tape, &self.process, &h.policy_vars, &batch.trajs)?,
        };
        let flow_loss = match (&self.state.flow, &h.flow_vars) {
            (Some(flow), Some(fv)) => {
                let terms = PolicyTerms::Detached { log_z: self.state.policy.log_z };
                let uniform = uniform_weights(batch.trajs.len());
                Some(match self.config.flow_loss {
                    FlowLoss::SubtbChunk => {
                        record_subtb_chunk(tape, &self.process, terms, (flow, fv), &batch.trajs, &uniform, self.config.chunk)?
                    }
                    FlowLoss::SubtbLambda => record_subtb_lambda(
                        tape,
                        &self.process,
                        terms,
                        (flow, fv),
                        &batch.trajs,
                        &uniform,
                        self.config.subtb_lambda,
                    )?,
                })
            }
            _ => None,
        };
        Ok((policy_loss, flow_loss))
    }

    /// Gradient norms of each group under each loss on `trajs`, without updating.
    pub fn group_gradients(&self, trajs: &[Trajectory<P::State>]) -> Result<GroupGrads> {
        let batch = Batch { trajs: trajs.to_vec(), weights: uniform_weights(trajs.len()), drawn: None, inserted: None };
        let mut tape = Tape::new();
        let h = self.record_params(&mut tape);
        let (pl, fl) = self.record_losses(&mut tape, &h, &batch)?;
        let mut policy_vars = h.policy.clone();
        policy_vars.push(h.log_z);
        let mut flow_vars = h.flow_net.clone();
        flow_vars.extend(h.beta);
        let norm = |g: &Gradients, vars: &[Var]| vars.iter().filter_map(|&v| g.wrt(v)).map(Tensor::sq_norm).sum::<f64>();
        let gp = tape.backward(pl.total)?;
        let mut out = GroupGrads {
            policy_loss_on_policy: norm(&gp, &policy_vars),
            policy_loss_on_flow: norm(&gp, &flow_vars),
            ..GroupGrads::default()
        };
        if let Some(fl) = fl {
            let gf = tape.backward(fl.total)?;
            out.flow_loss_on_policy = norm(&gf, &policy_vars);
            out.flow_loss_on_flow = norm(&gf, &flow_vars);
        }
        Ok(out)
    }
}

struct Handles {
    log_z: Var,
    policy: Vec<Var>,
    policy_names: Vec<String>,
    flow_net: Vec<Var>,
    beta: Option<Var>,
    policy_vars: crate::process::PolicyVars,
    flow_vars: Option<crate::process::FlowVars>,
}

fn collect(tape: &Tape, g: &Gradients, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| {
            let [r, c] = tape.value(v).shape();
            g.wrt_or_zeros(v, r, c)
        })
        .collect()
}

/// Inserts the entries with a finite weight; returns the index of the first one.
fn insert_finite<S: Clone>(
    buf: &mut ReplayBuffer<S>,
    states: Vec<S>,
    log_w: &[f64],
    log_r: &[f64],
    epoch: usize,
    provenance: Provenance,
) -> Result<usize> {
    let keep: Vec<usize> = (0..states.len()).filter(|&j| log_w[j].is_finite()).collect();
    if keep.len() < states.len() {
        debug!("epoch {epoch}: {} zero-weight states not inserted", states.len() - keep.len());
    }
    let w: Vec<f64> = keep.iter().map(|&j| log_w[j]).collect();
    let r: Vec<f64> = keep.iter().map(|&j| log_r[j]).collect();
    let mut states: Vec<Option<S>> = states.into_iter().map(Some).collect();
    let kept: Vec<S> = keep.iter().map(|&j| states[j].take().expect("indices are distinct")).collect();
    let count = kept.len();
    buf.insert_batch(kept, &w, &r, epoch, provenance)?;
    Ok(buf.len() - count)
}

fn init_optimizers(config: &TrainConfig, policy: &PolicyParams, flow: Option<&FlowParams>) -> Optimizers {
    let mut shapes: Vec<[usize; 2]> = policy.net.tensors().iter().map(|t| t.shape()).collect();
    if let Some(l) = &policy.langevin {
        shapes.extend(l.tensors().iter().map(|t| t.shape()));
    }
    let clip = config.clip_norm;
    Optimizers {
        policy: AdamState::new(config.lr_policy, &shapes).with_clip(clip),
        log_z: AdamState::new(config.lr_log_z, &[[1, 1]]).with_clip(clip),
        flow_net: flow.and_then(|f| f.correction.as_ref()).map(|c| {
            let shapes: Vec<[usize; 2]> = c.tensors().iter().map(|t| t.shape()).collect();
            AdamState::new(config.lr_flow, &shapes).with_clip(clip)
        }),
        beta: flow
            .filter(|f| f.schedule == BetaSchedule::Learnt)
            .map(|f| AdamState::new(config.lr_beta, &[[1, f.raw.len()]]).with_clip(clip)),
    }
}

/// Writes epoch records as CSV with a fixed header.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        MetricsWriter { inner: csv::Writer::from_writer(out) }
    }

    /// A writer that continues an existing file and so omits the header.
    pub fn appending(out: W) -> Self {
        MetricsWriter { inner: csv::WriterBuilder::new().has_headers(false).from_writer(out) }
    }

    pub fn write(&mut self, rec: &EpochRecord) -> Result<()> {
        self.inner.serialize(rec)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 9] =
    ["epoch", "mode", "loss_tb", "loss_subtb", "lambda_star", "ess_mean", "log_z_hat", "log_z_theta", "wall_ms"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ProcessConfig;
    use crate::process::NoiseSchedule;
    use crate::targets::TargetConfig;

    fn gaussian_config(algo: Algo, epochs: usize) -> TrainConfig {
        TrainConfig {
            algo,
            process: ProcessConfig::Diffusion {
                target: TargetConfig { name: "gaussian".into(), dim: Some(1), seed: 0, log_z: 0.0 },
                sigma: 1.0,
                noise: NoiseSchedule::Constant { rate: 3.0 },
                langevin: false,
                grad_clip: 100.0,
                drift_scale: 1.0,
            },
            n_epoch: epochs,
            batch_size: 64,
            steps: 4,
            chunk: 2,
            buffer_capacity: 1024,
            hidden: 16,
            flow_hidden: Some(8),
            ..TrainConfig::desk()
        }
    }

    fn trainer(cfg: TrainConfig) -> Trainer<crate::process::Diffusion> {
        let p = cfg.build_diffusion().unwrap();
        Trainer::new(cfg, p).unwrap()
    }

    #[test]
    fn on_policy_schedule() {
        let t = trainer(TrainConfig { off_policy_ratio: 3, ..gaussian_config(Algo::Iwt, 1) });
        let on: Vec<bool> = (1..=6).map(|i| t.is_on_policy_epoch(i)).collect();
        assert_eq!(on, vec![false, false, true, false, false, true]);
        let t = trainer(gaussian_config(Algo::OnPolicy, 1));
        assert!((1..=4).all(|i| t.is_on_policy_epoch(i)));
    }

    #[test]
    fn every_algorithm_runs_and_records() {
        for algo in [Algo::OnPolicy, Algo::Iwt, Algo::Smc, Algo::Replay, Algo::Combined] {
            let mut t = trainer(gaussian_config(algo, 4));
            let recs = t.train().unwrap();
            assert_eq!(recs.len(), 4);
            assert_eq!(recs.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
            assert!(recs.iter().all(|r| r.loss_tb.is_finite()));
            assert_eq!(recs[1].mode, EpochMode::OnPolicy);
            assert_eq!(recs[0].loss_subtb.is_some(), algo.uses_flows());
        }
    }

    #[test]
    fn replay_with_empty_buffer_falls_back() {
        let mut t = trainer(gaussian_config(Algo::Replay, 3));
        let recs = t.train().unwrap();
        assert_eq!(recs[0].mode, EpochMode::OnPolicy);
        assert_eq!(recs[2].mode, EpochMode::Replay);
    }

    #[test]
    fn buffer_epochs_do_not_roll_out() {
        let mut t = trainer(gaussian_config(Algo::Replay, 3));
        t.step().unwrap();
        t.step().unwrap();
        let before = t.forward_rollouts();
        let rec = t.step().unwrap();
        assert_eq!(rec.mode, EpochMode::Replay);
        assert_eq!(t.forward_rollouts(), before);
    }

    #[test]
    fn first_combined_epoch_draws_from_its_own_batch() {
        let mut t = trainer(gaussian_config(Algo::Combined, 1));
        t.step().unwrap();
        let buf = t.buffer().unwrap();
        assert!(buf.entries().all(|e| e.provenance == Provenance::Smc && e.batch_id == 0));
    }

    #[test]
    fn uniform_branch_is_the_batch_mean() {
        let mut t = trainer(TrainConfig { off_policy_ratio: 1, ..gaussian_config(Algo::Iwt, 1) });
        let mut rng = t.epoch_rng(1);
        let trajs = sample_forward(&t.process, t.policy(), 64, 0.0, &mut rng).unwrap();
        let log_z = t.policy().log_z;
        let want = mean(&trajs.iter().map(|tr| crate::objectives::tb_loss(tr, log_z)).collect::<Vec<_>>());
        let rec = t.step().unwrap();
        assert!((rec.loss_tb - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn mixed_gradients_are_separated() {
        let mut t = trainer(gaussian_config(Algo::Smc, 2));
        t.train().unwrap();
        let mut rng = t.epoch_rng(99);
        let trajs = sample_forward(&t.process, t.policy(), 16, 0.0, &mut rng).unwrap();
        let g = t.group_gradients(&trajs).unwrap();
        assert!(g.policy_loss_on_policy > 0.0 && g.flow_loss_on_flow > 0.0);
        assert_eq!(g.policy_loss_on_flow, 0.0);
        assert_eq!(g.flow_loss_on_policy, 0.0);
    }

    #[test]
    fn seeds_fix_the_trace() {
        let a = trainer(gaussian_config(Algo::Combined, 6)).train().unwrap();
        let b = trainer(gaussian_config(Algo::Combined, 6)).train().unwrap();
        assert_eq!(a, b);
        let c = trainer(TrainConfig { seed: 1, ..gaussian_config(Algo::Combined, 6) }).train().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn loss_priority_refreshes_drawn_entries() {
        let mut t = trainer(TrainConfig { priority: Priority::Loss, ..gaussian_config(Algo::Replay, 4) });
        t.train().unwrap();
        assert!(t.buffer().unwrap().entries().all(|e| e.loss.is_some()));
    }

    #[test]
    fn metrics_header_is_fixed() {
        let mut w = MetricsWriter::new(Vec::new());
        let mut t = trainer(gaussian_config(Algo::Smc, 1));
        w.write(&t.step().unwrap()).unwrap();
        w.flush().unwrap();
        let text = String::from_utf8(w.inner.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
    }
}
