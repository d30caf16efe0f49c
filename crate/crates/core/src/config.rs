//! Training configuration: named profiles, JSON loading and validation.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::buffer::Priority;
use crate::error::{Error, Result};
use crate::process::{BetaSchedule, Diffusion, DiffusionSchedule, DiscreteReward, NoiseSchedule, PrependAppend};
use crate::smc::{ResampleScheme, SmcSettings};
use crate::targets::{Target, TargetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    /// Forward rollouts with uniform weights every epoch.
    OnPolicy,
    /// Importance-weighted training with tempered AIS weights.
    Iwt,
    /// SMC as the off-policy behaviour policy.
    Smc,
    /// Importance-weighted experience replay.
    Replay,
    /// SMC feeding the importance-weighted replay buffer.
    Combined,
}

impl Algo {
    pub fn uses_flows(self) -> bool {
        matches!(self, Algo::Smc | Algo::Combined)
    }

    pub fn uses_buffer(self) -> bool {
        matches!(self, Algo::Replay | Algo::Combined)
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| Error::config(format!("algo: unknown algorithm '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyLoss {
    Tb,
    Lv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowLoss {
    SubtbChunk,
    SubtbLambda,
}

/// The generative process and its target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessConfig {
    Diffusion {
        target: TargetConfig,
        sigma: f64,
        noise: NoiseSchedule,
        #[serde(default)]
        langevin: bool,
        #[serde(default = "default_grad_clip")]
        grad_clip: f64,
        #[serde(default = "default_drift_scale")]
        drift_scale: f64,
    },
    /// Strings over `vocab` of length equal to `steps`.
    PrependAppend { vocab: String, reward: String },
}

fn default_grad_clip() -> f64 {
    100.0
}

fn default_drift_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: String,
    pub algo: Algo,
    pub process: ProcessConfig,
    pub seed: u64,
    pub n_epoch: usize,
    /// On-policy epochs are those with `epoch mod I == 0`.
    pub off_policy_ratio: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub chunk: usize,
    pub kappa: f64,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub lr_policy: f64,
    pub lr_flow: f64,
    pub lr_log_z: f64,
    pub lr_beta: f64,
    pub hidden: usize,
    /// Width of the flow correction network; `None` trains the schedule only.
    pub flow_hidden: Option<usize>,
    pub beta_schedule: BetaSchedule,
    pub policy_loss: PolicyLoss,
    pub flow_loss: FlowLoss,
    pub subtb_lambda: f64,
    pub priority: Priority,
    pub resample: ResampleScheme,
    pub epsilon: f64,
    pub residual_cap: Option<f64>,
    pub clip_norm: Option<f64>,
    pub init_log_z: f64,
    pub checkpoint_every: usize,
    pub record_wall_time: bool,
}

impl TrainConfig {
    /// Defaults of the large-scale gradient-free setting.
    pub fn paper() -> Self {
        TrainConfig {
            profile: "paper".into(),
            algo: Algo::Combined,
            process: ProcessConfig::Diffusion {
                target: TargetConfig { name: "gmm40".into(), dim: Some(2), seed: 0, log_z: 0.0 },
                sigma: 20.0,
                noise: NoiseSchedule::Constant { rate: 3.0 },
                langevin: false,
                grad_clip: default_grad_clip(),
                drift_scale: 1.0,
            },
            seed: 0,
            n_epoch: 20_000,
            off_policy_ratio: 2,
            batch_size: 2000,
            steps: 64,
            chunk: 4,
            kappa: 0.2,
            gamma: 0.05,
            buffer_capacity: 200_000,
            lr_policy: 1e-3,
            lr_flow: 1e-3,
            lr_log_z: 1e-1,
            lr_beta: 1e-1,
            hidden: 256,
            flow_hidden: Some(64),
            beta_schedule: BetaSchedule::Learnt,
            policy_loss: PolicyLoss::Tb,
            flow_loss: FlowLoss::SubtbChunk,
            subtb_lambda: 1.0,
            priority: Priority::Iw,
            resample: ResampleScheme::Multinomial,
            epsilon: 0.0,
            residual_cap: None,
            clip_norm: Some(10.0),
            init_log_z: 0.0,
            checkpoint_every: 0,
            record_wall_time: false,
        }
    }

    /// Single-core desk scale: shorter chains, smaller batches and networks.
    pub fn desk() -> Self {
        TrainConfig {
            profile: "desk".into(),
            process: ProcessConfig::Diffusion {
                target: TargetConfig { name: "gmm40".into(), dim: Some(2), seed: 0, log_z: 0.0 },
                sigma: 20.0,
                noise: NoiseSchedule::Linear { min_rate: 0.05, max_rate: 6.0 },
                langevin: false,
                grad_clip: default_grad_clip(),
                drift_scale: 20.0,
            },
            n_epoch: 3000,
            batch_size: 512,
            steps: 32,
            buffer_capacity: 50_000,
            hidden: 64,
            flow_hidden: Some(64),
            ..TrainConfig::paper()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(TrainConfig::paper()),
            "desk" => Ok(TrainConfig::desk()),
            other => Err(Error::config(format!("profile: unknown profile '{other}' (expected paper or desk)"))),
        }
    }

    /// Parses a JSON object laid over the profile it names (default `paper`).
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::parse_json(text, e))?;
        let Value::Object(user) = user else {
            return Err(Error::config("configuration must be a JSON object"));
        };
        let profile = match user.get("profile") {
            None => "paper".to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::config("profile: must be a string")),
        };
        let base = serde_json::to_value(TrainConfig::profile(&profile)?)?;
        let Value::Object(mut merged) = base else { unreachable!("config serialises to an object") };
        let unknown: BTreeSet<&String> = user.keys().filter(|k| !merged.contains_key(*k)).collect();
        if !unknown.is_empty() {
            let list: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            return Err(Error::config(format!("unknown keys: {}", list.join(", "))));
        }
        for (k, v) in user {
            overlay(&mut merged, k, v);
        }
        let cfg: TrainConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainConfig::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_policy", self.lr_policy),
            ("lr_flow", self.lr_flow),
            ("lr_log_z", self.lr_log_z),
            ("lr_beta", self.lr_beta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name}: learning rates must be positive, got {v}")));
            }
        }
        if self.off_policy_ratio == 0 {
            return Err(Error::config("off_policy_ratio: must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps: must be at least 1"));
        }
        if self.chunk == 0 || self.steps % self.chunk != 0 {
            return Err(Error::config(format!("chunk: {} does not divide steps = {}", self.chunk, self.steps)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size: must be at least 1"));
        }
        if self.policy_loss == PolicyLoss::Lv && self.batch_size < 2 {
            return Err(Error::config("batch_size: the log-variance loss needs at least 2"));
        }
        if self.hidden == 0 || self.flow_hidden == Some(0) {
            return Err(Error::config("hidden: network widths must be positive"));
        }
        for (name, v) in [("kappa", self.kappa), ("gamma", self.gamma), ("epsilon", self.epsilon)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name}: {v} outside [0, 1]")));
            }
        }
        if !(self.subtb_lambda > 0.0) {
            return Err(Error::config("subtb_lambda: must be positive"));
        }
        if self.algo.uses_buffer() && self.buffer_capacity < self.batch_size {
            return Err(Error::config("buffer_capacity: must hold at least one batch"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm: must be positive"));
            }
        }
        if let Some(c) = self.residual_cap {
            if !(c > 0.0) {
                return Err(Error::config("residual_cap: must be positive"));
            }
        }
        if self.algo.uses_flows() && self.beta_schedule != BetaSchedule::Learnt && self.flow_hidden.is_none() {
            // A fixed schedule without a correction has nothing to learn; allowed as an ablation.
            log::info!("flows have no trainable parameters under this configuration");
        }
        match &self.process {
            ProcessConfig::Diffusion { sigma, drift_scale, grad_clip, .. } => {
                if !(*sigma > 0.0) {
                    return Err(Error::config("process.sigma: must be positive"));
                }
                if !drift_scale.is_finite() || !(*grad_clip > 0.0) {
                    return Err(Error::config("process: drift_scale must be finite and grad_clip positive"));
                }
                if self.epsilon != 0.0 {
                    return Err(Error::capability("epsilon exploration applies to discrete processes only"));
                }
            }
            ProcessConfig::PrependAppend { vocab, .. } => {
                if vocab.is_empty() {
                    return Err(Error::config("process.vocab: must not be empty"));
                }
            }
        }
        Ok(())
    }

    pub fn smc_settings(&self) -> SmcSettings {
        SmcSettings {
            particles: self.batch_size,
            chunk: self.chunk,
            kappa: self.kappa,
            gamma: self.gamma,
            scheme: self.resample,
        }
    }

    pub fn build_diffusion(&self) -> Result<Diffusion> {
        let ProcessConfig::Diffusion { target, sigma, noise, langevin, grad_clip, drift_scale } = &self.process else {
            return Err(Error::config("process: not a diffusion configuration"));
        };
        let target = Target::from_config(target)?;
        let schedule = DiffusionSchedule::new(self.steps, *sigma, *noise)?;
        schedule.check_mixing()?;
        Ok(Diffusion::new(target, schedule).with_langevin(*langevin, *grad_clip)?.with_drift_scale(*drift_scale))
    }

    pub fn build_prepend_append(&self) -> Result<PrependAppend> {
        let ProcessConfig::PrependAppend { vocab, reward } = &self.process else {
            return Err(Error::config("process: not a prepend/append configuration"));
        };
        let vocab: Vec<char> = vocab.chars().collect();
        let reward = DiscreteReward::from_name(reward, &vocab)?;
        PrependAppend::new(vocab, self.steps, reward)
    }
}

fn overlay(base: &mut Map<String, Value>, key: String, value: Value) {
    match (base.get_mut(&key), value) {
        (Some(Value::Object(b)), Value::Object(v)) if same_kind(b, &v) => {
            for (k, x) in v {
                overlay(b, k, x);
            }
        }
        (_, v) => {
            base.insert(key, v);
        }
    }
}

/// Objects tagged with different `kind`s are replaced rather than merged.
fn same_kind(a: &Map<String, Value>, b: &Map<String, Value>) -> bool {
    match (a.get("kind"), b.get("kind")) {
        (Some(x), Some(y)) => x == y,
        _ => true,
    }
}
