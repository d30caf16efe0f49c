//! Versioned JSON checkpoints of a training run.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::process::Process;
use crate::trainer::{Trainer, TrainerState};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Random state of a run. Epoch `i` draws from stream `i` of the seeded
/// generator, so the seed and the next epoch determine every future draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: DeserializeOwned"))]
pub struct Checkpoint<S> {
    pub version: u32,
    pub config: TrainConfig,
    pub rng: RngState,
    pub state: TrainerState<S>,
}

impl<S: Clone + Serialize + DeserializeOwned> Checkpoint<S> {
    pub fn from_trainer<P: Process<State = S>>(trainer: &Trainer<P>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: trainer.config.clone(),
            rng: RngState { seed: trainer.config.seed, next_stream: trainer.epoch() as u64 + 1 },
            state: trainer.state.clone(),
        }
    }

    pub fn into_trainer<P: Process<State = S>>(self, process: P) -> Result<Trainer<P>> {
        if self.rng.seed != self.config.seed || self.rng.next_stream != self.state.epoch as u64 + 1 {
            return Err(Error::input("checkpoint random state is inconsistent with its epoch"));
        }
        Trainer::from_state(self.config, process, self.state)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value = parse_versioned(text)?;
        serde_json::from_value(value).map_err(|e| Error::Parse { offset: 0, message: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Reads only the configuration of a checkpoint, to decide its state type.
pub fn peek_config(text: &str) -> Result<TrainConfig> {
    let mut value = parse_versioned(text)?;
    let config = value.get_mut("config").map(Value::take).ok_or_else(|| Error::input("checkpoint has no config"))?;
    serde_json::from_value(config).map_err(|e| Error::Parse { offset: 0, message: e.to_string() })
}

fn parse_versioned(text: &str) -> Result<Value> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::parse_json(text, e))?;
    let found = value
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::input("checkpoint has no version field"))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(Error::Version { found: found as u32, expected: CHECKPOINT_VERSION });
    }
    Ok(value)
}
