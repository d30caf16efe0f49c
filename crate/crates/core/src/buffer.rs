//! Importance-weighted replay buffer of terminal states.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logmeanexp, logsumexp};
use crate::process::Process;
use crate::smc::{adaptive_iw_tempering, resample_indices, ResampleScheme, SegmentRecord};

/// How terminal states are prioritised when drawing from the buffer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    /// Tempered combined importance weights.
    #[default]
    Iw,
    Uniform,
    /// Tempered rewards.
    Reward,
    /// Last recorded training loss.
    Loss,
}

/// How a batch was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OnPolicy,
    Smc,
}

/// `log Z_hat` of an on-policy batch: `log mean w`.
pub fn batch_z_ais(log_w: &[f64]) -> f64 {
    logmeanexp(log_w)
}

/// `log Z_hat` of an SMC batch from its segment records.
pub fn batch_z_smc(segments: &[SegmentRecord]) -> f64 {
    segments
        .iter()
        .map(|s| {
            let v: Vec<f64> = s.log_w_start.iter().zip(&s.log_increment).map(|(a, b)| a + b).collect();
            logsumexp(&v)
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry<S> {
    pub state: S,
    /// `log(K Z_hat W)` of the entry within its batch.
    pub log_weight: f64,
    pub batch_id: u64,
    pub epoch: usize,
    pub log_r: f64,
    pub loss: Option<f64>,
    pub provenance: Provenance,
}

/// Terminal states drawn from the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub indices: Vec<usize>,
    /// Tempering exponent applied to the priorities (1 for uniform draws).
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<S> {
    capacity: usize,
    entries: VecDeque<BufferEntry<S>>,
    next_batch: u64,
}

impl<S: Clone> ReplayBuffer<S> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer capacity must be positive"));
        }
        Ok(ReplayBuffer { capacity, entries: VecDeque::new(), next_batch: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &BufferEntry<S>> {
        self.entries.iter()
    }

    pub fn get(&self, index: usize) -> Option<&BufferEntry<S>> {
        self.entries.get(index)
    }

    /// Appends a batch, evicting whole batches from the front until it fits.
    pub fn insert_batch(
        &mut self,
        states: Vec<S>,
        log_w: &[f64],
        log_r: &[f64],
        epoch: usize,
        provenance: Provenance,
    ) -> Result<u64> {
        if states.len() > self.capacity {
            return Err(Error::config(format!(
                "batch of {} exceeds the buffer capacity of {}",
                states.len(),
                self.capacity
            )));
        }
        if log_w.len() != states.len() || log_r.len() != states.len() {
            return Err(Error::input("buffer batch needs one weight and one reward per state"));
        }
        if let Some(v) = log_w.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
            return Err(Error::input(format!("buffer weight {v} is not a valid log-weight")));
        }
        while self.entries.len() + states.len() > self.capacity {
            let oldest = self.entries.front().map(|e| e.batch_id).expect("buffer over capacity is non-empty");
            while self.entries.front().is_some_and(|e| e.batch_id == oldest) {
                self.entries.pop_front();
            }
        }
        let id = self.next_batch;
        self.next_batch += 1;
        for ((state, &w), &r) in states.into_iter().zip(log_w).zip(log_r) {
            self.entries.push_back(BufferEntry { state, log_weight: w, batch_id: id, epoch, log_r: r, loss: None, provenance });
        }
        Ok(id)
    }

    /// Draws `count` entry indices with replacement.
    ///
    /// `Iw` and `Reward` priorities are tempered so that their ESS over the
    /// whole buffer is at least `gamma |B|`. `Loss` uses the last recorded
    /// loss; entries never trained on get the largest recorded loss.
    pub fn draw<R: Rng + ?Sized>(&self, count: usize, gamma: f64, mode: Priority, rng: &mut R) -> Result<Draw> {
        if self.entries.is_empty() {
            return Err(Error::contract("cannot draw from an empty buffer"));
        }
        let (log_p, lambda) = match mode {
            Priority::Iw | Priority::Reward => {
                let raw: Vec<f64> = self
                    .entries
                    .iter()
                    .map(|e| if mode == Priority::Iw { e.log_weight } else { e.log_r })
                    .collect();
                let lambda = adaptive_iw_tempering(&raw, gamma)?;
                let p = raw.iter().map(|&v| if v == f64::NEG_INFINITY { v } else { lambda * v }).collect();
                (p, lambda)
            }
            Priority::Uniform => (vec![0.0; self.entries.len()], 1.0),
            Priority::Loss => {
                let max = self.entries.iter().filter_map(|e| e.loss).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::capability("loss-prioritised draws need recorded losses"));
                }
                let p = self.entries.iter().map(|e| e.loss.unwrap_or(max).ln()).collect();
                (p, 1.0)
            }
        };
        let indices = resample_indices(&log_p, count, ResampleScheme::Multinomial, rng)?;
        Ok(Draw { indices, lambda })
    }

    pub fn states(&self, indices: &[usize]) -> Vec<S> {
        indices.iter().map(|&i| self.entries[i].state.clone()).collect()
    }

    /// Records the latest per-trajectory loss of drawn entries.
    pub fn update_losses(&mut self, indices: &[usize], losses: &[f64]) -> Result<()> {
        if indices.len() != losses.len() {
            return Err(Error::input("one loss per drawn index expected"));
        }
        for (&i, &l) in indices.iter().zip(losses) {
            let e = self
                .entries
                .get_mut(i)
                .ok_or_else(|| Error::input(format!("buffer index {i} out of range")))?;
            e.loss = Some(l);
        }
        Ok(())
    }

    /// Writes state columns, log weight, log reward and batch id as CSV.
    pub fn write_csv<P: Process<State = S>, W: Write>(&self, process: &P, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = process.state_columns();
        header.extend(["log_weight", "log_r", "batch_id", "epoch"].map(String::from));
        w.write_record(&header)?;
        for e in &self.entries {
            let mut row = process.state_fields(&e.state);
            row.push(e.log_weight.to_string());
            row.push(e.log_r.to_string());
            row.push(e.batch_id.to_string());
            row.push(e.epoch.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
