use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam optimiser state for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Global gradient-norm cap for the group; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

/// What a single optimiser step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamState {
    pub fn new(lr: f64, shapes: &[[usize; 2]]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect(),
            clip_norm: None,
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    /// Applies one bias-corrected Adam update. `names` label parameters in errors.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<StepInfo> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::input("adam: parameter, gradient and state counts differ"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::input(format!("adam: shape mismatch for {}", label(names, i))));
            }
            if !g.all_finite() {
                return Err(Error::Training {
                    epoch: self.t as usize,
                    message: format!("non-finite gradient for parameter {}", label(names, i)),
                });
            }
        }
        let grad_norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let factor = match self.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let g = grads[i].data[j] * factor;
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * g;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * g * g;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(StepInfo { grad_norm, clipped: factor < 1.0 })
    }
}

fn label(names: &[String], i: usize) -> String {
    names.get(i).cloned().unwrap_or_else(|| format!("#{i}"))
}
