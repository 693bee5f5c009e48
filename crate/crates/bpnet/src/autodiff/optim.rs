//! AdamW with decoupled weight decay, plus global l2 gradient clipping.

use super::params::ParamSet;
use crate::{BpError, Result};

pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = params.entries().map(|p| p.data.len()).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over the trainable entries; `grads` is aligned with the
    /// parameter set (buffers receive empty slots that are skipped).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.entries_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = &grads[idx];
            if g.is_empty() {
                continue;
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(BpError::NonFinite {
                    what: format!("gradient of {} ({bad})", p.name),
                    step: self.step_count,
                });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -=
                    self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global l2 norm is at most `max_norm`.
/// Returns the norm after clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        max_norm
    } else {
        total
    }
}
