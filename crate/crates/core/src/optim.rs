//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorBuf;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<TensorBuf>,
    pub v: Vec<TensorBuf>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[&TensorBuf]) -> Self {
        let zeros = || params.iter().map(|p| TensorBuf::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Names excluded from weight decay: norms, biases, class token, positional embeddings.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.contains("norm")
        || name == "cls_token"
        || name == "pos_embed")
}

/// One AdamW update:
///
/// ```text
/// m ← β1·m + (1−β1)·g
/// v ← β2·v + (1−β2)·g²
/// θ ← θ − lr·( m̂ / (√v̂ + eps) + λ·θ )
/// ```
///
/// with `m̂ = m / (1 − β1^t)`, `v̂ = v / (1 − β2^t)`. `λ` applies only where
/// `decay_mask` is true.
pub fn adamw_step(
    params: &mut [&mut TensorBuf],
    grads: &[TensorBuf],
    decay_mask: &[bool],
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay_mask.len() {
        return Err(Error::Shape(format!(
            "adamw: {} params, {} grads, {} moments, {} mask entries",
            params.len(),
            grads.len(),
            state.m.len(),
            decay_mask.len()
        )));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.check_same_shape(g, "adamw grad")?;
        p.check_same_shape(&state.m[i], "adamw moment")?;
        g.ensure_finite(&format!("gradient of parameter {i}"))?;
    }

    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let lambda = if decay_mask[i] { weight_decay } else { 0.0 };
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, theta) in p.data_mut().iter_mut().enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *theta -= lr * (mhat / (vhat.sqrt() + eps) + lambda * *theta);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    /// May be fractional; converted to steps by rounding.
    pub warmup_epochs: f64,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub floor_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.5e-4,
            warmup_epochs: 15.0,
            total_epochs: 300,
            steps_per_epoch: 1,
            floor_lr: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs as f64) {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be in [0, total_epochs={})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.floor_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_epochs * self.steps_per_epoch as f64).round() as usize
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `floor_lr` at the final step.
pub fn lr_at(step: usize, schedule: &ScheduleConfig) -> Result<f64> {
    schedule.validate()?;
    let total = schedule.total_steps();
    if step > total {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule length {total}"
        )));
    }
    let warm = schedule.warmup_steps().min(total - 1);
    if step < warm {
        return Ok(schedule.base_lr * step as f64 / warm as f64);
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    let span = schedule.base_lr - schedule.floor_lr;
    Ok(schedule.floor_lr + 0.5 * span * (1.0 + (std::f64::consts::PI * progress).cos()))
}
