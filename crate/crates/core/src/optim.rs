//! AdamW with decoupled weight decay, and a cosine learning-rate schedule with linear warmup.

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{read_f64s, read_header, write_header, Gradients, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in field `{field}` at index {index}")]
    NonFiniteGradient { field: &'static str, index: usize },
    #[error("shape mismatch between parameters, gradients and optimizer state")]
    ShapeMismatch,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("negative learning rate {0}")]
    NegativeLearningRate(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &ModelParams) -> Self {
        Self { m: ModelParams::zeros(params.dims), v: ModelParams::zeros(params.dims), step: 0 }
    }

    /// Same header as the parameter checkpoint, then the step as u64 LE, then `m` and `v`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        write_header(&mut w, &self.m.dims)?;
        w.write_all(&self.step.to_le_bytes())?;
        for x in self.m.iter().chain(self.v.iter()) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let dims = read_header(&mut r)?;
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let step = u64::from_le_bytes(buf);
        let n = dims.param_count();
        let m = ModelParams::from_flat(dims, &read_f64s(&mut r, n)?)?;
        let v = ModelParams::from_flat(dims, &read_f64s(&mut r, n)?)?;
        Ok(Self { m, v, step })
    }
}

/// One AdamW update in place. Gradients are checked for finiteness before anything is
/// modified, so a failed call leaves params and state untouched.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(), OptimError> {
    if lr.is_nan() || lr < 0.0 {
        return Err(OptimError::NegativeLearningRate(lr));
    }
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(OptimError::ShapeMismatch);
    }
    for (field, values) in grads.fields() {
        if let Some(index) = values.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient { field, index });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let iter = params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for ((theta, &g), (m, v)) in iter {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *theta -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *theta);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(0.0 <= self.min_lr && self.min_lr <= self.peak_lr) {
            return Err(OptimError::InvalidSchedule(format!(
                "need 0 <= min_lr ({}) <= peak_lr ({})",
                self.min_lr, self.peak_lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(OptimError::InvalidSchedule(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Learning rate at update `step` (0-based). Warmup reaches `peak_lr` on its last
    /// step; steps past `total_steps` clamp to `min_lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.min_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}
