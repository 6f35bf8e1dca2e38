//! AdamW with decoupled weight decay, global-norm gradient clipping and a
//! linear-warmup cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tensor::ParamSet;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-5;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.02;

/// Moment buffers and hyperparameters for [`adamw_step`].
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over every parameter. Gradients are left in place.
pub fn adamw_step(params: &mut ParamSet, state: &mut OptimizerState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} tensors, parameter set has {}",
            state.m.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        if params.get(id).grad().is_none() {
            return Err(Error::MissingGradient(params.name(id).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (lr, wd, b1, b2, eps) = (state.lr, state.weight_decay, state.beta1, state.beta2, state.eps);
    for (i, (_, tensor)) in params.iter_mut().enumerate() {
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            *p -= lr * wd * *p;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, min_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup_steps {warmup_steps} must be < total_steps {total_steps}"
            )));
        }
        if !(min_lr <= base_lr) {
            return Err(Error::InvalidArgument(format!("min_lr {min_lr} > base_lr {base_lr}")));
        }
        Ok(Self {
            base_lr,
            min_lr,
            warmup_steps,
            total_steps,
        })
    }
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> Result<f64> {
    let LrSchedule {
        base_lr,
        min_lr,
        warmup_steps,
        total_steps,
    } = *schedule;
    if step > total_steps {
        return Err(Error::OutOfRange {
            index: step as usize,
            len: total_steps as usize + 1,
        });
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
