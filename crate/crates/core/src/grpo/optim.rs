//! Adaptive-moment optimizer with decoupled weight decay and global
//! gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmodel::{GradientBuffer, PolicyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 clip applied before the moment update; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}.{name}");
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(field("learning_rate"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(field("weight_decay"), "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config(field("beta1"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(field("beta2"), "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(field("eps"), "must be positive"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::config(field("max_grad_norm"), "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Norm of the raw gradient, before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One in-place update of `params`.
pub fn optimizer_step(
    state: &mut AdamWState,
    params: &mut PolicyParams,
    grad: &GradientBuffer,
    cfg: &AdamWConfig,
) -> Result<StepStats> {
    let n = params.len();
    if grad.0.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::invalid(format!(
            "optimizer shape mismatch: params {n}, grad {}, state {}",
            grad.0.len(),
            state.m.len()
        )));
    }
    if grad.0.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("optimizer_step", "non-finite gradient"));
    }
    let grad_norm = grad.norm();
    let scale = match cfg.max_grad_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let lr = cfg.learning_rate;
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(&grad.0)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g * scale;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * cfg.weight_decay * *p;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if params.values().iter().any(|p| !p.is_finite()) {
        return Err(Error::numeric("optimizer_step", "non-finite parameter after update"));
    }
    Ok(StepStats {
        grad_norm,
        clipped: scale < 1.0,
    })
}
