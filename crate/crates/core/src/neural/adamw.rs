//! AdamW with global-norm clipping and per-stage cosine learning-rate decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::mlp::global_norm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One step in the order clip, moment update, decoupled weight decay.
/// Returns the gradient norm before clipping.
pub fn adamw_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) -> f64 {
    let norm = global_norm(grad);
    let scale = match cfg.clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i] * scale;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        let p = params[i];
        params[i] = p - lr * mhat / (vhat.sqrt() + cfg.eps) - lr * cfg.weight_decay * p;
    }
    norm
}

/// `eta_min + (eta_base - eta_min) (1 + cos(pi t / T)) / 2` with `eta_min = 0.01 eta_base`.
pub fn cosine_lr(epoch: usize, total: usize, eta_base: f64) -> f64 {
    let eta_min = 0.01 * eta_base;
    let frac = if total == 0 { 1.0 } else { epoch.min(total) as f64 / total as f64 };
    eta_min + (eta_base - eta_min) * 0.5 * (1.0 + (PI * frac).cos())
}
