//! Variable splitting `rho = z` with an L1 prox on `z` and box projection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{canonical_weights, initial_larmor, objective, pack_grad, project, single_pixel_amplitude, unpack, Finish};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, OperatorKind, Spectrum};
use crate::neural::{adamw_step, AdamConfig, AdamState};
use crate::objective::{LossBreakdown, LossWeights};
use crate::result::{Method, SolverResult, TraceEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    pub mu: f64,
    pub l1: f64,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub outer_cycles: usize,
    pub tol: f64,
    /// Box ceiling as a multiple of the single-pixel amplitude implied by the observed energy.
    pub box_factor: f64,
    /// Smooth part of the objective minimized in the primal step.
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub init: f64,
    /// Fresh inner optimizer moments at every outer cycle.
    pub reset_inner: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            mu: 1e-3,
            l1: 1e-2,
            inner_lr: 5e-3,
            inner_steps: 30,
            outer_cycles: 200,
            tol: 1e-3,
            box_factor: 10.0,
            weights: LossWeights {
                l1_sparsity: 0.0,
                ..canonical_weights()
            },
            adam: AdamConfig {
                weight_decay: 0.0,
                clip: Some(1.0),
                ..AdamConfig::default()
            },
            init: 0.1,
            reset_inner: false,
        }
    }
}

impl AdmmConfig {
    pub fn with_epochs_scale(mut self, factor: f64) -> Self {
        self.outer_cycles = ((self.outer_cycles as f64 * factor).round() as usize).max(1);
        self
    }
}

/// `sign(v) max(|v| - t, 0)`.
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

pub fn run_admm(obs: &Spectrum, model: &ForwardModel, op: OperatorKind, config: &AdmmConfig, seed: u64) -> Result<SolverResult> {
    let start = Instant::now();
    if !(config.mu > 0.0) || config.inner_steps == 0 || config.outer_cycles == 0 || !(config.init > 0.0) {
        return Err(Error::Config(format!("invalid ADMM configuration {config:?}")));
    }
    let obj = objective(model, op, obs, &config.weights)?;
    let rho_max = config.box_factor * single_pixel_amplitude(obs, model, op)?;
    let thresh = config.l1 / config.mu;
    let shape = model.geometry().shape();
    let n = shape.0 * shape.1;
    let mut x: Vec<f64> = std::iter::repeat_n(config.init, n).chain(std::iter::repeat_n(initial_larmor(), n)).collect();
    let mut z: Vec<f64> = x[..n].iter().map(|v| soft_threshold(*v, thresh).clamp(0.0, rho_max)).collect();
    let mut u: Vec<f64> = vec![0.0; n];
    let mut adam = AdamState::new(2 * n);
    let mut trace = Vec::with_capacity(config.outer_cycles);
    let mut residuals = Vec::with_capacity(config.outer_cycles);
    let mut converged = false;
    let mut cycles = 0;
    for cycle in 1..=config.outer_cycles {
        cycles = cycle;
        if config.reset_inner {
            adam = AdamState::new(2 * n);
        }
        let mut last = LossBreakdown::default();
        for _ in 0..config.inner_steps {
            let (rho, omega) = unpack(&x, shape);
            let (loss, g) = obj.value_and_grad(&rho, &omega)?;
            let mut grad = pack_grad(&g.rho, &g.omega);
            for i in 0..n {
                grad[i] += config.mu * (x[i] - z[i] + u[i]);
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("ADMM gradient in cycle {cycle}")));
            }
            last = loss;
            adamw_step(&mut adam, &mut x, &grad, config.inner_lr, &config.adam);
            project(&mut x, n);
        }
        for i in 0..n {
            z[i] = soft_threshold(x[i] + u[i], thresh).clamp(0.0, rho_max);
            u[i] += x[i] - z[i];
        }
        let res = (0..n).map(|i| (x[i] - z[i]).abs()).fold(0.0, f64::max);
        residuals.push(res);
        trace.push(TraceEntry {
            iteration: cycle,
            stage: None,
            lr: config.inner_lr,
            loss: last,
        });
        if res < config.tol {
            converged = true;
            break;
        }
    }
    let (rho, omega) = unpack(&x, shape);
    if rho.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("ADMM primal density collapsed to zero".into()));
    }
    let mut info = serde_json::Map::new();
    info.insert("primal_residual".into(), residuals.clone().into());
    info.insert("final_residual".into(), residuals.last().copied().unwrap_or(f64::NAN).into());
    info.insert("max_cycles_reached".into(), (!converged).into());
    info.insert("rho_max".into(), rho_max.into());
    info.insert("threshold".into(), thresh.into());
    Finish {
        method: Method::Admm,
        operator: op,
        obs,
        model,
        trace,
        iterations: cycles,
        start,
        seed,
        config: serde_json::to_value(config)?,
        info,
    }
    .build(rho, omega)
}
