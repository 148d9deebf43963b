//! Projected Adam descent on a free density and Larmor field.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{canonical_weights, initial_larmor, objective, pack_grad, project, unpack, Finish};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, OperatorKind, Spectrum};
use crate::neural::{adamw_step, AdamConfig, AdamState};
use crate::objective::LossWeights;
use crate::result::{Method, SolverResult, TraceEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TikhonovConfig {
    pub lr: f64,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub init: f64,
}

impl Default for TikhonovConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            epochs: 5000,
            adam: AdamConfig {
                weight_decay: 1e-5,
                clip: Some(1.0),
                ..AdamConfig::default()
            },
            weights: LossWeights {
                l2: 1e-3,
                ..canonical_weights()
            },
            init: 0.1,
        }
    }
}

impl TikhonovConfig {
    pub fn with_epochs_scale(mut self, factor: f64) -> Self {
        self.epochs = ((self.epochs as f64 * factor).round() as usize).max(1);
        self
    }
}

pub fn run_tikhonov(
    obs: &Spectrum,
    model: &ForwardModel,
    op: OperatorKind,
    config: &TikhonovConfig,
    seed: u64,
) -> Result<SolverResult> {
    let start = Instant::now();
    if !(config.init > 0.0) || !(config.lr > 0.0) || config.epochs == 0 {
        return Err(Error::Config(format!("invalid Tikhonov configuration {config:?}")));
    }
    let obj = objective(model, op, obs, &config.weights)?;
    let shape = model.geometry().shape();
    let n = shape.0 * shape.1;
    let mut x: Vec<f64> = std::iter::repeat_n(config.init, n).chain(std::iter::repeat_n(initial_larmor(), n)).collect();
    let mut adam = AdamState::new(2 * n);
    let mut trace = Vec::with_capacity(config.epochs);
    for t in 1..=config.epochs {
        let (rho, omega) = unpack(&x, shape);
        let (loss, g) = obj.value_and_grad(&rho, &omega)?;
        let grad = pack_grad(&g.rho, &g.omega);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Tikhonov gradient at epoch {t}")));
        }
        trace.push(TraceEntry {
            iteration: t,
            stage: None,
            lr: config.lr,
            loss,
        });
        adamw_step(&mut adam, &mut x, &grad, config.lr, &config.adam);
        project(&mut x, n);
    }
    let (rho, omega) = unpack(&x, shape);
    if rho.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("density collapsed to zero".into()));
    }
    Finish {
        method: Method::Tikhonov,
        operator: op,
        obs,
        model,
        trace,
        iterations: config.epochs,
        start,
        seed,
        config: serde_json::to_value(config)?,
        info: serde_json::Map::new(),
    }
    .build(rho, omega)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn zero_observation_is_degenerate() {
        let m = model(8);
        let obs = Spectrum::zeros(m.freqs.clone(), *m.geometry());
        let r = run_tikhonov(&obs, &m, OperatorKind::F2, &TikhonovConfig::default().with_epochs_scale(0.001), 0);
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn deterministic_and_nonnegative() {
        let (obs, m, _) = single_source(12, OperatorKind::F2, (4, 7));
        let cfg = TikhonovConfig {
            epochs: 30,
            ..TikhonovConfig::default()
        };
        let a = run_tikhonov(&obs, &m, OperatorKind::F2, &cfg, 1).unwrap();
        let b = run_tikhonov(&obs, &m, OperatorKind::F2, &cfg, 1).unwrap();
        assert_eq!(a.rho_hat, b.rho_hat);
        assert!(a.rho_hat.iter().all(|v| *v >= 0.0));
        assert!(a.omega_hat.iter().all(|v| (1.5..=2.5).contains(v)));
        assert_eq!(a.loss_trace.len(), 30);
    }
}
