//! Per-measurement multiscale training of the neural field.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, cosine_lr, AdamConfig, AdamState};
use super::encoding::EncoderConfig;
use super::field::{HeadConfig, NeuralField};
use super::mlp::MlpArch;
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, OperatorKind, Spectrum};
use crate::objective::{scale_correction, LossWeights, Objective, Stage};
use crate::result::{Method, Snapshot, SolverResult, TraceEntry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub resolution: usize,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSchedule {
    pub stages: Vec<StageSpec>,
    pub adam: AdamConfig,
    /// Fresh optimizer moments at every stage boundary.
    pub reset_optimizer: bool,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            stages: vec![
                StageSpec {
                    resolution: 32,
                    epochs: 3000,
                    lr: 1e-3,
                },
                StageSpec {
                    resolution: 64,
                    epochs: 7000,
                    lr: 5e-4,
                },
            ],
            adam: AdamConfig::default(),
            reset_optimizer: true,
        }
    }
}

impl TrainingSchedule {
    /// Multiplies every stage's epoch count, keeping at least one epoch.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        for st in &mut s.stages {
            st.epochs = ((st.epochs as f64 * factor).round() as usize).max(1);
        }
        s
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn validate(&self, full: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        for s in &self.stages {
            if s.epochs == 0 || !(s.lr > 0.0) || s.resolution == 0 || full % s.resolution != 0 {
                return Err(Error::Config(format!("invalid stage {s:?} for a {full}-pixel grid")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetmyConfig {
    pub arch: MlpArch,
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub schedule: TrainingSchedule,
    pub weights: LossWeights,
    pub detach_max: bool,
    /// Global epoch indices (1-based) at which the density is recorded.
    pub snapshot_at: Vec<usize>,
}

impl Default for NetmyConfig {
    fn default() -> Self {
        Self {
            arch: MlpArch::default(),
            encoder: EncoderConfig::default(),
            heads: HeadConfig::default(),
            schedule: TrainingSchedule::default(),
            weights: LossWeights::default(),
            detach_max: false,
            snapshot_at: Vec::new(),
        }
    }
}

impl NetmyConfig {
    pub fn with_epochs_scale(mut self, factor: f64) -> Self {
        self.schedule = self.schedule.scaled(factor);
        self
    }
}

/// Trains the field against `obs` and returns the scale-corrected result.
/// Stages coarser than the observation compare against a mean-pooled copy.
pub fn run_netmy(
    obs: &Spectrum,
    model: &ForwardModel,
    operator: OperatorKind,
    config: &NetmyConfig,
    seed: u64,
) -> Result<SolverResult> {
    let start = Instant::now();
    let geom = *model.geometry();
    if obs.geometry.shape() != geom.shape() {
        return Err(Error::Shape {
            expected: vec![geom.height, geom.width],
            got: vec![obs.geometry.height, obs.geometry.width],
        });
    }
    if geom.height != geom.width {
        return Err(Error::Config("the neural field trains on square grids".into()));
    }
    config.schedule.validate(geom.height)?;
    let field = NeuralField::new(config.arch, config.encoder, config.heads)?;
    let mut params = field.init(seed);
    let mut adam = AdamState::new(params.len());
    let mut trace = Vec::with_capacity(config.schedule.total_epochs());
    let mut snapshots = Vec::new();
    let mut epoch = 0usize;
    let k = config.encoder.max_beta();

    for (si, st) in config.schedule.stages.iter().enumerate() {
        let stage = if si == 0 { Stage::Coarse } else { Stage::Fine };
        let factor = geom.height / st.resolution;
        let (stage_model, stage_obs) = if factor == 1 {
            (model.clone(), obs.clone())
        } else {
            let g = geom.coarsened(factor)?;
            let m = ForwardModel::build(&g, model.freqs.clone(), model.lorentz)?.with_boundary(model.boundary);
            (m, obs.downsample(factor)?)
        };
        let objective = Objective::from_spectrum(stage_model, operator, &stage_obs, &config.weights, stage)?
            .with_detached_max(config.detach_max);
        if si > 0 && config.schedule.reset_optimizer {
            adam = AdamState::new(params.len());
        }
        for t in 1..=st.epochs {
            epoch += 1;
            let beta = k * t as f64 / st.epochs as f64;
            let lr = cosine_lr(t - 1, st.epochs, st.lr);
            let x = field.features(st.resolution, st.resolution, beta);
            let (loss, grad, out) = field.param_gradient(&params, &x, &objective).map_err(|e| abort(e, epoch, &trace))?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(abort(Error::NonFinite("parameter gradient".into()), epoch, &trace));
            }
            if config.snapshot_at.contains(&epoch) {
                snapshots.push(Snapshot {
                    iteration: epoch,
                    rho: out.rho,
                });
            }
            trace.push(TraceEntry {
                iteration: epoch,
                stage: Some(stage),
                lr,
                loss,
            });
            adamw_step(&mut adam, &mut params, &grad, lr, &config.schedule.adam);
        }
    }

    let last = config.schedule.stages.last().expect("validated");
    let out = field.field_forward(&params, last.resolution, last.resolution, k)?;
    let (rho_hat, omega_hat, alpha) = if last.resolution == geom.height {
        let (r, a) = scale_correction(&out.rho, &out.omega, obs, model, operator)?;
        (r, out.omega, a)
    } else {
        return Err(Error::Config("the final stage must run at the observation resolution".into()));
    };
    let mut info = serde_json::Map::new();
    info.insert("param_count".into(), field.param_count().into());
    info.insert("support_fraction".into(), (out.mask.iter().filter(|m| **m).count() as f64 / out.mask.len() as f64).into());
    info.insert("coarse_observation".into(), "mean_pool".into());
    Ok(SolverResult {
        method: Method::Netmy,
        operator,
        rho_hat,
        omega_hat,
        alpha,
        iterations: epoch,
        loss_trace: trace,
        wall_time: start.elapsed().as_secs_f64(),
        seed,
        config: serde_json::to_value(config)?,
        info,
        snapshots,
    })
}

fn abort(e: Error, epoch: usize, trace: &[TraceEntry]) -> Error {
    match e {
        Error::NonFinite(what) => {
            let last = trace.last().map(|t| format!("{:?}", t.loss)).unwrap_or_else(|| "none".into());
            Error::NonFinite(format!("{what} at epoch {epoch}; last finite loss {last}"))
        }
        other => other,
    }
}
