//! Free-density and explicit-primitive reference solvers on the shared objective.

pub mod admm;
pub mod lbfgs;
pub mod splat;
pub mod tikhonov;

use std::time::Instant;

use ndarray::Array2;

pub use admm::{run_admm, soft_threshold, AdmmConfig};
pub use lbfgs::{lbfgs_minimize, run_lbfgs, LbfgsConfig, LbfgsOutcome};
pub use splat::{rasterize, run_gaussian_splat, Splat, SplatConfig};
pub use tikhonov::{run_tikhonov, TikhonovConfig};

use crate::error::Result;
use crate::forward::{ForwardModel, OperatorKind, Spectrum};
use crate::objective::{scale_correction, scale_factor, LossWeights, Objective, Stage};
use crate::result::{Method, SolverResult, TraceEntry};
use crate::scene::LARMOR_BAND;
use crate::ScalarField;

/// Data fidelity plus the sparsity and total-variation penalties.
pub fn canonical_weights() -> LossWeights {
    LossWeights {
        fidelity: 1.0,
        nm: 0.0,
        ds: 0.0,
        l1_sparsity: 1e-2,
        l1_extra: 0.0,
        tv: 1e-3,
        l2: 0.0,
    }
}

/// Initial Larmor value for free-field solvers: the band center.
pub fn initial_larmor() -> f64 {
    0.5 * (LARMOR_BAND.0 + LARMOR_BAND.1)
}

pub(crate) fn objective(model: &ForwardModel, op: OperatorKind, obs: &Spectrum, weights: &LossWeights) -> Result<Objective> {
    Objective::from_spectrum(model.clone(), op, obs, weights, Stage::Coarse)
}

/// Amplitude of one centered source, at the band-center frequency, whose
/// prediction carries the observed energy.
pub fn single_pixel_amplitude(obs: &Spectrum, model: &ForwardModel, op: OperatorKind) -> Result<f64> {
    let (h, w) = model.geometry().shape();
    let mut delta = Array2::zeros((h, w));
    delta[(h / 2, w / 2)] = 1.0;
    let omega = Array2::from_elem((h, w), initial_larmor());
    let e = model.noise_map(op, &delta, &omega)?.sum();
    scale_factor(obs.energy(), e, op)
}

/// Splits a joint `[rho, omega]` vector into fields.
pub(crate) fn unpack(x: &[f64], shape: (usize, usize)) -> (ScalarField, ScalarField) {
    let n = shape.0 * shape.1;
    let rho = Array2::from_shape_vec(shape, x[..n].to_vec()).expect("sized");
    let omega = Array2::from_shape_vec(shape, x[n..2 * n].to_vec()).expect("sized");
    (rho, omega)
}

pub(crate) fn pack_grad(g_rho: &ScalarField, g_omega: &ScalarField) -> Vec<f64> {
    g_rho.iter().chain(g_omega.iter()).copied().collect()
}

/// Clamps densities to `>= 0` and Larmor values to the band.
pub(crate) fn project(x: &mut [f64], n: usize) {
    for v in &mut x[..n] {
        *v = v.max(0.0);
    }
    for v in &mut x[n..] {
        *v = v.clamp(LARMOR_BAND.0, LARMOR_BAND.1);
    }
}

pub(crate) struct Finish<'a> {
    pub method: Method,
    pub operator: OperatorKind,
    pub obs: &'a Spectrum,
    pub model: &'a ForwardModel,
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub start: Instant,
    pub seed: u64,
    pub config: serde_json::Value,
    pub info: serde_json::Map<String, serde_json::Value>,
}

impl Finish<'_> {
    pub fn build(self, rho: ScalarField, omega: ScalarField) -> Result<SolverResult> {
        let (rho_hat, alpha) = scale_correction(&rho, &omega, self.obs, self.model, self.operator)?;
        Ok(SolverResult {
            method: self.method,
            operator: self.operator,
            rho_hat,
            omega_hat: omega,
            alpha,
            loss_trace: self.trace,
            iterations: self.iterations,
            wall_time: self.start.elapsed().as_secs_f64(),
            seed: self.seed,
            config: self.config,
            info: self.info,
            snapshots: Vec::new(),
        })
    }
}
