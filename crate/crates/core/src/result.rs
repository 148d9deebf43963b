//! Solver outputs and their on-disk form (`result.json` plus raw arrays).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::OperatorKind;
use crate::io::{create_dir, read_f64, read_field, read_json, write_f64, write_field, write_json};
use crate::objective::{LossBreakdown, Stage};
use crate::ScalarField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Netmy,
    Tikhonov,
    Admm,
    Splat,
    Lbfgs,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Netmy, Method::Tikhonov, Method::Admm, Method::Splat, Method::Lbfgs];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Netmy => "netmy",
            Method::Tikhonov => "tikhonov",
            Method::Admm => "admm",
            Method::Splat => "splat",
            Method::Lbfgs => "lbfgs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub stage: Option<Stage>,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub rho: ScalarField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub method: Method,
    pub operator: OperatorKind,
    /// Scale-corrected density.
    pub rho_hat: ScalarField,
    pub omega_hat: ScalarField,
    pub alpha: f64,
    pub loss_trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub wall_time: f64,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Solver-specific scalars and flags.
    pub info: serde_json::Map<String, serde_json::Value>,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResultMeta {
    method: Method,
    operator: OperatorKind,
    alpha: f64,
    iterations: usize,
    wall_time: f64,
    seed: u64,
    shape: [usize; 2],
    config: serde_json::Value,
    info: serde_json::Map<String, serde_json::Value>,
    snapshots: Vec<(usize, [usize; 2])>,
    loss_trace: Vec<TraceEntry>,
}

pub fn save_result(dir: &Path, r: &SolverResult) -> Result<()> {
    create_dir(dir)?;
    let (h, w) = r.rho_hat.dim();
    write_field(&dir.join("rho_hat.f64"), &r.rho_hat)?;
    write_field(&dir.join("omega_hat.f64"), &r.omega_hat)?;
    if !r.snapshots.is_empty() {
        write_f64(&dir.join("snapshots.f64"), r.snapshots.iter().flat_map(|s| s.rho.iter().copied()))?;
    }
    let meta = ResultMeta {
        method: r.method,
        operator: r.operator,
        alpha: r.alpha,
        iterations: r.iterations,
        wall_time: r.wall_time,
        seed: r.seed,
        shape: [h, w],
        config: r.config.clone(),
        info: r.info.clone(),
        snapshots: r.snapshots.iter().map(|s| (s.iteration, [s.rho.nrows(), s.rho.ncols()])).collect(),
        loss_trace: r.loss_trace.clone(),
    };
    write_json(&dir.join("result.json"), &meta)
}

pub fn load_result(dir: &Path) -> Result<SolverResult> {
    let meta: ResultMeta = read_json(&dir.join("result.json"))?;
    let shape = (meta.shape[0], meta.shape[1]);
    let rho_hat = read_field(&dir.join("rho_hat.f64"), shape)?;
    let omega_hat = read_field(&dir.join("omega_hat.f64"), shape)?;
    let mut snapshots = Vec::new();
    if !meta.snapshots.is_empty() {
        let total: usize = meta.snapshots.iter().map(|(_, s)| s[0] * s[1]).sum();
        let flat = read_f64(&dir.join("snapshots.f64"), total)?;
        let mut off = 0;
        for (iteration, s) in &meta.snapshots {
            let n = s[0] * s[1];
            let rho = Array2::from_shape_vec((s[0], s[1]), flat[off..off + n].to_vec()).expect("sized");
            off += n;
            snapshots.push(Snapshot { iteration: *iteration, rho });
        }
    }
    Ok(SolverResult {
        method: meta.method,
        operator: meta.operator,
        rho_hat,
        omega_hat,
        alpha: meta.alpha,
        loss_trace: meta.loss_trace,
        iterations: meta.iterations,
        wall_time: meta.wall_time,
        seed: meta.seed,
        config: meta.config,
        info: meta.info,
        snapshots,
    })
}
