//! Dataset generation, batch solving, evaluation and benchmark aggregation
//! with frozen run configurations.

mod diagnose;
mod evaluate;

pub use diagnose::{
    diagnose_admm_sweep, diagnose_barrier, diagnose_center_bias, diagnose_chi_sweep, diagnose_decay,
    diagnose_filter_probe, DiagnoseOptions,
};
pub use evaluate::{
    aggregate, evaluate_results, summarize, write_summary, AggregateRow, Evaluation, SampleRow, SampleStatus,
    SummaryRow,
};

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    run_admm, run_gaussian_splat, run_lbfgs, run_tikhonov, AdmmConfig, LbfgsConfig, SplatConfig, TikhonovConfig,
};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, OperatorKind, Spectrum};
use crate::io::{create_dir, generate_dataset, load_scene, read_json, write_json, DatasetSpec, Manifest};
use crate::neural::{run_netmy, NetmyConfig};
use crate::physics::{FrequencyGrid, GridGeometry, LorentzianParams};
use crate::result::{save_result, Method, SolverResult};
use crate::scene::{SceneClass, DEFAULT_NOISE_LEVEL};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const RUNS_FILE: &str = "runs.json";

/// Per-method solver configurations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub netmy: NetmyConfig,
    pub tikhonov: TikhonovConfig,
    pub admm: AdmmConfig,
    pub splat: SplatConfig,
    pub lbfgs: LbfgsConfig,
}

impl SolverSettings {
    /// Multiplies every epoch or iteration budget by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            netmy: self.netmy.clone().with_epochs_scale(factor),
            tikhonov: self.tikhonov.clone().with_epochs_scale(factor),
            admm: self.admm.clone().with_epochs_scale(factor),
            splat: self.splat.clone().with_epochs_scale(factor),
            lbfgs: self.lbfgs.clone().with_epochs_scale(factor),
        }
    }
}

pub fn solve(
    method: Method,
    obs: &Spectrum,
    model: &ForwardModel,
    op: OperatorKind,
    settings: &SolverSettings,
    seed: u64,
) -> Result<SolverResult> {
    if op == OperatorKind::F3 {
        return Err(Error::Config("inversion is restricted to F1 and F2".into()));
    }
    match method {
        Method::Netmy => run_netmy(obs, model, op, &settings.netmy, seed),
        Method::Tikhonov => run_tikhonov(obs, model, op, &settings.tikhonov, seed),
        Method::Admm => run_admm(obs, model, op, &settings.admm, seed),
        Method::Splat => run_gaussian_splat(obs, model, op, &settings.splat, seed),
        Method::Lbfgs => run_lbfgs(obs, model, op, &settings.lbfgs, seed),
    }
}

/// Fully resolved settings for one command; frozen next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub geometry: GridGeometry,
    pub freqs: Vec<f64>,
    pub gamma: f64,
    pub generator_operator: OperatorKind,
    pub noise_level: f64,
    pub classes: Vec<SceneClass>,
    pub n: usize,
    pub dataset_seed: u64,
    pub methods: Vec<Method>,
    pub operators: Vec<OperatorKind>,
    pub seeds: Vec<u64>,
    pub epochs_scale: f64,
    /// Unscaled solver settings; `epochs_scale` is applied at solve time.
    pub solvers: SolverSettings,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Command-line overrides exactly as given.
    pub overrides: serde_json::Map<String, serde_json::Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: GridGeometry::default(),
            freqs: FrequencyGrid::default().values().to_vec(),
            gamma: LorentzianParams::default().gamma,
            generator_operator: OperatorKind::F3,
            noise_level: DEFAULT_NOISE_LEVEL,
            classes: SceneClass::ALL.to_vec(),
            n: 8,
            dataset_seed: 0,
            methods: vec![Method::Netmy],
            operators: vec![OperatorKind::F2],
            seeds: vec![0],
            epochs_scale: 1.0,
            solvers: SolverSettings::default(),
            dataset: None,
            out: None,
            overrides: serde_json::Map::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        FrequencyGrid::new(self.freqs.clone())?;
        LorentzianParams::new(self.gamma)?;
        if !(self.epochs_scale > 0.0 && self.epochs_scale.is_finite()) {
            return Err(Error::Config(format!("epochs scale must be > 0, got {}", self.epochs_scale)));
        }
        if self.operators.contains(&OperatorKind::F3) {
            return Err(Error::Config("inversion is restricted to F1 and F2".into()));
        }
        if self.classes.is_empty() || self.methods.is_empty() || self.operators.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("classes, methods, operators and seeds must be non-empty".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ForwardModel> {
        ForwardModel::build(&self.geometry, FrequencyGrid::new(self.freqs.clone())?, LorentzianParams::new(self.gamma)?)
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            n: self.n,
            class_mix: self.classes.clone(),
            geometry: self.geometry,
            freqs: FrequencyGrid::new(self.freqs.clone())?,
            lorentz: LorentzianParams::new(self.gamma)?,
            operator: self.generator_operator,
            noise_level: self.noise_level,
            seed: self.dataset_seed,
        })
    }

    pub fn scaled_solvers(&self) -> SolverSettings {
        self.solvers.scaled(self.epochs_scale)
    }

    pub fn freeze(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_json(&dir.join(RUN_CONFIG_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(RUN_CONFIG_FILE))
    }
}

/// Runs `f` over `0..n` on up to `jobs` worker threads; output order follows the index.
pub fn parallel_map<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    let workers = jobs.clamp(1, n.max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("no worker panicked")[i] = Some(v);
            });
        }
    });
    slots.into_inner().expect("no worker panicked").into_iter().map(|v| v.expect("every index ran")).collect()
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.geometry.validate()?;
    let manifest = generate_dataset(&cfg.dataset_spec()?, out)?;
    cfg.freeze(out)?;
    Ok(manifest)
}

pub fn run_dir_name(method: Method, op: OperatorKind, seed: u64) -> String {
    format!("{method}_{op}_seed{seed}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scene: String,
    pub method: Method,
    pub operator: OperatorKind,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub wall_time: f64,
    pub iterations: usize,
}

/// Solves every (scene, method, operator, seed) combination of a dataset.
/// Failed runs are recorded and do not stop the batch.
pub fn solve_dataset(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    jobs: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let manifest = Manifest::load(dataset)?;
    let model = ForwardModel::build(
        &manifest.geometry,
        FrequencyGrid::new(manifest.freqs.clone())?,
        LorentzianParams::new(manifest.gamma)?,
    )?;
    let settings = cfg.scaled_solvers();
    let mut tasks = Vec::new();
    for entry in &manifest.scenes {
        for &method in &cfg.methods {
            for &op in &cfg.operators {
                for &seed in &cfg.seeds {
                    tasks.push((entry, method, op, seed));
                }
            }
        }
    }
    let mut frozen = cfg.clone();
    frozen.dataset = Some(dataset.to_path_buf());
    frozen.out = Some(out.to_path_buf());
    frozen.freeze(out)?;
    let total = tasks.len();
    let done = AtomicUsize::new(0);
    let records = parallel_map(total, jobs, |i| {
        let (entry, method, op, seed) = tasks[i];
        let outcome = load_scene(&dataset.join(&entry.dir)).and_then(|(scene, _)| {
            let obs = scene.observed()?;
            let r = solve(method, obs, &model, op, &settings, seed)?;
            save_result(&out.join(run_dir_name(method, op, seed)).join(&entry.id), &r)?;
            Ok(r)
        });
        let k = done.fetch_add(1, Ordering::SeqCst) + 1;
        let rec = match outcome {
            Ok(r) => RunRecord {
                scene: entry.id.clone(),
                method,
                operator: op,
                seed,
                ok: true,
                error: None,
                wall_time: r.wall_time,
                iterations: r.iterations,
            },
            Err(e) => RunRecord {
                scene: entry.id.clone(),
                method,
                operator: op,
                seed,
                ok: false,
                error: Some(format!("{}: {e}", e.code())),
                wall_time: 0.0,
                iterations: 0,
            },
        };
        progress(&format!(
            "[{k}/{total}] {} {method} {op} seed {seed}: {}",
            entry.id,
            rec.error.as_deref().unwrap_or("ok")
        ));
        rec
    });
    write_json(&out.join(RUNS_FILE), &records)?;
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutput {
    pub runs: Vec<RunRecord>,
    pub evaluation: Evaluation,
    pub summary: Vec<SummaryRow>,
}

/// Generate, solve the method x operator grid, evaluate and summarize.
pub fn benchmark(cfg: &RunConfig, out: &Path, jobs: usize, progress: &(dyn Fn(&str) + Sync)) -> Result<BenchmarkOutput> {
    cfg.validate()?;
    create_dir(out)?;
    cfg.freeze(out)?;
    let dataset = out.join("dataset");
    let results = out.join("results");
    progress(&format!("generating {} scenes", cfg.n));
    generate(cfg, &dataset)?;
    let runs = solve_dataset(cfg, &dataset, &results, jobs, progress)?;
    let evaluation = evaluate_results(&dataset, &results)?;
    let summary = summarize(&evaluation.samples, &cfg.methods, &cfg.operators, &cfg.seeds);
    write_summary(out, &summary)?;
    Ok(BenchmarkOutput {
        runs,
        evaluation,
        summary,
    })
}
