//! `nvrelax`: dataset generation, solving, evaluation, diagnostics and benchmarks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use nvrelax_core::forward::OperatorKind;
use nvrelax_core::io::{load_scene, read_json};
use nvrelax_core::pipeline::{
    benchmark, diagnose_admm_sweep, diagnose_barrier, diagnose_center_bias, diagnose_chi_sweep, diagnose_decay,
    diagnose_filter_probe, evaluate_results, generate, run_dir_name, solve, solve_dataset, DiagnoseOptions, RunConfig,
};
use nvrelax_core::physics::GridGeometry;
use nvrelax_core::result::{save_result, Method};
use nvrelax_core::scene::SceneClass;

#[derive(Parser)]
#[command(name = "nvrelax", version, about = "NV-relaxometry noise-map inversion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Run one or more solvers over a dataset or a single scene.
    Solve(SolveArgs),
    /// Score results against ground truth.
    Evaluate(EvaluateArgs),
    /// Optimization-geometry diagnostics.
    Diagnose(DiagnoseArgs),
    /// Generate, solve, evaluate and summarize in one go.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Clone)]
struct GeometryArgs {
    /// Grid side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Pixel spacing in nm.
    #[arg(long)]
    spacing: Option<f64>,
    /// Sensor standoff in nm.
    #[arg(long)]
    standoff: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Number of scenes.
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated scene classes such as `few/far,many/close`, or `all`.
    #[arg(long, value_parser = parse_classes)]
    classes: Option<std::vec::Vec<SceneClass>>,
    /// Generating operator.
    #[arg(long, value_parser = parse_any_operator)]
    operator: Option<OperatorKind>,
    /// Sensor noise level relative to the spectrum maximum.
    #[arg(long)]
    noise: Option<f64>,
    /// Dataset seed; scene i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    /// Solver, or a comma-separated list.
    #[arg(long, value_parser = parse_methods)]
    method: Option<std::vec::Vec<Method>>,
    /// Inversion operator (f1 or f2), or a comma-separated list.
    #[arg(long = "invert-operator", value_parser = parse_inversion_operators)]
    invert_operator: Option<std::vec::Vec<OperatorKind>>,
    /// Dataset directory produced by `generate`.
    #[arg(long, conflicts_with = "scene")]
    dataset: Option<PathBuf>,
    /// A single scene directory.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Solver seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Uniform multiplier on every epoch or iteration budget.
    #[arg(long = "epochs-scale")]
    epochs_scale: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    dataset: PathBuf,
    /// Results directory produced by `solve`; metrics are written into it.
    #[arg(long)]
    results: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(subcommand)]
    probe: Probe,
}

#[derive(Subcommand)]
enum Probe {
    /// Iteration-0 fidelity gradient at a uniform density, windowed and periodic.
    CenterBias(ProbeArgs),
    /// Loss along the segment from a Tikhonov collapse to the truth.
    Barrier(ProbeArgs),
    /// Image-space kernel J J^T of a reduced neural field.
    FilterProbe(ProbeArgs),
    /// Frequency decay of the summed power kernel and sheet scaling.
    Decay(ProbeArgs),
    /// F2 versus F3 error across Larmor spreads.
    ChiSweep(ProbeArgs),
    /// ADMM center mass over a configuration grid and operators.
    AdmmSweep(ProbeArgs),
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Number of generated scenes.
    #[arg(long)]
    scenes: Option<usize>,
    /// Scene class of the generated scenes.
    #[arg(long, value_parser = parse_class)]
    class: Option<SceneClass>,
    /// Inversion operator (f1 or f2), or a comma-separated list.
    #[arg(long = "invert-operator", value_parser = parse_inversion_operators)]
    invert_operator: Option<std::vec::Vec<OperatorKind>>,
    /// Dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Uniform multiplier on every epoch or iteration budget.
    #[arg(long = "epochs-scale")]
    epochs_scale: Option<f64>,
    /// Tikhonov epochs for the collapsed barrier endpoint.
    #[arg(long = "collapse-epochs")]
    collapse_epochs: Option<usize>,
    /// Comma-separated Larmor spreads for the chi sweep.
    #[arg(long, value_delimiter = ',')]
    chi: Option<Vec<f64>>,
    /// Comma-separated standoffs in nm for the decay probe.
    #[arg(long, value_delimiter = ',')]
    standoffs: Option<Vec<f64>>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Number of scenes.
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated scene classes, or `all`.
    #[arg(long, value_parser = parse_classes)]
    classes: Option<std::vec::Vec<SceneClass>>,
    /// Comma-separated solvers.
    #[arg(long, value_parser = parse_methods)]
    methods: Option<std::vec::Vec<Method>>,
    /// Comma-separated inversion operators (f1, f2).
    #[arg(long, value_parser = parse_inversion_operators)]
    operators: Option<std::vec::Vec<OperatorKind>>,
    /// Uniform multiplier on every epoch or iteration budget.
    #[arg(long = "epochs-scale")]
    epochs_scale: Option<f64>,
    /// Number of solver seeds, starting at 0.
    #[arg(long)]
    seeds: Option<u64>,
    /// Dataset seed.
    #[arg(long = "data-seed")]
    data_seed: Option<u64>,
    /// Sensor noise level relative to the spectrum maximum.
    #[arg(long)]
    noise: Option<f64>,
}

fn parse_class(s: &str) -> Result<SceneClass, String> {
    s.parse().map_err(|e: nvrelax_core::Error| e.to_string())
}

fn parse_classes(s: &str) -> Result<Vec<SceneClass>, String> {
    if s == "all" {
        return Ok(SceneClass::ALL.to_vec());
    }
    s.split(',').map(|c| parse_class(c.trim())).collect()
}

fn parse_methods(s: &str) -> Result<Vec<Method>, String> {
    s.split(',').map(|m| m.trim().parse().map_err(|e: nvrelax_core::Error| e.to_string())).collect()
}

fn parse_any_operator(s: &str) -> Result<OperatorKind, String> {
    s.parse().map_err(|e: nvrelax_core::Error| e.to_string())
}

fn parse_inversion_operators(s: &str) -> Result<Vec<OperatorKind>, String> {
    s.split(',')
        .map(|o| {
            let op = parse_any_operator(o.trim())?;
            if op == OperatorKind::F3 {
                return Err("inversion is restricted to f1 and f2".into());
            }
            Ok(op)
        })
        .collect()
}

/// Loads the base configuration and records each override verbatim.
struct ConfigBuilder {
    cfg: RunConfig,
}

impl ConfigBuilder {
    fn new(path: Option<&Path>) -> anyhow::Result<Self> {
        let cfg = match path {
            Some(p) => read_json(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        Ok(Self { cfg })
    }

    fn set<T: serde::Serialize>(&mut self, key: &str, value: Option<T>, apply: impl FnOnce(&mut RunConfig, T)) {
        if let Some(v) = value {
            self.cfg.overrides.insert(key.into(), serde_json::to_value(&v).unwrap_or(Value::Null));
            apply(&mut self.cfg, v);
        }
    }

    fn geometry(&mut self, g: &GeometryArgs) -> anyhow::Result<()> {
        self.set("size", g.size, |c, v| {
            c.geometry.height = v;
            c.geometry.width = v;
        });
        self.set("spacing", g.spacing, |c, v| c.geometry.spacing = v);
        self.set("standoff", g.standoff, |c, v| c.geometry.standoff = v);
        let g = self.cfg.geometry;
        GridGeometry::new(g.height, g.width, g.spacing, g.standoff)?;
        Ok(())
    }
}

fn prepare_out(common: &Common) -> anyhow::Result<()> {
    let out = &common.out;
    if out.exists() && std::fs::read_dir(out)?.next().is_some() && !common.force {
        bail!("output directory {} is not empty; pass --force to overwrite", out.display());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let mut b = ConfigBuilder::new(a.common.config.as_deref())?;
    b.geometry(&a.geometry)?;
    b.set("n", a.n, |c, v| c.n = v);
    b.set("classes", a.classes, |c, v| c.classes = v);
    b.set("operator", a.operator, |c, v| c.generator_operator = v);
    b.set("noise", a.noise, |c, v| c.noise_level = v);
    b.set("seed", a.seed, |c, v| c.dataset_seed = v);
    prepare_out(&a.common)?;
    let mut cfg = b.cfg;
    cfg.out = Some(a.common.out.clone());
    let m = generate(&cfg, &a.common.out)?;
    progress(&format!("wrote {} scenes to {}", m.n, a.common.out.display()));
    Ok(())
}

fn cmd_solve(a: SolveArgs) -> anyhow::Result<()> {
    let mut b = ConfigBuilder::new(a.common.config.as_deref())?;
    b.set("method", a.method, |c, v| c.methods = v);
    b.set("invert_operator", a.invert_operator, |c, v| c.operators = v);
    b.set("seed", a.seed, |c, v| c.seeds = vec![v]);
    b.set("epochs_scale", a.epochs_scale, |c, v| c.epochs_scale = v);
    let cfg = b.cfg;
    cfg.validate()?;
    prepare_out(&a.common)?;
    if let Some(scene_dir) = &a.scene {
        let (scene, meta) = load_scene(scene_dir)?;
        let model = nvrelax_core::forward::ForwardModel::build(
            &meta.geometry,
            nvrelax_core::physics::FrequencyGrid::new(meta.freqs.clone())?,
            nvrelax_core::physics::LorentzianParams::new(meta.gamma)?,
        )?;
        let mut frozen = cfg.clone();
        frozen.dataset = Some(scene_dir.clone());
        frozen.out = Some(a.common.out.clone());
        frozen.freeze(&a.common.out)?;
        let settings = cfg.scaled_solvers();
        let mut failed = 0;
        for &method in &cfg.methods {
            for &op in &cfg.operators {
                for &seed in &cfg.seeds {
                    match solve(method, scene.observed()?, &model, op, &settings, seed) {
                        Ok(r) => {
                            save_result(&a.common.out.join(run_dir_name(method, op, seed)).join(&meta.id), &r)?;
                            progress(&format!("{} {method} {op} seed {seed}: ok ({:.1} s)", meta.id, r.wall_time));
                        }
                        Err(e) => {
                            failed += 1;
                            progress(&format!("{} {method} {op} seed {seed}: {e}", meta.id));
                        }
                    }
                }
            }
        }
        if failed > 0 {
            bail!("{failed} run(s) failed");
        }
        return Ok(());
    }
    let Some(dataset) = a.dataset.clone().or_else(|| cfg.dataset.clone()) else {
        bail!("one of --dataset or --scene is required");
    };
    let runs = solve_dataset(&cfg, &dataset, &a.common.out, a.common.jobs, &progress)?;
    let failed = runs.iter().filter(|r| !r.ok).count();
    progress(&format!("{} runs, {failed} failed", runs.len()));
    if failed > 0 {
        bail!("{failed} run(s) failed; see runs.json");
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let ev = evaluate_results(&a.dataset, &a.results)?;
    let bad = ev.samples.iter().filter(|s| s.values.is_empty()).count();
    progress(&format!("scored {} samples ({bad} missing or failed)", ev.samples.len()));
    Ok(())
}

fn cmd_diagnose(a: DiagnoseArgs) -> anyhow::Result<()> {
    let (name, p) = match a.probe {
        Probe::CenterBias(p) => ("center-bias", p),
        Probe::Barrier(p) => ("barrier", p),
        Probe::FilterProbe(p) => ("filter-probe", p),
        Probe::Decay(p) => ("decay", p),
        Probe::ChiSweep(p) => ("chi-sweep", p),
        Probe::AdmmSweep(p) => ("admm-sweep", p),
    };
    let mut b = ConfigBuilder::new(p.common.config.as_deref())?;
    b.geometry(&p.geometry)?;
    b.set("invert_operator", p.invert_operator, |c, v| c.operators = v);
    b.set("seed", p.seed, |c, v| {
        c.seeds = vec![v];
        c.dataset_seed = v;
    });
    b.set("epochs_scale", p.epochs_scale, |c, v| c.epochs_scale = v);
    let mut cfg = b.cfg;
    if name == "admm-sweep" && !cfg.overrides.contains_key("invert_operator") {
        cfg.operators = vec![OperatorKind::F1, OperatorKind::F2];
    }
    cfg.validate()?;
    let mut opts = DiagnoseOptions {
        jobs: p.common.jobs,
        ..DiagnoseOptions::default()
    };
    if name == "admm-sweep" {
        opts.scenes = 4;
        opts.class = "many/far".parse()?;
    }
    if name == "barrier" {
        opts.scenes = 1;
        opts.class = "many/far".parse()?;
    }
    if let Some(v) = p.scenes {
        opts.scenes = v;
    }
    if let Some(v) = p.class {
        opts.class = v;
    }
    if let Some(v) = p.collapse_epochs {
        opts.collapse_epochs = v;
    }
    if let Some(v) = p.chi {
        opts.chi_values = v;
    }
    if let Some(v) = p.standoffs {
        opts.standoffs = v;
    }
    prepare_out(&p.common)?;
    let out = &p.common.out;
    let report = match name {
        "center-bias" => diagnose_center_bias(&cfg, &opts, out)?,
        "barrier" => diagnose_barrier(&cfg, &opts, out)?,
        "filter-probe" => diagnose_filter_probe(&cfg, &opts, out)?,
        "decay" => diagnose_decay(&cfg, &opts, out)?,
        "chi-sweep" => diagnose_chi_sweep(&cfg, &opts, out)?,
        _ => diagnose_admm_sweep(&cfg, &opts, out)?,
    };
    let rows = report.get("rows").and_then(Value::as_array).map_or(0, Vec::len);
    progress(&format!("{name}: {rows} rows written to {}", out.join("diagnostics.json").display()));
    Ok(())
}

fn cmd_benchmark(a: BenchmarkArgs) -> anyhow::Result<()> {
    let mut b = ConfigBuilder::new(a.common.config.as_deref())?;
    b.geometry(&a.geometry)?;
    b.set("n", a.n, |c, v| c.n = v);
    b.set("classes", a.classes, |c, v| c.classes = v);
    b.set("methods", a.methods, |c, v| c.methods = v);
    b.set("operators", a.operators, |c, v| c.operators = v);
    b.set("epochs_scale", a.epochs_scale, |c, v| c.epochs_scale = v);
    b.set("seeds", a.seeds, |c, v| c.seeds = (0..v).collect());
    b.set("data_seed", a.data_seed, |c, v| c.dataset_seed = v);
    b.set("noise", a.noise, |c, v| c.noise_level = v);
    let mut cfg = b.cfg;
    cfg.validate()?;
    prepare_out(&a.common)?;
    cfg.out = Some(a.common.out.clone());
    let out = benchmark(&cfg, &a.common.out, a.common.jobs, &progress)?;
    let failed = out.runs.iter().filter(|r| !r.ok).count();
    let table = std::fs::read_to_string(a.common.out.join("summary.txt"))?;
    eprint!("{table}");
    progress(&format!("{} runs, {failed} failed", out.runs.len()));
    if failed > 0 {
        eprintln!("{}", json!({ "failed_runs": failed }));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
