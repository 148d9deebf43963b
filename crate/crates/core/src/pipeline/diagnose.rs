use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::evaluate::{mean_std, CENTER_MASS_NOTE};
use super::{parallel_map, RunConfig};
use crate::baselines::{run_tikhonov, TikhonovConfig};
use crate::diagnostics::{
    admm_sweep, admm_sweep_configs, center_mass_ratio, chi_stress_geometry, chi_sweep, energy_barrier_scan,
    filter_kernel_probe, iter0_center_bias, kernel_frequency_decay, low_frequency_fraction, sheet_scaling_slope,
    BARRIER_POINTS, CENTER_MASS_RADIUS,
};
use crate::error::Result;
use crate::forward::{OperatorKind, Spectrum};
use crate::io::{create_dir, write_f64, write_field, write_json};
use crate::neural::{EncoderConfig, HeadConfig, MlpArch, NeuralField};
use crate::physics::{build_kernel_stack, Boundary, FrequencyGrid, GridGeometry, LorentzianParams};
use crate::scene::{Scene, SceneClass};

/// Knobs shared by the diagnose subcommands.
#[derive(Debug, Clone)]
pub struct DiagnoseOptions {
    pub scenes: usize,
    pub class: SceneClass,
    pub init_value: f64,
    /// Tikhonov epochs producing the collapsed endpoint of a barrier scan.
    pub collapse_epochs: usize,
    pub chi_values: Vec<f64>,
    pub standoffs: Vec<f64>,
    pub probe_grid: usize,
    pub probe_width: usize,
    pub probe_betas: Vec<f64>,
    pub jobs: usize,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            scenes: 10,
            class: "medium/far".parse().expect("valid class"),
            init_value: 0.1,
            collapse_epochs: 200,
            chi_values: vec![0.0, 0.1, 0.3, 0.6, 1.08],
            standoffs: vec![10.0, 20.0, 40.0, 80.0],
            probe_grid: 16,
            probe_width: 32,
            probe_betas: vec![1.0, 4.0, 8.0],
            jobs: 1,
        }
    }
}

fn observed_scenes(cfg: &RunConfig, class: SceneClass, n: usize, jobs: usize) -> Result<Vec<Scene>> {
    let model = cfg.model()?;
    parallel_map(n, jobs, |i| {
        let mut s = crate::scene::sample_scene(class, &cfg.geometry, cfg.dataset_seed.wrapping_add(i as u64))?;
        s.observe(&model, cfg.generator_operator, cfg.noise_level)?;
        Ok(s)
    })
    .into_iter()
    .collect()
}

fn finish(out: &Path, value: Value) -> Result<Value> {
    write_json(&out.join("diagnostics.json"), &value)?;
    Ok(value)
}

/// Iteration-0 fidelity gradient per scene and inversion operator, with windowed
/// and periodic convolution.
pub fn diagnose_center_bias(cfg: &RunConfig, opts: &DiagnoseOptions, out: &Path) -> Result<Value> {
    create_dir(out)?;
    cfg.freeze(out)?;
    let model = cfg.model()?;
    let periodic = model.clone().with_boundary(Boundary::Periodic);
    let scenes = observed_scenes(cfg, opts.class, opts.scenes, opts.jobs)?;
    let mut rows = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        for &op in &cfg.operators {
            for (m, tag) in [(&model, "windowed"), (&periodic, "periodic")] {
                let r = iter0_center_bias(s.observed()?, m, op, opts.init_value)?;
                write_field(&out.join(format!("gradient_{i:03}_{op}_{tag}.f64")), &r.gradient)?;
                rows.push(json!({
                    "scene": i, "operator": op, "boundary": tag, "ratio": r.ratio,
                    "peak": [r.peak.0, r.peak.1], "peak_distance": r.peak_distance,
                    "sources": s.sources.len(),
                }));
            }
        }
    }
    finish(
        out,
        json!({
            "probe": "center-bias",
            "shape": cfg.geometry.shape(),
            "init_value": opts.init_value,
            "ratio_definition": "mean |grad| over the central 3x3 / mean |grad| at radius > H/4",
            "rows": rows,
        }),
    )
}

/// Loss along the path from a Tikhonov collapse (F2) to the truth, under each operator.
pub fn diagnose_barrier(cfg: &RunConfig, opts: &DiagnoseOptions, out: &Path) -> Result<Value> {
    create_dir(out)?;
    cfg.freeze(out)?;
    let model = cfg.model()?;
    let scenes = observed_scenes(cfg, opts.class, opts.scenes, opts.jobs)?;
    let tik = TikhonovConfig {
        epochs: opts.collapse_epochs,
        ..cfg.solvers.tikhonov.clone()
    };
    let rows = parallel_map(scenes.len(), opts.jobs, |i| -> Result<Vec<Value>> {
        let s = &scenes[i];
        let obs = s.observed()?;
        let collapse = run_tikhonov(obs, &model, OperatorKind::F2, &tik, cfg.seeds[0])?;
        write_field(&out.join(format!("collapse_{i:03}.f64")), &collapse.rho_hat)?;
        let mut rows = Vec::new();
        for op in [OperatorKind::F2, OperatorKind::F1] {
            let p = energy_barrier_scan(&collapse.rho_hat, &s.rho_true, &s.omega_true, obs, &model, op, &tik.weights, BARRIER_POINTS)?;
            write_f64(&out.join(format!("profile_{i:03}_{op}.f64")), p.loss.iter().copied())?;
            rows.push(json!({
                "scene": i, "operator": op, "height": p.height, "argmax_t": p.argmax_t,
                "nonincreasing": p.is_nonincreasing(1e-12), "t": p.t, "loss": p.loss,
                "collapse_center_mass": center_mass_ratio(&collapse.rho_hat, CENTER_MASS_RADIUS)?,
            }));
        }
        Ok(rows)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .concat();
    finish(
        out,
        json!({
            "probe": "barrier", "collapse": "tikhonov under f2", "collapse_epochs": opts.collapse_epochs,
            "center_mass_definition": CENTER_MASS_NOTE, "rows": rows,
        }),
    )
}

/// `J J^T` applied to a center spike and to random probes on a reduced net.
pub fn diagnose_filter_probe(cfg: &RunConfig, opts: &DiagnoseOptions, out: &Path) -> Result<Value> {
    create_dir(out)?;
    cfg.freeze(out)?;
    let n = opts.probe_grid;
    let field = NeuralField::new(MlpArch::small(50, opts.probe_width), EncoderConfig::default(), HeadConfig::default())?;
    let params = field.init(cfg.seeds[0]);
    let mut spike = Array2::zeros((n, n));
    spike[(n / 2, n / 2)] = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
    let mut rows = Vec::new();
    for &beta in &opts.probe_betas {
        let resp = filter_kernel_probe(&field, &params, n, n, beta, &spike)?;
        write_field(&out.join(format!("spike_response_beta{beta}.f64")), &resp)?;
        let l1: f64 = resp.iter().map(|v| v.abs()).sum();
        let peak = resp.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut min_quad = f64::INFINITY;
        for _ in 0..50 {
            let v = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
            let gv = filter_kernel_probe(&field, &params, n, n, beta, &v)?;
            min_quad = min_quad.min((&v * &gv).sum());
        }
        rows.push(json!({
            "beta": beta, "peak_over_l1": peak / l1,
            "low_frequency_fraction": low_frequency_fraction(&resp, 0.25), "min_quadratic_form": min_quad,
        }));
    }
    finish(out, json!({ "probe": "filter-probe", "grid": n, "width": opts.probe_width, "params": field.param_count(), "rows": rows }))
}

/// Mid-band decay of the summed power kernel for each standoff, and the sheet scaling slope.
pub fn diagnose_decay(cfg: &RunConfig, opts: &DiagnoseOptions, out: &Path) -> Result<Value> {
    create_dir(out)?;
    cfg.freeze(out)?;
    let mut rows = Vec::new();
    for &z in &opts.standoffs {
        let g = GridGeometry::new(cfg.geometry.height, cfg.geometry.width, cfg.geometry.spacing, z)?;
        let fit = kernel_frequency_decay(&build_kernel_stack(&g)?)?;
        write_f64(&out.join(format!("envelope_z{z}.f64")), fit.log_envelope.iter().copied())?;
        rows.push(json!({
            "standoff": z, "slope_px": fit.slope_px, "decay_length_nm": fit.decay_length_nm,
            "k": fit.k, "log_envelope": fit.log_envelope, "dc": fit.dc,
        }));
    }
    let sheet = sheet_scaling_slope(&opts.standoffs, cfg.geometry.spacing.min(opts.standoffs.iter().cloned().fold(f64::INFINITY, f64::min) / 4.0), 1000.0)?;
    finish(out, json!({ "probe": "decay", "rows": rows, "sheet_slope": sheet }))
}

/// F2-versus-F3 error across the Larmor-spread stress family.
pub fn diagnose_chi_sweep(cfg: &RunConfig, opts: &DiagnoseOptions, out: &Path) -> Result<Value> {
    create_dir(out)?;
    cfg.freeze(out)?;
    let g = chi_stress_geometry(cfg.geometry.standoff, cfg.geometry.height)?;
    let pts = chi_sweep(&opts.chi_values, &g, &FrequencyGrid::new(cfg.freqs.clone())?, LorentzianParams::new(cfg.gamma)?)?;
    finish(out, json!({ "probe": "chi-sweep", "geometry": g, "rows": pts }))
}

/// ADMM center-mass ratios over scenes x eight configurations x operators.
pub fn diagnose_admm_sweep(cfg: &RunConfig, opts: &DiagnoseOptions, out: &Path) -> Result<Value> {
    create_dir(out)?;
    cfg.freeze(out)?;
    let model = cfg.model()?;
    let scenes = observed_scenes(cfg, opts.class, opts.scenes, opts.jobs)?;
    let obs: Vec<Spectrum> = scenes.iter().map(|s| s.observed().cloned()).collect::<Result<_>>()?;
    let configs: Vec<_> = admm_sweep_configs().into_iter().map(|c| c.with_epochs_scale(cfg.epochs_scale)).collect();
    let rows = parallel_map(obs.len(), opts.jobs, |i| admm_sweep(&obs[i..=i], &model, &cfg.operators, &configs, cfg.seeds[0]))
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.map(|rows| {
                rows.into_iter()
                    .map(|mut row| {
                        row.scene = i;
                        row
                    })
                    .collect::<Vec<_>>()
            })
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    let means: Vec<Value> = cfg
        .operators
        .iter()
        .map(|&op| {
            let v: Vec<f64> = rows.iter().filter(|r| r.operator == op).map(|r| r.center_mass).collect();
            let (m, sd) = mean_std(&v);
            json!({ "operator": op, "mean_center_mass": m, "std": sd, "n": v.len() })
        })
        .collect();
    finish(
        out,
        json!({
            "probe": "admm-sweep", "configs": configs, "rows": rows, "means": means,
            "center_mass_definition": CENTER_MASS_NOTE,
        }),
    )
}
