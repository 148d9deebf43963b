//! Anisotropic Gaussian primitives rasterized to a density, with periodic
//! prune, split, clone and merge.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{canonical_weights, initial_larmor, objective, Finish};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, OperatorKind, Spectrum};
use crate::neural::{adamw_step, pixel_coords, AdamConfig, AdamState};
use crate::objective::LossWeights;
use crate::result::{Method, SolverResult, TraceEntry};
use crate::scene::LARMOR_BAND;
use crate::ScalarField;

/// One primitive; center and widths are in normalized `(-1, 1)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub center: [f64; 2],
    pub log_sigma: [f64; 2],
    pub amplitude: f64,
}

impl Splat {
    pub fn sigma(&self) -> [f64; 2] {
        [self.log_sigma[0].exp(), self.log_sigma[1].exp()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatConfig {
    pub initial: usize,
    pub cap: usize,
    pub lr: f64,
    pub iterations: usize,
    pub densify_every: usize,
    /// Prune below this fraction of the largest amplitude.
    pub prune_fraction: f64,
    /// Split primitives wider than this many pixels on either axis.
    pub split_sigma_px: f64,
    /// Clone primitives whose mean center-gradient norm exceeds this multiple of the population mean.
    pub clone_ratio: f64,
    /// Merge pairs whose centers are closer than this many pixels.
    pub merge_px: f64,
    pub init_sigma_px: f64,
    pub init_amplitude: f64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            initial: 64,
            cap: 128,
            lr: 1e-3,
            iterations: 400,
            densify_every: 50,
            prune_fraction: 1e-3,
            split_sigma_px: 4.0,
            clone_ratio: 2.0,
            merge_px: 1.0,
            init_sigma_px: 1.5,
            init_amplitude: 0.1,
            weights: canonical_weights(),
            adam: AdamConfig {
                weight_decay: 0.0,
                clip: Some(1.0),
                ..AdamConfig::default()
            },
        }
    }
}

impl SplatConfig {
    pub fn with_epochs_scale(mut self, factor: f64) -> Self {
        self.iterations = ((self.iterations as f64 * factor).round() as usize).max(1);
        self
    }
}

/// Sum of primitives evaluated at pixel centers.
pub fn rasterize(splats: &[Splat], shape: (usize, usize)) -> ScalarField {
    let (h, w) = shape;
    Array2::from_shape_fn(shape, |(i, j)| {
        let (x, y) = pixel_coords(i, j, h, w);
        splats.iter().map(|s| s.amplitude * gauss(s, x, y)).sum()
    })
}

fn gauss(s: &Splat, x: f64, y: f64) -> f64 {
    let [sx, sy] = s.sigma();
    let dx = (x - s.center[0]) / sx;
    let dy = (y - s.center[1]) / sy;
    (-0.5 * (dx * dx + dy * dy)).exp()
}

/// Parameter gradient of every primitive for an image-space gradient.
fn splat_gradients(splats: &[Splat], g_rho: &ScalarField) -> Vec<[f64; 5]> {
    let (h, w) = g_rho.dim();
    splats
        .iter()
        .map(|s| {
            let [sx, sy] = s.sigma();
            let mut g = [0.0; 5];
            for ((i, j), &gr) in g_rho.indexed_iter() {
                if gr == 0.0 {
                    continue;
                }
                let (x, y) = pixel_coords(i, j, h, w);
                let dx = (x - s.center[0]) / sx;
                let dy = (y - s.center[1]) / sy;
                let e = (-0.5 * (dx * dx + dy * dy)).exp();
                let v = gr * s.amplitude * e;
                g[0] += v * dx / sx;
                g[1] += v * dy / sy;
                g[2] += v * dx * dx;
                g[3] += v * dy * dy;
                g[4] += gr * e;
            }
            g
        })
        .collect()
}

fn flatten(splats: &[Splat]) -> Vec<f64> {
    splats
        .iter()
        .flat_map(|s| [s.center[0], s.center[1], s.log_sigma[0], s.log_sigma[1], s.amplitude])
        .collect()
}

fn unflatten(v: &[f64]) -> Vec<Splat> {
    v.chunks_exact(5)
        .map(|c| Splat {
            center: [c[0], c[1]],
            log_sigma: [c[2], c[3]],
            amplitude: c[4].max(0.0),
        })
        .collect()
}

fn central(amplitude: f64, sigma: f64) -> Splat {
    Splat {
        center: [0.0, 0.0],
        log_sigma: [sigma.ln(), sigma.ln()],
        amplitude,
    }
}

/// Jittered square lattice of `k` primitives covering the grid.
fn initial_splats(k: usize, shape: (usize, usize), cfg: &SplatConfig, rng: &mut ChaCha8Rng) -> Vec<Splat> {
    let side = (k as f64).sqrt().ceil() as usize;
    let px = 2.0 / shape.1 as f64;
    let sigma = cfg.init_sigma_px * px;
    let cell = 2.0 / side as f64;
    (0..k)
        .map(|n| {
            let (r, c) = (n / side, n % side);
            let jx: f64 = rng.random_range(-0.25..0.25);
            let jy: f64 = rng.random_range(-0.25..0.25);
            Splat {
                center: [-1.0 + cell * (c as f64 + 0.5 + jx), -1.0 + cell * (r as f64 + 0.5 + jy)],
                log_sigma: [sigma.ln(), sigma.ln()],
                amplitude: cfg.init_amplitude,
            }
        })
        .collect()
}

/// One prune, split, clone and merge pass. `grad_norm` is the mean center
/// gradient norm of each primitive since the previous pass.
fn densify(splats: Vec<Splat>, grad_norm: &[f64], px: f64, cfg: &SplatConfig) -> Vec<Splat> {
    let amax = splats.iter().map(|s| s.amplitude).fold(0.0, f64::max);
    let mean_g = if grad_norm.is_empty() { 0.0 } else { grad_norm.iter().sum::<f64>() / grad_norm.len() as f64 };
    let kept: Vec<(Splat, f64)> = splats
        .into_iter()
        .zip(grad_norm.iter().copied())
        .filter(|(s, _)| amax > 0.0 && s.amplitude >= cfg.prune_fraction * amax)
        .collect();
    let mut out: Vec<Splat> = Vec::with_capacity(kept.len());
    let mut extra: Vec<Splat> = Vec::new();
    let mut total = kept.len();
    for (s, g) in kept {
        let sig = s.sigma();
        let wide = (0..2).find(|&a| sig[a] > cfg.split_sigma_px * px);
        if let (Some(axis), true) = (wide, total < cfg.cap) {
            total += 1;
            for sign in [-1.0, 1.0] {
                let mut c = s;
                c.center[axis] += sign * sig[axis];
                c.log_sigma = [s.log_sigma[0] - 1.6f64.ln(), s.log_sigma[1] - 1.6f64.ln()];
                c.amplitude = 0.5 * s.amplitude;
                extra.push(c);
            }
            continue;
        }
        if mean_g > 0.0 && g > cfg.clone_ratio * mean_g && total < cfg.cap {
            total += 1;
            let mut a = s;
            a.amplitude *= 0.5;
            let mut b = a;
            b.center[0] += 0.5 * px;
            out.push(a);
            extra.push(b);
            continue;
        }
        out.push(s);
    }
    out.extend(extra);
    let mut merged: Vec<Splat> = Vec::with_capacity(out.len());
    'outer: for s in out {
        for m in merged.iter_mut() {
            let d = ((s.center[0] - m.center[0]).powi(2) + (s.center[1] - m.center[1]).powi(2)).sqrt();
            if d < cfg.merge_px * px {
                let total = m.amplitude + s.amplitude;
                if total > 0.0 {
                    for a in 0..2 {
                        m.center[a] = (m.center[a] * m.amplitude + s.center[a] * s.amplitude) / total;
                    }
                }
                m.log_sigma = [m.log_sigma[0].max(s.log_sigma[0]), m.log_sigma[1].max(s.log_sigma[1])];
                m.amplitude = total;
                continue 'outer;
            }
        }
        merged.push(s);
    }
    merged.truncate(cfg.cap);
    merged
}

pub fn run_gaussian_splat(
    obs: &Spectrum,
    model: &ForwardModel,
    op: OperatorKind,
    config: &SplatConfig,
    seed: u64,
) -> Result<SolverResult> {
    let start = Instant::now();
    if config.initial == 0 || config.initial > config.cap || config.iterations == 0 || config.densify_every == 0 {
        return Err(Error::Config(format!("invalid splat configuration {config:?}")));
    }
    let obj = objective(model, op, obs, &config.weights)?;
    let shape = model.geometry().shape();
    let px = 2.0 / shape.1 as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splats = initial_splats(config.initial, shape, config, &mut rng);
    let mut omega = Array2::from_elem(shape, initial_larmor());
    let mut adam = AdamState::new(5 * splats.len());
    let mut adam_omega = AdamState::new(omega.len());
    let mut grad_acc = vec![0.0; splats.len()];
    let mut acc_steps = 0usize;
    let mut trace = Vec::with_capacity(config.iterations);
    let mut max_count = splats.len();
    let mut reinit = 0usize;
    for t in 1..=config.iterations {
        let mut rho = rasterize(&splats, shape);
        if rho.iter().all(|v| *v == 0.0) {
            splats = vec![central(config.init_amplitude, config.init_sigma_px * px)];
            adam = AdamState::new(5);
            grad_acc = vec![0.0];
            acc_steps = 0;
            reinit += 1;
            rho = rasterize(&splats, shape);
        }
        let (loss, g) = obj.value_and_grad(&rho, &omega)?;
        let gs = splat_gradients(&splats, &g.rho);
        let grad: Vec<f64> = gs.iter().flat_map(|v| v.iter().copied()).collect();
        if grad.iter().chain(g.omega.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("splat gradient at iteration {t}")));
        }
        for (acc, v) in grad_acc.iter_mut().zip(&gs) {
            *acc += (v[0] * v[0] + v[1] * v[1]).sqrt();
        }
        acc_steps += 1;
        trace.push(TraceEntry {
            iteration: t,
            stage: None,
            lr: config.lr,
            loss,
        });
        let mut p = flatten(&splats);
        adamw_step(&mut adam, &mut p, &grad, config.lr, &config.adam);
        splats = unflatten(&p);
        let mut om = omega.as_slice().expect("standard layout").to_vec();
        adamw_step(&mut adam_omega, &mut om, g.omega.as_slice().expect("standard layout"), config.lr, &config.adam);
        omega = Array2::from_shape_vec(shape, om.into_iter().map(|v| v.clamp(LARMOR_BAND.0, LARMOR_BAND.1)).collect())
            .expect("sized");
        if t % config.densify_every == 0 && t < config.iterations {
            let mean: Vec<f64> = grad_acc.iter().map(|a| a / acc_steps as f64).collect();
            splats = densify(splats, &mean, px, config);
            if splats.is_empty() {
                splats.push(central(config.init_amplitude, config.init_sigma_px * px));
                reinit += 1;
            }
            adam = AdamState::new(5 * splats.len());
            grad_acc = vec![0.0; splats.len()];
            acc_steps = 0;
        }
        max_count = max_count.max(splats.len());
    }
    let rho = rasterize(&splats, shape);
    if rho.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("all primitives vanished".into()));
    }
    let mut info = serde_json::Map::new();
    info.insert("primitives".into(), splats.len().into());
    info.insert("max_primitives".into(), max_count.into());
    info.insert("reinitializations".into(), reinit.into());
    info.insert("splats".into(), serde_json::to_value(&splats)?);
    Finish {
        method: Method::Splat,
        operator: op,
        obs,
        model,
        trace,
        iterations: config.iterations,
        start,
        seed,
        config: serde_json::to_value(config)?,
        info,
    }
    .build(rho, omega)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn single_primitive_peaks_at_center() {
        let (h, w) = (9, 9);
        let (x, y) = pixel_coords(4, 4, h, w);
        let s = Splat {
            center: [x, y],
            log_sigma: [(2.0 / w as f64).ln(); 2],
            amplitude: 1.0,
        };
        let r = rasterize(&[s], (h, w));
        let (k, m) = crate::objective::argmax(&r);
        assert_eq!(k, (4, 4));
        assert!((m - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (obs, m, _) = single_source(10, OperatorKind::F2, (3, 6));
        let cfg = SplatConfig::default();
        let obj = objective(&m, OperatorKind::F2, &obs, &cfg.weights).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let splats = initial_splats(9, (10, 10), &cfg, &mut rng);
        let omega = Array2::from_elem((10, 10), 2.0);
        let (_, g) = obj.value_and_grad(&rasterize(&splats, (10, 10)), &omega).unwrap();
        let an: Vec<f64> = splat_gradients(&splats, &g.rho).iter().flat_map(|v| v.iter().copied()).collect();
        let p = flatten(&splats);
        let f = |q: &[f64]| obj.evaluate(&rasterize(&unflatten(q), (10, 10)), &omega).unwrap().total;
        let gmax = an.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for i in 0..p.len() {
            let h = 1e-6;
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let rel = (fd - an[i]).abs() / an[i].abs().max(fd.abs()).max(1e-2 * gmax);
            assert!(rel < 1e-4, "param {i}: {fd} vs {}", an[i]);
        }
    }

    #[test]
    fn densify_respects_cap_and_merges() {
        let cfg = SplatConfig {
            cap: 4,
            ..SplatConfig::default()
        };
        let px: f64 = 2.0 / 32.0;
        let wide = Splat {
            center: [0.0, 0.0],
            log_sigma: [(6.0 * px).ln(), px.ln()],
            amplitude: 1.0,
        };
        let s: Vec<Splat> = (0..4).map(|i| Splat { center: [0.3 * i as f64 - 0.5, 0.0], ..wide }).collect();
        let out = densify(s, &[1.0, 1.0, 1.0, 10.0], px, &cfg);
        assert!(out.len() <= 4);
        let close = vec![
            Splat { center: [0.0, 0.0], log_sigma: [px.ln(); 2], amplitude: 1.0 },
            Splat { center: [0.2 * px, 0.0], log_sigma: [px.ln(); 2], amplitude: 1.0 },
        ];
        let out = densify(close, &[1.0, 1.0], px, &SplatConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].amplitude, 2.0);
        let tiny = vec![Splat { amplitude: 0.0, ..wide }];
        assert!(densify(tiny, &[0.0], px, &SplatConfig::default()).is_empty());
    }

    #[test]
    fn deterministic_and_capped() {
        let (obs, m, _) = single_source(16, OperatorKind::F2, (5, 10));
        let cfg = SplatConfig {
            iterations: 120,
            cap: 70,
            ..SplatConfig::default()
        };
        let a = run_gaussian_splat(&obs, &m, OperatorKind::F2, &cfg, 3).unwrap();
        let b = run_gaussian_splat(&obs, &m, OperatorKind::F2, &cfg, 3).unwrap();
        assert_eq!(a.rho_hat, b.rho_hat);
        assert!(a.info["max_primitives"].as_u64().unwrap() <= 70);
        assert!(a.rho_hat.iter().all(|v| *v >= 0.0));
    }
}
