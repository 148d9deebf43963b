//! Optimization-geometry probes: iteration-0 center bias, center-mass ratio,
//! energy-barrier scans, the Jacobian filter kernel, kernel frequency decay,
//! the sheet scaling law and the Larmor-spread robustness sweep.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::baselines::{initial_larmor, run_admm, AdmmConfig};
use crate::conv::Fft2;
use crate::error::{Error, Result};
use crate::forward::{forward_f2, forward_f3, ForwardModel, OperatorKind, Spectrum};
use crate::neural::NeuralField;
use crate::objective::{LossWeights, Objective, Stage};
use crate::physics::{power_at, Boundary, FrequencyGrid, GridGeometry, KernelStack, LorentzianParams};
use crate::ScalarField;

pub const CENTER_MASS_RADIUS: f64 = 8.0;
pub const BARRIER_POINTS: usize = 51;
pub const FOOTPRINT_FRACTION: f64 = 0.01;
pub const ENVELOPE_POWER: i32 = 2;

fn center(shape: (usize, usize)) -> (f64, f64) {
    ((shape.0 as f64 - 1.0) / 2.0, (shape.1 as f64 - 1.0) / 2.0)
}

fn distance_to_center(p: (usize, usize), shape: (usize, usize)) -> f64 {
    let (ci, cj) = center(shape);
    ((p.0 as f64 - ci).powi(2) + (p.1 as f64 - cj).powi(2)).sqrt()
}

/// Mass inside the central disk of `radius` pixels over total mass.
pub fn center_mass_ratio(rho: &ScalarField, radius: f64) -> Result<f64> {
    let total: f64 = rho.sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("center-mass ratio of a field without mass".into()));
    }
    let inside: f64 = rho
        .indexed_iter()
        .filter(|(p, _)| distance_to_center(*p, rho.dim()) <= radius)
        .map(|(_, v)| *v)
        .sum();
    Ok(inside / total)
}

/// Mean `|g|` over the central 3x3 block over mean `|g|` at radius > H/4.
pub fn center_to_outer_ratio(g: &ScalarField) -> f64 {
    let (h, w) = g.dim();
    let (ci, cj) = ((h - 1) / 2, (w - 1) / 2);
    let mut inner = 0.0;
    let mut n_inner = 0usize;
    for i in ci.saturating_sub(1)..=(ci + 1).min(h - 1) {
        for j in cj.saturating_sub(1)..=(cj + 1).min(w - 1) {
            inner += g[(i, j)].abs();
            n_inner += 1;
        }
    }
    let ring_radius = h as f64 / 4.0;
    let (outer, n_outer) = g
        .indexed_iter()
        .filter(|(p, _)| distance_to_center(*p, (h, w)) > ring_radius)
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v.abs(), n + 1));
    (inner / n_inner as f64) / (outer / n_outer.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterBiasReport {
    pub gradient: ScalarField,
    pub ratio: f64,
    pub peak: (usize, usize),
    pub peak_distance: f64,
    pub boundary: Boundary,
    /// Center-mass ratio of a final iterate, when one is supplied.
    pub center_mass: Option<f64>,
}

/// Fidelity-only density gradient at a uniform initialization.
pub fn iter0_center_bias(obs: &Spectrum, model: &ForwardModel, op: OperatorKind, init_value: f64) -> Result<CenterBiasReport> {
    if !(init_value > 0.0) {
        return Err(Error::Domain(format!("uniform init must be > 0, got {init_value}")));
    }
    let weights = LossWeights {
        fidelity: 1.0,
        ..LossWeights::zero()
    };
    let obj = Objective::from_spectrum(model.clone(), op, obs, &weights, Stage::Coarse)?;
    let shape = model.geometry().shape();
    let rho = Array2::from_elem(shape, init_value);
    let omega = Array2::from_elem(shape, initial_larmor());
    let g = obj.value_and_grad(&rho, &omega)?.1.rho;
    let peak = g
        .indexed_iter()
        .fold(((0, 0), f64::NEG_INFINITY), |best, (p, v)| if v.abs() > best.1 { (p, v.abs()) } else { best })
        .0;
    Ok(CenterBiasReport {
        ratio: center_to_outer_ratio(&g),
        peak,
        peak_distance: distance_to_center(peak, shape),
        boundary: model.boundary,
        gradient: g,
        center_mass: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierProfile {
    pub t: Vec<f64>,
    pub loss: Vec<f64>,
    /// Max interior loss minus the larger endpoint loss, floored at 0.
    pub height: f64,
    pub argmax_t: f64,
}

impl BarrierProfile {
    pub fn is_nonincreasing(&self, rel_tol: f64) -> bool {
        let scale = self.loss.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        self.loss.windows(2).all(|w| w[1] <= w[0] + rel_tol * scale)
    }
}

/// Loss along `(1 - t) a + t b` on `n_points` evenly spaced `t` including both ends.
pub fn barrier_profile<F>(mut loss: F, a: &ScalarField, b: &ScalarField, n_points: usize) -> Result<BarrierProfile>
where
    F: FnMut(&ScalarField) -> Result<f64>,
{
    if n_points < 2 {
        return Err(Error::Config("a barrier scan needs at least two points".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let t: Vec<f64> = (0..n_points).map(|i| i as f64 / (n_points - 1) as f64).collect();
    let values = t
        .iter()
        .map(|&s| {
            let x = if s == 0.0 {
                a.clone()
            } else if s == 1.0 {
                b.clone()
            } else {
                a * (1.0 - s) + b * s
            };
            loss(&x)
        })
        .collect::<Result<Vec<f64>>>()?;
    let ends = values[0].max(values[n_points - 1]);
    let (mut arg, mut peak) = (0, f64::NEG_INFINITY);
    for (i, v) in values.iter().enumerate().take(n_points - 1).skip(1) {
        if *v > peak {
            peak = *v;
            arg = i;
        }
    }
    let height = if n_points > 2 { (peak - ends).max(0.0) } else { 0.0 };
    let argmax_t = if height > 0.0 { t[arg] } else if values[0] >= values[n_points - 1] { 0.0 } else { 1.0 };
    Ok(BarrierProfile {
        t,
        loss: values,
        height,
        argmax_t,
    })
}

/// Full objective along the straight path from a collapsed iterate to the truth.
#[allow(clippy::too_many_arguments)]
pub fn energy_barrier_scan(
    rho_collapse: &ScalarField,
    rho_star: &ScalarField,
    omega: &ScalarField,
    obs: &Spectrum,
    model: &ForwardModel,
    op: OperatorKind,
    weights: &LossWeights,
    n_points: usize,
) -> Result<BarrierProfile> {
    let obj = Objective::from_spectrum(model.clone(), op, obs, weights, Stage::Coarse)?;
    barrier_profile(|x| Ok(obj.evaluate(x, omega)?.total), rho_collapse, rho_star, n_points)
}

/// `G probe` with `G = J J^T`, via one backward and one forward-mode pass.
pub fn filter_kernel_probe(field: &NeuralField, params: &[f64], h: usize, w: usize, beta: f64, probe: &ScalarField) -> Result<ScalarField> {
    let x = field.features(h, w, beta);
    field.filter_apply(params, &x, h, w, probe)
}

/// `G probe` from the explicitly assembled density Jacobian.
pub fn filter_kernel_explicit(field: &NeuralField, params: &[f64], h: usize, w: usize, beta: f64, probe: &ScalarField) -> Result<ScalarField> {
    let x = field.features(h, w, beta);
    let j = field.density_jacobian(params, &x, h, w)?;
    let v = probe.iter().cloned().collect::<ndarray::Array1<f64>>();
    let out = j.dot(&j.t().dot(&v));
    Ok(Array2::from_shape_vec((h, w), out.to_vec()).expect("jacobian rows match pixels"))
}

fn fft_magnitude(field: &ScalarField) -> Array2<f64> {
    let (h, w) = field.dim();
    let fft = Fft2::new(h, w);
    let mut buf: Vec<Complex64> = field.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft.forward(&mut buf);
    Array2::from_shape_vec((h, w), buf.iter().map(|c| c.norm()).collect()).expect("fft keeps shape")
}

fn wavenumber(u: usize, n: usize) -> f64 {
    let s = if u <= n / 2 { u as f64 } else { u as f64 - n as f64 };
    2.0 * std::f64::consts::PI * s / n as f64
}

/// Fraction of spectral energy at radial wavenumber below `fraction * k_max`,
/// with `k_max` the largest radial wavenumber on the grid.
pub fn low_frequency_fraction(field: &ScalarField, fraction: f64) -> f64 {
    let (h, w) = field.dim();
    let mag = fft_magnitude(field);
    let kmax = (wavenumber(h / 2, h).powi(2) + wavenumber(w / 2, w).powi(2)).sqrt();
    let (mut low, mut total) = (0.0, 0.0);
    for ((u, v), m) in mag.indexed_iter() {
        let k = (wavenumber(u, h).powi(2) + wavenumber(v, w).powi(2)).sqrt();
        total += m * m;
        if k < fraction * kmax {
            low += m * m;
        }
    }
    if total > 0.0 {
        low / total
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Radial bin centers in rad/px.
    pub k: Vec<f64>,
    /// Mean spectral magnitude per bin.
    pub magnitude: Vec<f64>,
    /// `ln(magnitude / (1 + k)^2)`.
    pub log_envelope: Vec<f64>,
    pub k_max: f64,
    /// Fitted log-slope over `[k_max/8, k_max/2]`, in px.
    pub slope_px: f64,
    /// `-slope_px * spacing`, comparable to the standoff in nm.
    pub decay_length_nm: f64,
    pub dc: f64,
}

/// Radially averaged FFT magnitude of the summed power kernel and its mid-band envelope slope.
pub fn kernel_frequency_decay(kernels: &KernelStack) -> Result<DecayFit> {
    let p = &kernels.summed_power;
    let (h, w) = p.dim();
    let mag = fft_magnitude(p);
    let dk = 2.0 * std::f64::consts::PI / h.max(w) as f64;
    let k_max = (wavenumber(h / 2, h).powi(2) + wavenumber(w / 2, w).powi(2)).sqrt();
    let nbins = (k_max / dk).round() as usize + 1;
    let mut sums = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    for ((u, v), m) in mag.indexed_iter() {
        let k = (wavenumber(u, h).powi(2) + wavenumber(v, w).powi(2)).sqrt();
        let b = ((k / dk).round() as usize).min(nbins - 1);
        sums[b] += m;
        counts[b] += 1;
    }
    let mut k = Vec::new();
    let mut magnitude = Vec::new();
    for b in 0..nbins {
        if counts[b] > 0 {
            k.push(b as f64 * dk);
            magnitude.push(sums[b] / counts[b] as f64);
        }
    }
    let log_envelope: Vec<f64> = k
        .iter()
        .zip(&magnitude)
        .map(|(k, m)| (m / (1.0 + k).powi(ENVELOPE_POWER)).ln())
        .collect();
    let band: Vec<(f64, f64)> = k
        .iter()
        .zip(&log_envelope)
        .filter(|(k, _)| **k >= k_max / 8.0 && **k <= k_max / 2.0)
        .map(|(a, b)| (*a, *b))
        .collect();
    if band.len() < 2 {
        return Err(Error::Degenerate("too few radial bins in the fitting band".into()));
    }
    let slope_px = least_squares_slope(&band);
    Ok(DecayFit {
        dc: mag[(0, 0)],
        k,
        magnitude,
        log_envelope,
        k_max,
        slope_px,
        decay_length_nm: -slope_px * kernels.geometry.spacing,
    })
}

pub fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// On-axis summed power of a uniform square sheet of half-width `half_extent`
/// nm sampled at `spacing` nm, at height `z0`.
pub fn sheet_power(z0: f64, spacing: f64, half_extent: f64) -> Result<f64> {
    let g = GridGeometry::new(2, 2, spacing, z0)?;
    let m = (half_extent / spacing).round() as i64;
    let mut total = 0.0;
    for i in -m..=m {
        for j in -m..=m {
            total += power_at(&g, i as f64 * spacing, j as f64 * spacing);
        }
    }
    Ok(total * spacing * spacing)
}

/// Log-log slope of sheet power against standoff.
pub fn sheet_scaling_slope(standoffs: &[f64], spacing: f64, half_extent: f64) -> Result<f64> {
    let pts = standoffs
        .iter()
        .map(|&z| Ok((z.ln(), sheet_power(z, spacing, half_extent)?.ln())))
        .collect::<Result<Vec<_>>>()?;
    Ok(least_squares_slope(&pts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiPoint {
    pub chi: f64,
    /// Larmor spread within the 1% footprint of either source, over gamma.
    pub chi_measured: f64,
    /// `||F2 - F3||_F / ||F3||_F`.
    pub rel_error: f64,
}

/// Stress geometry: two unit sources one standoff apart across a Larmor step.
pub fn chi_stress_geometry(standoff: f64, n: usize) -> Result<GridGeometry> {
    GridGeometry::new(n, n, standoff / 4.0, standoff)
}

fn chi_scene(n: usize, delta: f64) -> (ScalarField, ScalarField, [(usize, usize); 2]) {
    let mid = n / 2;
    let sources = [(mid, mid - 2), (mid, mid + 2)];
    let mut rho = Array2::zeros((n, n));
    for s in sources {
        rho[s] = 1.0;
    }
    let c = initial_larmor();
    let omega = Array2::from_shape_fn((n, n), |(_, j)| if j < mid { c - delta / 2.0 } else { c + delta / 2.0 });
    (rho, omega, sources)
}

/// Max over the given pixels of the Larmor spread inside the footprint disk, over gamma.
pub fn measured_chi(omega: &ScalarField, kernels: &KernelStack, gamma: f64, at: &[(usize, usize)]) -> f64 {
    let r = kernels.footprint_radius(FOOTPRINT_FRACTION) / kernels.geometry.spacing;
    let mut chi: f64 = 0.0;
    for &(si, sj) in at {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for ((i, j), v) in omega.indexed_iter() {
            if ((i as f64 - si as f64).powi(2) + (j as f64 - sj as f64).powi(2)).sqrt() <= r {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        chi = chi.max((hi - lo) / gamma);
    }
    chi
}

pub fn chi_sweep(chi_values: &[f64], geometry: &GridGeometry, freqs: &FrequencyGrid, lorentz: LorentzianParams) -> Result<Vec<ChiPoint>> {
    let model = ForwardModel::build(geometry, freqs.clone(), lorentz)?;
    let n = geometry.height;
    if geometry.width != n || n < 8 {
        return Err(Error::Config("the stress geometry needs a square grid of at least 8 px".into()));
    }
    chi_values
        .iter()
        .map(|&chi| {
            if !(chi >= 0.0) {
                return Err(Error::Domain(format!("chi must be >= 0, got {chi}")));
            }
            let (rho, omega, sources) = chi_scene(n, chi * lorentz.gamma);
            let f2 = forward_f2(&rho, &omega, &model.kernels, freqs, lorentz.gamma)?;
            let f3 = forward_f3(&rho, &omega, geometry, freqs, lorentz.gamma)?;
            let num = (&f2.data - &f3.data).iter().map(|v| v * v).sum::<f64>().sqrt();
            let den = f3.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(ChiPoint {
                chi,
                chi_measured: measured_chi(&omega, &model.kernels, lorentz.gamma, &sources),
                rel_error: num / den,
            })
        })
        .collect()
}

/// Eight ADMM settings spanning penalty, sparsity and inner-iteration count.
pub fn admm_sweep_configs() -> Vec<AdmmConfig> {
    let mut out = Vec::with_capacity(8);
    for mu in [1e-3, 1e-2] {
        for l1 in [1e-3, 1e-2] {
            for inner_steps in [10, 30] {
                out.push(AdmmConfig {
                    mu,
                    l1,
                    inner_steps,
                    ..AdmmConfig::default()
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmSweepRow {
    pub scene: usize,
    pub operator: OperatorKind,
    pub config: usize,
    pub center_mass: f64,
}

/// ADMM center-mass ratios over scenes, operators and configurations.
pub fn admm_sweep(
    observations: &[Spectrum],
    model: &ForwardModel,
    operators: &[OperatorKind],
    configs: &[AdmmConfig],
    seed: u64,
) -> Result<Vec<AdmmSweepRow>> {
    let mut rows = Vec::new();
    for (s, obs) in observations.iter().enumerate() {
        for &op in operators {
            for (c, cfg) in configs.iter().enumerate() {
                let r = run_admm(obs, model, op, cfg, seed)?;
                rows.push(AdmmSweepRow {
                    scene: s,
                    operator: op,
                    config: c,
                    center_mass: center_mass_ratio(&r.rho_hat, CENTER_MASS_RADIUS)?,
                });
            }
        }
    }
    Ok(rows)
}
