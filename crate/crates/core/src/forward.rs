//! The coherent (F1), incoherent FFT-factorized (F2) and source-side direct (F3)
//! forward maps, plus sensor noise and the F1/F2 operator gap.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{
    lorentzian, lorentzian_sum, Boundary, FrequencyGrid, GridGeometry, KernelId, KernelStack,
    LorentzianParams,
};
use crate::ScalarField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    F1,
    F2,
    F3,
}

impl OperatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::F1 => "f1",
            OperatorKind::F2 => "f2",
            OperatorKind::F3 => "f3",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(OperatorKind::F1),
            "f2" => Ok(OperatorKind::F2),
            "f3" => Ok(OperatorKind::F3),
            other => Err(Error::Config(format!("unknown operator '{other}'"))),
        }
    }
}

/// Measurement `S(omega, r)` stored as `(frequency, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub data: Array3<f64>,
    pub freqs: FrequencyGrid,
    pub geometry: GridGeometry,
}

impl Spectrum {
    pub fn new(data: Array3<f64>, freqs: FrequencyGrid, geometry: GridGeometry) -> Result<Self> {
        let want = [freqs.len(), geometry.height, geometry.width];
        if data.shape() != want {
            return Err(Error::Shape {
                expected: want.to_vec(),
                got: data.shape().to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spectrum".into()));
        }
        Ok(Self { data, freqs, geometry })
    }

    pub fn zeros(freqs: FrequencyGrid, geometry: GridGeometry) -> Self {
        let data = Array3::zeros((freqs.len(), geometry.height, geometry.width));
        Self { data, freqs, geometry }
    }

    /// Frequency-summed noise map `N(r) = sum_w S(w, r)`.
    pub fn noise_map(&self) -> ScalarField {
        self.data.sum_axis(Axis(0))
    }

    /// Total spectral energy, the sum of every entry.
    pub fn energy(&self) -> f64 {
        self.data.sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// `factor x factor` mean pooling of every frequency slice onto the coarsened geometry.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let geometry = self.geometry.coarsened(factor)?;
        let (h, w) = geometry.shape();
        let norm = 1.0 / (factor * factor) as f64;
        let data = Array3::from_shape_fn((self.freqs.len(), h, w), |(f, r, c)| {
            let block = self
                .data
                .slice(ndarray::s![f, r * factor..(r + 1) * factor, c * factor..(c + 1) * factor]);
            block.sum() * norm
        });
        Ok(Self {
            data,
            freqs: self.freqs.clone(),
            geometry,
        })
    }
}

pub(crate) fn check_field(name: &str, field: &ScalarField, geometry: &GridGeometry) -> Result<()> {
    if field.dim() != geometry.shape() {
        return Err(Error::Shape {
            expected: vec![geometry.height, geometry.width],
            got: field.shape().to_vec(),
        });
    }
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.into()));
    }
    Ok(())
}

pub(crate) fn check_density(rho: &ScalarField, geometry: &GridGeometry) -> Result<()> {
    check_field("density", rho, geometry)?;
    if let Some(((row, col), &value)) = rho.indexed_iter().find(|(_, &v)| v < 0.0) {
        return Err(Error::NegativeDensity { row, col, value });
    }
    Ok(())
}

/// Shared forward-model context: cached kernels, frequency grid, linewidth and
/// the boundary treatment of the convolution.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub kernels: Arc<KernelStack>,
    pub freqs: FrequencyGrid,
    pub lorentz: LorentzianParams,
    pub boundary: Boundary,
}

impl ForwardModel {
    pub fn new(kernels: Arc<KernelStack>, freqs: FrequencyGrid, lorentz: LorentzianParams) -> Self {
        Self {
            kernels,
            freqs,
            lorentz,
            boundary: Boundary::Windowed,
        }
    }

    pub fn build(geometry: &GridGeometry, freqs: FrequencyGrid, lorentz: LorentzianParams) -> Result<Self> {
        Ok(Self::new(Arc::new(KernelStack::build(geometry)?), freqs, lorentz))
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.kernels.geometry
    }

    /// Per-pixel frequency-summed Lorentzian `Lambda(r)` and `dLambda/domega_L`.
    pub fn spectral_weight(&self, omega: &ScalarField) -> (ScalarField, ScalarField) {
        let gamma = self.lorentz.gamma;
        let mut lam = Array2::zeros(omega.dim());
        let mut dlam = Array2::zeros(omega.dim());
        for (&w, (l, dl)) in omega.iter().zip(lam.iter_mut().zip(dlam.iter_mut())) {
            let (s, ds) = lorentzian_sum(&self.freqs, w, gamma);
            *l = s;
            *dl = ds;
        }
        (lam, dlam)
    }

    /// Spatial amplitude `A`: `P * rho` for F2, `(G_nv * rho)^2` for F1.
    pub fn amplitude(&self, op: OperatorKind, rho: &ScalarField) -> Result<ScalarField> {
        match op {
            OperatorKind::F2 => self.kernels.convolve(KernelId::Summed, rho, self.boundary),
            OperatorKind::F1 => {
                let b = self.kernels.convolve(KernelId::NvProjected, rho, self.boundary)?;
                Ok(b.mapv(|v| v * v))
            }
            OperatorKind::F3 => Err(Error::Config(
                "the direct simulator has no factorized amplitude".into(),
            )),
        }
    }

    /// Frequency-summed noise map without materializing the spectrum.
    pub fn noise_map(&self, op: OperatorKind, rho: &ScalarField, omega: &ScalarField) -> Result<ScalarField> {
        let g = self.geometry();
        check_density(rho, g)?;
        check_field("larmor field", omega, g)?;
        match op {
            OperatorKind::F3 => Ok(direct_sum(rho, omega, g, &self.freqs, self.lorentz.gamma)
                .sum_axis(Axis(0))),
            _ => {
                let a = self.amplitude(op, rho)?;
                let (lam, _) = self.spectral_weight(omega);
                Ok(a * lam)
            }
        }
    }

    pub fn spectrum(&self, op: OperatorKind, rho: &ScalarField, omega: &ScalarField) -> Result<Spectrum> {
        let g = *self.geometry();
        check_density(rho, &g)?;
        check_field("larmor field", omega, &g)?;
        let data = match op {
            OperatorKind::F3 => direct_sum(rho, omega, &g, &self.freqs, self.lorentz.gamma),
            _ => {
                let a = self.amplitude(op, rho)?;
                modulate(&a, omega, &self.freqs, self.lorentz.gamma)
            }
        };
        Ok(Spectrum {
            data,
            freqs: self.freqs.clone(),
            geometry: g,
        })
    }
}

/// `S(w, r) = amp(r) * L(w; omega(r))`.
fn modulate(amp: &ScalarField, omega: &ScalarField, freqs: &FrequencyGrid, gamma: f64) -> Array3<f64> {
    let (h, w) = amp.dim();
    let mut out = Array3::zeros((freqs.len(), h, w));
    for (f, &wf) in freqs.values().iter().enumerate() {
        let mut slice = out.index_axis_mut(Axis(0), f);
        for ((s, &a), &wl) in slice.iter_mut().zip(amp.iter()).zip(omega.iter()) {
            *s = a * lorentzian(wf, wl, gamma);
        }
    }
    out
}

/// Direct superposition over nonzero source pixels.
fn direct_sum(
    rho: &ScalarField,
    omega: &ScalarField,
    g: &GridGeometry,
    freqs: &FrequencyGrid,
    gamma: f64,
) -> Array3<f64> {
    let (h, w) = g.shape();
    let table = power_table(g);
    let mut out = Array3::zeros((freqs.len(), h, w));
    let mut weighted = Array2::<f64>::zeros((h, w));
    let mut line = vec![0.0; freqs.len()];
    for ((sr, sc), &amp) in rho.indexed_iter() {
        if amp == 0.0 {
            continue;
        }
        let wl = omega[[sr, sc]];
        for (l, &wf) in line.iter_mut().zip(freqs.values()) {
            *l = lorentzian(wf, wl, gamma);
        }
        for ((r, c), v) in weighted.indexed_iter_mut() {
            *v = amp * table[[r + h - 1 - sr, c + w - 1 - sc]];
        }
        for (f, &l) in line.iter().enumerate() {
            let mut slice = out.index_axis_mut(Axis(0), f);
            slice.scaled_add(l, &weighted);
        }
    }
    out
}

fn power_table(g: &GridGeometry) -> Array2<f64> {
    let (h, w) = g.shape();
    Array2::from_shape_fn((2 * h - 1, 2 * w - 1), |(i, j)| {
        let r = g.displacement(i as isize - (h as isize - 1), j as isize - (w as isize - 1));
        let t = crate::physics::green_tensor(r, g.mu0_over_4pi).expect("standoff > 0");
        (0..3).map(|a| t[a][2] * t[a][2]).sum()
    })
}

fn spectrum_from(model_freqs: &FrequencyGrid, geometry: GridGeometry, data: Array3<f64>) -> Spectrum {
    Spectrum {
        data,
        freqs: model_freqs.clone(),
        geometry,
    }
}

pub fn forward_f2(
    rho: &ScalarField,
    omega: &ScalarField,
    kernels: &KernelStack,
    freqs: &FrequencyGrid,
    gamma: f64,
) -> Result<Spectrum> {
    let g = kernels.geometry;
    check_density(rho, &g)?;
    check_field("larmor field", omega, &g)?;
    let a = kernels.convolve(KernelId::Summed, rho, Boundary::Windowed)?;
    Ok(spectrum_from(freqs, g, modulate(&a, omega, freqs, gamma)))
}

pub fn forward_f1(
    rho: &ScalarField,
    omega: &ScalarField,
    kernels: &KernelStack,
    freqs: &FrequencyGrid,
    gamma: f64,
) -> Result<Spectrum> {
    let g = kernels.geometry;
    check_density(rho, &g)?;
    check_field("larmor field", omega, &g)?;
    let b = kernels.convolve(KernelId::NvProjected, rho, Boundary::Windowed)?;
    Ok(spectrum_from(freqs, g, modulate(&b.mapv(|v| v * v), omega, freqs, gamma)))
}

/// Source-side direct simulator; the Lorentzian is evaluated at each source pixel.
pub fn forward_f3(
    rho: &ScalarField,
    omega: &ScalarField,
    geometry: &GridGeometry,
    freqs: &FrequencyGrid,
    gamma: f64,
) -> Result<Spectrum> {
    geometry.validate()?;
    check_density(rho, geometry)?;
    check_field("larmor field", omega, geometry)?;
    Ok(spectrum_from(freqs, *geometry, direct_sum(rho, omega, geometry, freqs, gamma)))
}

/// `F1 - F2` assembled from the cross term, the diagonal discrepancy and the
/// transverse power, checked against the plain subtraction.
pub fn operator_gap(
    rho: &ScalarField,
    omega: &ScalarField,
    kernels: &KernelStack,
    freqs: &FrequencyGrid,
    gamma: f64,
) -> Result<Spectrum> {
    let g = kernels.geometry;
    check_density(rho, &g)?;
    check_field("larmor field", omega, &g)?;
    let bd = Boundary::Windowed;
    let rho2 = rho.mapv(|v| v * v);
    let b = kernels.convolve(KernelId::NvProjected, rho, bd)?;
    let zz_rho2 = kernels.convolve(KernelId::ChannelZz, &rho2, bd)?;
    let cross = b.mapv(|v| v * v) - &zz_rho2;
    let diag = kernels.convolve(KernelId::ChannelZz, &(&rho2 - rho), bd)?;
    let transverse = kernels.convolve(KernelId::ChannelXz, rho, bd)?
        + kernels.convolve(KernelId::ChannelYz, rho, bd)?;
    let gap_amp = cross + diag - transverse;
    let gap = modulate(&gap_amp, omega, freqs, gamma);

    let f1 = forward_f1(rho, omega, kernels, freqs, gamma)?;
    let f2 = forward_f2(rho, omega, kernels, freqs, gamma)?;
    let diff = &f1.data - &f2.data;
    let scale = f1.max().max(f2.max());
    let err = diff
        .iter()
        .zip(gap.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale > 0.0 && err > 1e-10 * scale {
        return Err(Error::Consistency(format!(
            "operator gap decomposition disagrees with F1 - F2 by {err:e} (scale {scale:e})"
        )));
    }
    Ok(spectrum_from(freqs, g, gap))
}

/// Adds i.i.d. Gaussian noise with `sigma = noise_level * max(spectrum)`.
pub fn add_sensor_noise(spectrum: &Spectrum, noise_level: f64, seed: u64) -> Result<Spectrum> {
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(Error::Domain(format!("noise level must be >= 0, got {noise_level}")));
    }
    let mut out = spectrum.clone();
    if noise_level == 0.0 {
        return Ok(out);
    }
    let sigma = noise_level * spectrum.max();
    if !(sigma > 0.0) {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::build_kernel_stack;
    use rand::Rng;

    fn setup(n: usize) -> (KernelStack, FrequencyGrid) {
        let g = GridGeometry::new(n, n, 20.0, 20.0).unwrap();
        (build_kernel_stack(&g).unwrap(), FrequencyGrid::default())
    }

    fn sparse_scene(n: usize, k: usize, seed: u64) -> (ScalarField, ScalarField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rho = Array2::zeros((n, n));
        let mut omega = Array2::zeros((n, n));
        for _ in 0..k {
            let (r, c) = (rng.random_range(1..n - 1), rng.random_range(1..n - 1));
            rho[[r, c]] = rng.random_range(0.5..1.0);
            omega[[r, c]] = rng.random_range(1.5..2.5);
        }
        (rho, omega)
    }

    fn rel(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn single_source_noise_map_is_translated_kernel() {
        let (k, f) = setup(12);
        let mut rho = Array2::zeros((12, 12));
        rho[[4, 7]] = 1.0;
        let omega = Array2::from_elem((12, 12), 2.0);
        let n = forward_f2(&rho, &omega, &k, &f, 0.5).unwrap().noise_map();
        let (lam, _) = lorentzian_sum(&f, 2.0, 0.5);
        let peak = k.summed_at(0, 0) * lam;
        for ((r, c), &v) in n.indexed_iter() {
            let want = k.summed_at(r as isize - 4, c as isize - 7) * lam;
            assert!((v - want).abs() <= 1e-12 * peak);
        }
    }

    #[test]
    fn f2_is_linear_and_f1_quadratic() {
        let (k, f) = setup(16);
        let (rho, omega) = sparse_scene(16, 5, 1);
        let s = forward_f2(&rho, &omega, &k, &f, 0.5).unwrap();
        for c in [0.5, 3.0] {
            let sc = forward_f2(&rho.mapv(|v| c * v), &omega, &k, &f, 0.5).unwrap();
            assert!(rel(&sc.data, &s.data.mapv(|v| c * v)) < 1e-12);
        }
        let s1 = forward_f1(&rho, &omega, &k, &f, 0.5).unwrap();
        let s1c = forward_f1(&rho.mapv(|v| 2.0 * v), &omega, &k, &f, 0.5).unwrap();
        assert!(rel(&s1c.data, &s1.data.mapv(|v| 4.0 * v)) < 1e-12);
    }

    #[test]
    fn f2_matches_f3_for_constant_larmor() {
        let (k, f) = setup(16);
        let (rho, _) = sparse_scene(16, 6, 2);
        let omega = Array2::from_elem((16, 16), 1.8);
        let a = forward_f2(&rho, &omega, &k, &f, 0.5).unwrap();
        let b = forward_f3(&rho, &omega, &k.geometry, &f, 0.5).unwrap();
        assert!(rel(&a.data, &b.data) < 1e-12);
    }

    #[test]
    fn zero_density_gives_zero_spectrum() {
        let (k, f) = setup(8);
        let rho = Array2::zeros((8, 8));
        let omega = Array2::from_elem((8, 8), 2.0);
        assert!(forward_f3(&rho, &omega, &k.geometry, &f, 0.5).unwrap().data.iter().all(|&v| v == 0.0));
        let gap = operator_gap(&rho, &omega, &k, &f, 0.5).unwrap();
        assert!(gap.data.iter().all(|&v| v.abs() < 1e-300));
    }

    #[test]
    fn negative_density_is_rejected() {
        let (k, f) = setup(8);
        let mut rho = Array2::zeros((8, 8));
        rho[[2, 3]] = -0.1;
        let omega = Array2::zeros((8, 8));
        match forward_f2(&rho, &omega, &k, &f, 0.5) {
            Err(Error::NegativeDensity { row: 2, col: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_source_f1_has_no_transverse_power() {
        let (k, f) = setup(10);
        let mut rho = Array2::zeros((10, 10));
        rho[[5, 5]] = 1.0;
        let omega = Array2::from_elem((10, 10), 2.2);
        let s = forward_f1(&rho, &omega, &k, &f, 0.5).unwrap();
        let (lam, _) = lorentzian_sum(&f, 2.2, 0.5);
        let n = s.noise_map();
        let peak = k.nv_projected[[9, 9]].powi(2) * lam;
        for ((r, c), &v) in n.indexed_iter() {
            let d = k.nv_projected[[r + 4, c + 4]];
            assert!((v - d * d * lam).abs() <= 1e-12 * peak);
        }
    }

    #[test]
    fn single_source_gap_is_minus_transverse_power() {
        let (k, f) = setup(10);
        let mut rho = Array2::zeros((10, 10));
        rho[[3, 6]] = 1.0;
        let omega = Array2::from_elem((10, 10), 2.0);
        let gap = operator_gap(&rho, &omega, &k, &f, 0.5).unwrap();
        let (lam, _) = lorentzian_sum(&f, 2.0, 0.5);
        let n = gap.noise_map();
        let peak = k.summed_power.iter().fold(0.0f64, |m, &v| m.max(v));
        for ((r, c), &v) in n.indexed_iter() {
            let idx = [r + 9 - 3, c + 9 - 6];
            let want = -(k.channel_power[0][idx] + k.channel_power[1][idx]) * lam;
            assert!((v - want).abs() <= 1e-10 * peak * lam);
        }
    }

    #[test]
    fn two_source_cross_term_matches_hand_expansion() {
        let (k, f) = setup(12);
        let mut rho = Array2::zeros((12, 12));
        rho[[6, 5]] = 1.0;
        rho[[6, 6]] = 1.0;
        let omega = Array2::from_elem((12, 12), 2.0);
        let gap = operator_gap(&rho, &omega, &k, &f, 0.5).unwrap().noise_map();
        let (lam, _) = lorentzian_sum(&f, 2.0, 0.5);
        let gz = |r: usize, c: usize, sc: usize| k.nv_projected[[r + 11 - 6, c + 11 - sc]];
        let ch = |a: usize, r: usize, c: usize, sc: usize| k.channel_power[a][[r + 11 - 6, c + 11 - sc]];
        for r in 0..12 {
            for c in 0..12 {
                let cross = 2.0 * gz(r, c, 5) * gz(r, c, 6);
                let transverse: f64 = [5, 6].iter().map(|&s| ch(0, r, c, s) + ch(1, r, c, s)).sum();
                let want = (cross - transverse) * lam;
                assert!((gap[[r, c]] - want).abs() <= 1e-10 * (cross.abs() + transverse) * lam + 1e-300);
            }
        }
    }

    #[test]
    fn gap_decomposition_on_random_scenes() {
        let (k, f) = setup(16);
        for seed in 0..5 {
            let n_src = 2 + (seed as usize % 4);
            let (rho, omega) = sparse_scene(16, n_src, 100 + seed);
            let omega = omega.mapv(|w| if w == 0.0 { 2.0 } else { w });
            operator_gap(&rho, &omega, &k, &f, 0.5).unwrap();
        }
    }

    #[test]
    fn sensor_noise_statistics_and_determinism() {
        let g = GridGeometry::new(64, 64, 20.0, 20.0).unwrap();
        let f = FrequencyGrid::default();
        let mut s = Spectrum::zeros(f, g);
        s.data[[0, 0, 0]] = 2.0;
        assert_eq!(add_sensor_noise(&s, 0.0, 1).unwrap(), s);
        let a = add_sensor_noise(&s, 0.01, 7).unwrap();
        let b = add_sensor_noise(&s, 0.01, 7).unwrap();
        assert_eq!(a, b);
        let d = &a.data - &s.data;
        let n = d.len() as f64;
        let mean = d.sum() / n;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / 0.02 - 1.0).abs() < 0.05);
    }

    #[test]
    fn frequency_factorization_holds() {
        let (k, f) = setup(12);
        let (rho, omega) = sparse_scene(12, 4, 9);
        let omega = omega.mapv(|w| if w == 0.0 { 1.7 } else { w });
        for s in [
            forward_f1(&rho, &omega, &k, &f, 0.5).unwrap(),
            forward_f2(&rho, &omega, &k, &f, 0.5).unwrap(),
        ] {
            for ((r, c), &wl) in omega.indexed_iter() {
                let (a, b) = (3, 17);
                let ratio = s.data[[a, r, c]] / s.data[[b, r, c]];
                let want = lorentzian(f.values()[a], wl, 0.5) / lorentzian(f.values()[b], wl, 0.5);
                assert!((ratio - want).abs() <= 1e-10 * want);
            }
        }
    }

    #[test]
    fn f2_energy_is_additive_and_f1_is_not() {
        let (k, f) = setup(16);
        let omega = Array2::from_elem((16, 16), 2.0);
        let mut a = Array2::zeros((16, 16));
        a[[8, 7]] = 1.0;
        let mut b = Array2::zeros((16, 16));
        b[[8, 8]] = 1.0;
        let both = &a + &b;
        let e2 = |r: &ScalarField| forward_f2(r, &omega, &k, &f, 0.5).unwrap().energy();
        let e1 = |r: &ScalarField| forward_f1(r, &omega, &k, &f, 0.5).unwrap().energy();
        assert!((e2(&both) - e2(&a) - e2(&b)).abs() <= 1e-12 * e2(&both));
        assert!((e1(&both) - e1(&a) - e1(&b)).abs() > 1e-3 * e1(&both));
    }

    #[test]
    fn model_noise_map_matches_spectrum_sum() {
        let (k, f) = setup(12);
        let model = ForwardModel::new(Arc::new(k), f, LorentzianParams::default());
        let (rho, omega) = sparse_scene(12, 4, 3);
        for op in [OperatorKind::F1, OperatorKind::F2, OperatorKind::F3] {
            let a = model.noise_map(op, &rho, &omega).unwrap();
            let b = model.spectrum(op, &rho, &omega).unwrap().noise_map();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn downsample_pools_blocks() {
        let g = GridGeometry::new(4, 4, 10.0, 20.0).unwrap();
        let f = FrequencyGrid::uniform(1.0, 2.0, 2).unwrap();
        let data = Array3::from_shape_fn((2, 4, 4), |(a, r, c)| (a * 16 + r * 4 + c) as f64);
        let s = Spectrum::new(data, f, g).unwrap();
        let d = s.downsample(2).unwrap();
        assert_eq!(d.geometry.spacing, 20.0);
        assert_eq!(d.data[[0, 0, 0]], 2.5);
        assert_eq!(d.data[[1, 1, 1]], 16.0 + 12.5);
    }

    #[test]
    fn operator_parsing() {
        assert_eq!("F2".parse::<OperatorKind>().unwrap(), OperatorKind::F2);
        assert!("f4".parse::<OperatorKind>().is_err());
    }
}
