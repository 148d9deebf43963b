//! Dipolar Green tensor, Lorentzian response and the sampled power kernels
//! shared by every forward operator.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conv::{padded_size, Fft2, KernelSpectrum};
use crate::error::{Error, Result};
use crate::ScalarField;

/// Sensing geometry. Lengths are in nm; `mu0_over_4pi = 1` is the dimensionless mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    pub spacing: f64,
    pub standoff: f64,
    pub mu0_over_4pi: f64,
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            spacing: 20.0,
            standoff: 20.0,
            mu0_over_4pi: 1.0,
        }
    }
}

impl GridGeometry {
    pub fn new(height: usize, width: usize, spacing: f64, standoff: f64) -> Result<Self> {
        let g = Self {
            height,
            width,
            spacing,
            standoff,
            mu0_over_4pi: 1.0,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Geometry(format!(
                "grid must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Geometry(format!("spacing must be > 0, got {}", self.spacing)));
        }
        if !(self.standoff > 0.0 && self.standoff.is_finite()) {
            return Err(Error::Geometry(format!("standoff must be > 0, got {}", self.standoff)));
        }
        if !self.mu0_over_4pi.is_finite() {
            return Err(Error::Geometry("prefactor must be finite".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Same field of view at half the resolution (used by the coarse stage).
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Geometry(format!(
                "{}x{} grid is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let g = Self {
            height: self.height / factor,
            width: self.width / factor,
            spacing: self.spacing * factor as f64,
            ..*self
        };
        g.validate()?;
        Ok(g)
    }

    /// Separation vector from a source pixel to a readout pixel, `(dx, dy, z0)`.
    /// Columns run along x, rows along y.
    pub fn displacement(&self, d_row: isize, d_col: isize) -> [f64; 3] {
        [
            d_col as f64 * self.spacing,
            d_row as f64 * self.spacing,
            self.standoff,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianParams {
    pub gamma: f64,
}

impl Default for LorentzianParams {
    fn default() -> Self {
        Self { gamma: 0.5 }
    }
}

impl LorentzianParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Domain(format!("linewidth must be > 0, got {gamma}")));
        }
        Ok(Self { gamma })
    }
}

/// Sorted measurement frequencies in GHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    values: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("frequency grid is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("frequency grid has non-finite entries".into()));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("frequency grid must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    /// `n` evenly spaced frequencies on `[start, end]`.
    pub fn uniform(start: f64, end: f64, n: usize) -> Result<Self> {
        if n == 1 {
            return Self::new(vec![start]);
        }
        let step = (end - start) / (n - 1) as f64;
        Self::new((0..n).map(|i| start + step * i as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        Self::uniform(1.0, 3.0, 50).expect("default grid is valid")
    }
}

/// `G_ia(R) = prefactor * (3 R_i R_a - |R|^2 delta_ia) / |R|^5`.
pub fn green_tensor(r: [f64; 3], prefactor: f64) -> Result<[[f64; 3]; 3]> {
    let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    if !(r2 > 0.0) {
        return Err(Error::Domain("Green tensor is singular at R = 0".into()));
    }
    let inv_r5 = prefactor / (r2 * r2 * r2.sqrt());
    let mut g = [[0.0; 3]; 3];
    for i in 0..3 {
        for a in i..3 {
            let delta = if i == a { r2 } else { 0.0 };
            g[i][a] = (3.0 * r[i] * r[a] - delta) * inv_r5;
            g[a][i] = g[i][a];
        }
    }
    Ok(g)
}

pub fn lorentzian(omega: f64, omega_l: f64, gamma: f64) -> f64 {
    let d = omega - omega_l;
    let g2 = gamma * gamma;
    g2 / (d * d + g2)
}

/// Derivative of [`lorentzian`] with respect to the resonance `omega_l`.
pub fn lorentzian_d_omega_l(omega: f64, omega_l: f64, gamma: f64) -> f64 {
    let d = omega - omega_l;
    let g2 = gamma * gamma;
    let den = d * d + g2;
    2.0 * g2 * d / (den * den)
}

/// Frequency-summed Lorentzian `sum_w L(w; omega_l)` and its derivative.
pub fn lorentzian_sum(freqs: &FrequencyGrid, omega_l: f64, gamma: f64) -> (f64, f64) {
    freqs.values().iter().fold((0.0, 0.0), |(s, ds), &w| {
        (s + lorentzian(w, omega_l, gamma), ds + lorentzian_d_omega_l(w, omega_l, gamma))
    })
}

/// Selects one of the cached kernels of a [`KernelStack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelId {
    ChannelXz,
    ChannelYz,
    ChannelZz,
    Summed,
    NvProjected,
}

const KERNEL_IDS: [KernelId; 5] = [
    KernelId::ChannelXz,
    KernelId::ChannelYz,
    KernelId::ChannelZz,
    KernelId::Summed,
    KernelId::NvProjected,
];

/// How the forward convolution treats the observation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Linear convolution cut to the observation window.
    #[default]
    Windowed,
    /// Circular convolution with the kernel folded onto the grid torus.
    Periodic,
}

/// Dipolar power kernels sampled on the full `(2H-1) x (2W-1)` displacement support,
/// with frequency-domain caches for both boundary treatments. Immutable after build.
#[derive(Debug, Clone)]
pub struct KernelStack {
    pub geometry: GridGeometry,
    /// `|G_xz|^2`, `|G_yz|^2`, `|G_zz|^2`.
    pub channel_power: [ScalarField; 3],
    pub summed_power: ScalarField,
    /// `G_nv` for the NV axis `n = (0, 0, 1)`.
    pub nv_projected: ScalarField,
    windowed_fft: Fft2,
    periodic_fft: Fft2,
    windowed: Vec<KernelSpectrum>,
    periodic: Vec<KernelSpectrum>,
}

impl KernelStack {
    pub fn build(geometry: &GridGeometry) -> Result<Self> {
        build_kernel_stack(geometry)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.geometry.shape()
    }

    pub fn kernel(&self, id: KernelId) -> &ScalarField {
        match id {
            KernelId::ChannelXz => &self.channel_power[0],
            KernelId::ChannelYz => &self.channel_power[1],
            KernelId::ChannelZz => &self.channel_power[2],
            KernelId::Summed => &self.summed_power,
            KernelId::NvProjected => &self.nv_projected,
        }
    }

    fn slot(id: KernelId) -> usize {
        KERNEL_IDS.iter().position(|k| *k == id).expect("listed")
    }

    /// Convolution of `field` with a cached kernel.
    pub fn convolve(&self, id: KernelId, field: &ScalarField, boundary: Boundary) -> Result<ScalarField> {
        let i = Self::slot(id);
        match boundary {
            Boundary::Windowed => self.windowed[i].convolve(field, &self.windowed_fft),
            Boundary::Periodic => self.periodic[i].convolve(field, &self.periodic_fft),
        }
    }

    /// Adjoint of [`convolve`](Self::convolve).
    pub fn correlate(&self, id: KernelId, field: &ScalarField, boundary: Boundary) -> Result<ScalarField> {
        let i = Self::slot(id);
        match boundary {
            Boundary::Windowed => self.windowed[i].correlate(field, &self.windowed_fft),
            Boundary::Periodic => self.periodic[i].correlate(field, &self.periodic_fft),
        }
    }

    /// Value of the summed power kernel at a displacement (readout minus source), in pixels.
    pub fn summed_at(&self, d_row: isize, d_col: isize) -> f64 {
        let (h, w) = self.shape();
        self.summed_power[[
            (d_row + h as isize - 1) as usize,
            (d_col + w as isize - 1) as usize,
        ]]
    }

    /// Radius (nm) at which the summed power falls to `fraction` of its on-axis value.
    pub fn footprint_radius(&self, fraction: f64) -> f64 {
        let g = &self.geometry;
        let peak = power_at(g, 0.0, 0.0);
        // P is radially monotone; bisection on the continuous profile.
        let (mut lo, mut hi) = (0.0, g.standoff);
        while power_at(g, hi, 0.0) > fraction * peak {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if power_at(g, mid, 0.0) > fraction * peak {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// `P(R) = sum_a |G_az(R)|^2` at a lateral offset `(dx, dy)` in nm.
pub fn power_at(geometry: &GridGeometry, dx: f64, dy: f64) -> f64 {
    let g = green_tensor([dx, dy, geometry.standoff], geometry.mu0_over_4pi)
        .expect("standoff > 0 keeps R nonzero");
    (0..3).map(|a| g[a][2] * g[a][2]).sum()
}

pub fn build_kernel_stack(geometry: &GridGeometry) -> Result<KernelStack> {
    geometry.validate()?;
    let (h, w) = geometry.shape();
    let support = (2 * h - 1, 2 * w - 1);
    let mut channels = [Array2::zeros(support), Array2::zeros(support), Array2::zeros(support)];
    let mut nv = Array2::zeros(support);
    for i in 0..support.0 {
        for j in 0..support.1 {
            let r = geometry.displacement(i as isize - (h as isize - 1), j as isize - (w as isize - 1));
            let g = green_tensor(r, geometry.mu0_over_4pi)?;
            for (a, ch) in channels.iter_mut().enumerate() {
                ch[[i, j]] = g[a][2] * g[a][2];
            }
            nv[[i, j]] = g[2][2];
        }
    }
    let summed = &channels[0] + &channels[1] + &channels[2];

    let (ph, pw) = padded_size(h, w);
    let windowed_fft = Fft2::new(ph, pw);
    let periodic_fft = Fft2::new(h, w);
    let by_id = |id: KernelId| -> &Array2<f64> {
        match id {
            KernelId::ChannelXz => &channels[0],
            KernelId::ChannelYz => &channels[1],
            KernelId::ChannelZz => &channels[2],
            KernelId::Summed => &summed,
            KernelId::NvProjected => &nv,
        }
    };
    let windowed = KERNEL_IDS
        .iter()
        .map(|&id| KernelSpectrum::windowed(by_id(id), (h, w), &windowed_fft))
        .collect::<Result<Vec<_>>>()?;
    let periodic = KERNEL_IDS
        .iter()
        .map(|&id| KernelSpectrum::periodic(by_id(id), (h, w), &periodic_fft))
        .collect::<Result<Vec<_>>>()?;

    Ok(KernelStack {
        geometry: *geometry,
        channel_power: channels,
        summed_power: summed,
        nv_projected: nv,
        windowed_fft,
        periodic_fft,
        windowed,
        periodic,
    })
}
