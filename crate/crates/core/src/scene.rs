//! Benchmark scene classes, seeded ground-truth sampling and observation synthesis.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{add_sensor_noise, ForwardModel, OperatorKind, Spectrum};
use crate::physics::GridGeometry;
use crate::ScalarField;

pub const LARMOR_BAND: (f64, f64) = (1.5, 2.5);
pub const AMPLITUDE_RANGE: (f64, f64) = (0.5, 1.0);
pub const DEFAULT_NOISE_LEVEL: f64 = 0.01;
const MAX_ATTEMPTS: usize = 10_000;

/// Effective point-spread width `2 z0 sqrt(ln 2 / (k z0 + 3))` in nm.
pub fn psf_width(z0: f64, k: f64) -> f64 {
    2.0 * z0 * (std::f64::consts::LN_2 / (k * z0 + 3.0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountBand {
    Few,
    Medium,
    Many,
}

impl CountBand {
    pub fn range(self) -> (usize, usize) {
        match self {
            CountBand::Few => (1, 3),
            CountBand::Medium => (4, 12),
            CountBand::Many => (20, 40),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeparationBand {
    Close,
    Medium,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SceneClass {
    count: CountBand,
    separation: SeparationBand,
}

impl SceneClass {
    pub const ALL: [SceneClass; 8] = [
        SceneClass::of(CountBand::Few, SeparationBand::Close),
        SceneClass::of(CountBand::Few, SeparationBand::Medium),
        SceneClass::of(CountBand::Few, SeparationBand::Far),
        SceneClass::of(CountBand::Medium, SeparationBand::Close),
        SceneClass::of(CountBand::Medium, SeparationBand::Medium),
        SceneClass::of(CountBand::Medium, SeparationBand::Far),
        SceneClass::of(CountBand::Many, SeparationBand::Close),
        SceneClass::of(CountBand::Many, SeparationBand::Far),
    ];

    const fn of(count: CountBand, separation: SeparationBand) -> Self {
        Self { count, separation }
    }

    pub fn new(count: CountBand, separation: SeparationBand) -> Result<Self> {
        let c = Self { count, separation };
        if Self::ALL.contains(&c) {
            Ok(c)
        } else {
            Err(Error::Config(format!("scene class {c} is not one of the eight benchmark classes")))
        }
    }

    pub fn count_band(&self) -> CountBand {
        self.count
    }

    pub fn separation_band(&self) -> SeparationBand {
        self.separation
    }

    /// Allowed minimum pairwise separation `[lo, hi]` in pixels.
    pub fn separation_px(&self, geometry: &GridGeometry) -> (f64, f64) {
        let z = geometry.standoff / geometry.spacing;
        match self.separation {
            // Closer than the point-spread width, rounded up to whole pixels so
            // that the band is reachable on a pixel lattice.
            SeparationBand::Close => {
                let w = (psf_width(geometry.standoff, 0.0) / geometry.spacing).ceil().max(1.0);
                (1.0, w)
            }
            SeparationBand::Medium => (z.max(1.0), 2.0 * z),
            SeparationBand::Far => (3.0 * z, f64::INFINITY),
        }
    }
}

impl fmt::Display for SceneClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self.count {
            CountBand::Few => "few",
            CountBand::Medium => "medium",
            CountBand::Many => "many",
        };
        let s = match self.separation {
            SeparationBand::Close => "close",
            SeparationBand::Medium => "medium",
            SeparationBand::Far => "far",
        };
        write!(f, "{c}/{s}")
    }
}

impl FromStr for SceneClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid scene class '{s}' (expected e.g. many/far)"));
        let (c, p) = s.split_once(['/', '_']).ok_or_else(bad)?;
        let count = match c {
            "few" => CountBand::Few,
            "medium" => CountBand::Medium,
            "many" => CountBand::Many,
            _ => return Err(bad()),
        };
        let separation = match p {
            "close" => SeparationBand::Close,
            "medium" => SeparationBand::Medium,
            "far" => SeparationBand::Far,
            _ => return Err(bad()),
        };
        Self::new(count, separation)
    }
}

impl TryFrom<String> for SceneClass {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SceneClass> for String {
    fn from(c: SceneClass) -> String {
        c.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub row: usize,
    pub col: usize,
    pub amplitude: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub rho_true: ScalarField,
    pub omega_true: ScalarField,
    pub sources: Vec<Source>,
    pub observed: Option<Spectrum>,
    pub class: SceneClass,
    pub geometry: GridGeometry,
    pub generator_operator: Option<OperatorKind>,
    pub noise_level: f64,
    pub seed: u64,
}

impl Scene {
    pub fn from_sources(geometry: GridGeometry, class: SceneClass, sources: Vec<Source>, seed: u64) -> Result<Self> {
        geometry.validate()?;
        let (h, w) = geometry.shape();
        let mut rho = Array2::zeros((h, w));
        let mut omega = Array2::zeros((h, w));
        for s in &sources {
            if s.row == 0 || s.col == 0 || s.row + 1 >= h || s.col + 1 >= w {
                return Err(Error::Domain(format!("source at ({}, {}) is not strictly inside the grid", s.row, s.col)));
            }
            rho[[s.row, s.col]] = s.amplitude;
            omega[[s.row, s.col]] = s.omega;
        }
        Ok(Self {
            rho_true: rho,
            omega_true: omega,
            sources,
            observed: None,
            class,
            geometry,
            generator_operator: None,
            noise_level: 0.0,
            seed,
        })
    }

    /// Smallest pairwise source distance in pixels, `None` for fewer than two sources.
    pub fn min_separation_px(&self) -> Option<f64> {
        min_pairwise(&self.sources.iter().map(|s| (s.row, s.col)).collect::<Vec<_>>())
    }

    /// Synthesizes the observation with `operator` and Gaussian sensor noise.
    pub fn observe(&mut self, model: &ForwardModel, operator: OperatorKind, noise_level: f64) -> Result<()> {
        if model.geometry() != &self.geometry {
            return Err(Error::Geometry("forward model geometry differs from the scene".into()));
        }
        let clean = model.spectrum(operator, &self.rho_true, &self.omega_true)?;
        let noisy = add_sensor_noise(&clean, noise_level, noise_seed(self.seed))?;
        self.observed = Some(noisy);
        self.generator_operator = Some(operator);
        self.noise_level = noise_level;
        Ok(())
    }

    pub fn observed(&self) -> Result<&Spectrum> {
        self.observed
            .as_ref()
            .ok_or_else(|| Error::Config("scene has no observation".into()))
    }
}

/// Seed of the sensor-noise stream for a scene seed.
pub fn noise_seed(seed: u64) -> u64 {
    seed ^ 0x6e6f_6973_655f_7365
}

fn dist(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    (dr * dr + dc * dc).sqrt()
}

fn min_pairwise(pos: &[(usize, usize)]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let d = dist(pos[i], pos[j]);
            best = Some(best.map_or(d, |b: f64| b.min(d)));
        }
    }
    best
}

/// Draws a ground-truth scene (no observation) of the given class.
pub fn sample_scene(class: SceneClass, geometry: &GridGeometry, seed: u64) -> Result<Scene> {
    geometry.validate()?;
    let (h, w) = geometry.shape();
    if h < 3 || w < 3 {
        return Err(Error::Infeasible("grid has no interior pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kmin, kmax) = class.count_band().range();
    let k = rng.random_range(kmin..=kmax);
    let (lo, hi) = class.separation_px(geometry);
    let interior = |rng: &mut ChaCha8Rng| (rng.random_range(1..h - 1), rng.random_range(1..w - 1));

    let mut attempts = 0usize;
    let mut pos: Vec<(usize, usize)> = Vec::with_capacity(k);
    // An anchor pair inside the band guarantees the minimum-separation upper bound.
    if k >= 2 && hi.is_finite() {
        let reach = hi.floor() as i64;
        loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::Infeasible(format!("{class} on a {h}x{w} grid")));
            }
            let a = interior(&mut rng);
            let dr = rng.random_range(-reach..=reach);
            let dc = rng.random_range(-reach..=reach);
            let (br, bc) = (a.0 as i64 + dr, a.1 as i64 + dc);
            if br < 1 || bc < 1 || br >= h as i64 - 1 || bc >= w as i64 - 1 {
                continue;
            }
            let b = (br as usize, bc as usize);
            let d = dist(a, b);
            if d >= lo && d <= hi {
                pos.push(a);
                pos.push(b);
                break;
            }
        }
    }
    while pos.len() < k {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Infeasible(format!("{class} on a {h}x{w} grid after {MAX_ATTEMPTS} attempts")));
        }
        let p = interior(&mut rng);
        if pos.iter().all(|&q| dist(p, q) >= lo) {
            pos.push(p);
        }
    }
    let sources = pos
        .into_iter()
        .map(|(row, col)| Source {
            row,
            col,
            amplitude: rng.random_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1),
            omega: rng.random_range(LARMOR_BAND.0..=LARMOR_BAND.1),
        })
        .collect();
    Scene::from_sources(*geometry, class, sources, seed)
}
