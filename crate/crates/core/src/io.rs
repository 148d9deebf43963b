//! On-disk container: raw little-endian f64 arrays with JSON sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, OperatorKind, Spectrum};
use crate::physics::{FrequencyGrid, GridGeometry, LorentzianParams};
use crate::scene::{sample_scene, Scene, SceneClass, Source};
use crate::ScalarField;

pub fn write_f64(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(f64::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64(path: &Path, len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != len * 8 {
        return Err(Error::Shape {
            expected: vec![len * 8],
            got: vec![bytes.len()],
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_field(path: &Path, field: &ScalarField) -> Result<()> {
    write_f64(path, field.iter().copied())
}

pub fn read_field(path: &Path, shape: (usize, usize)) -> Result<ScalarField> {
    let v = read_f64(path, shape.0 * shape.1)?;
    Ok(Array2::from_shape_vec(shape, v).expect("length checked"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub class: SceneClass,
    pub seed: u64,
    pub geometry: GridGeometry,
    pub freqs: Vec<f64>,
    pub gamma: f64,
    pub operator: Option<OperatorKind>,
    pub noise_level: f64,
    pub sources: Vec<Source>,
    pub rho_shape: [usize; 2],
    pub omega_shape: [usize; 2],
    pub spectrum_shape: Option<[usize; 3]>,
}

pub fn save_scene(dir: &Path, id: &str, scene: &Scene, gamma: f64) -> Result<()> {
    create_dir(dir)?;
    let (h, w) = scene.geometry.shape();
    write_field(&dir.join("rho.f64"), &scene.rho_true)?;
    write_field(&dir.join("omega.f64"), &scene.omega_true)?;
    let (freqs, spectrum_shape) = match &scene.observed {
        Some(s) => {
            write_f64(&dir.join("spectrum.f64"), s.data.iter().copied())?;
            (s.freqs.values().to_vec(), Some([s.freqs.len(), h, w]))
        }
        None => (Vec::new(), None),
    };
    let meta = SceneMeta {
        id: id.to_string(),
        class: scene.class,
        seed: scene.seed,
        geometry: scene.geometry,
        freqs,
        gamma,
        operator: scene.generator_operator,
        noise_level: scene.noise_level,
        sources: scene.sources.clone(),
        rho_shape: [h, w],
        omega_shape: [h, w],
        spectrum_shape,
    };
    write_json(&dir.join("meta.json"), &meta)
}

pub fn load_scene(dir: &Path) -> Result<(Scene, SceneMeta)> {
    let meta: SceneMeta = read_json(&dir.join("meta.json"))?;
    let shape = (meta.rho_shape[0], meta.rho_shape[1]);
    let rho = read_field(&dir.join("rho.f64"), shape)?;
    let omega = read_field(&dir.join("omega.f64"), (meta.omega_shape[0], meta.omega_shape[1]))?;
    let observed = match meta.spectrum_shape {
        Some(s) => {
            let v = read_f64(&dir.join("spectrum.f64"), s[0] * s[1] * s[2])?;
            let data = Array3::from_shape_vec((s[0], s[1], s[2]), v).expect("length checked");
            Some(Spectrum::new(data, FrequencyGrid::new(meta.freqs.clone())?, meta.geometry)?)
        }
        None => None,
    };
    let scene = Scene {
        rho_true: rho,
        omega_true: omega,
        sources: meta.sources.clone(),
        observed,
        class: meta.class,
        geometry: meta.geometry,
        generator_operator: meta.operator,
        noise_level: meta.noise_level,
        seed: meta.seed,
    };
    Ok((scene, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub dir: String,
    pub class: SceneClass,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub geometry: GridGeometry,
    pub operator: OperatorKind,
    pub noise_level: f64,
    pub seed: u64,
    pub class_mix: Vec<SceneClass>,
    pub freqs: Vec<f64>,
    pub gamma: f64,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join("manifest.json"))
    }

    pub fn scene_dirs(&self, root: &Path) -> Vec<PathBuf> {
        self.scenes.iter().map(|e| root.join(&e.dir)).collect()
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Dataset generation settings.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub n: usize,
    pub class_mix: Vec<SceneClass>,
    pub geometry: GridGeometry,
    pub freqs: FrequencyGrid,
    pub lorentz: LorentzianParams,
    pub operator: OperatorKind,
    pub noise_level: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn class_of(&self, index: usize) -> SceneClass {
        self.class_mix[index % self.class_mix.len()]
    }

    /// Scene `index` with its observation; seeds are `seed + index`.
    pub fn make_scene(&self, model: &ForwardModel, index: usize) -> Result<Scene> {
        let mut scene = sample_scene(self.class_of(index), &self.geometry, self.seed.wrapping_add(index as u64))?;
        scene.observe(model, self.operator, self.noise_level)?;
        Ok(scene)
    }
}

pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.class_mix.is_empty() {
        return Err(Error::Config("class mix is empty".into()));
    }
    create_dir(out_dir)?;
    let model = ForwardModel::build(&spec.geometry, spec.freqs.clone(), spec.lorentz)?;
    let mut scenes = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let scene = spec.make_scene(&model, i)?;
        let id = scene_id(i);
        save_scene(&out_dir.join(&id), &id, &scene, spec.lorentz.gamma)?;
        scenes.push(ManifestEntry {
            dir: id.clone(),
            id,
            class: scene.class,
            seed: scene.seed,
        });
    }
    let manifest = Manifest {
        n: spec.n,
        geometry: spec.geometry,
        operator: spec.operator,
        noise_level: spec.noise_level,
        seed: spec.seed,
        class_mix: spec.class_mix.clone(),
        freqs: spec.freqs.values().to_vec(),
        gamma: spec.lorentz.gamma,
        scenes,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
