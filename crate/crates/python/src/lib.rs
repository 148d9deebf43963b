//! Python bindings: forward simulation, scene sampling, inversion and metrics.
//!
//! Fields cross the boundary as nested lists (or anything list-like, such as
//! numpy arrays) of floats; spectra are `[frequency][row][col]`.

use ndarray::{Array2, Array3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nvrelax_core::forward::{ForwardModel, OperatorKind, Spectrum};
use nvrelax_core::metrics;
use nvrelax_core::physics::{FrequencyGrid, GridGeometry, LorentzianParams};
use nvrelax_core::pipeline::{self, SolverSettings};
use nvrelax_core::result::Method;
use nvrelax_core::scene::{sample_scene, SceneClass};
use nvrelax_core::ScalarField;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_field(rows: Vec<Vec<f64>>) -> PyResult<ScalarField> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged 2-D input"));
    }
    Array2::from_shape_vec((h, w), rows.concat()).map_err(err)
}

fn from_field(f: &ScalarField) -> Vec<Vec<f64>> {
    f.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_spectrum(s: &Spectrum) -> Vec<Vec<Vec<f64>>> {
    s.data.outer_iter().map(|plane| from_field(&plane.to_owned())).collect()
}

fn to_spectrum(data: Vec<Vec<Vec<f64>>>, model: &Model) -> PyResult<Spectrum> {
    let planes = data.into_iter().map(to_field).collect::<PyResult<Vec<_>>>()?;
    let (h, w) = planes.first().map_or((0, 0), |p| p.dim());
    if planes.iter().any(|p| p.dim() != (h, w)) {
        return Err(PyValueError::new_err("ragged spectrum"));
    }
    let flat: Vec<f64> = planes.iter().flat_map(|p| p.iter().copied()).collect();
    let arr = Array3::from_shape_vec((planes.len(), h, w), flat).map_err(err)?;
    Spectrum::new(arr, model.freqs.clone(), model.geometry).map_err(err)
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(err)
}

/// Forward model on a fixed grid.
#[pyclass(frozen)]
struct Model {
    inner: ForwardModel,
    geometry: GridGeometry,
    freqs: FrequencyGrid,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (height=64, width=64, spacing=20.0, standoff=20.0, gamma=0.5, freqs=None))]
    fn new(height: usize, width: usize, spacing: f64, standoff: f64, gamma: f64, freqs: Option<Vec<f64>>) -> PyResult<Self> {
        let geometry = GridGeometry::new(height, width, spacing, standoff).map_err(err)?;
        let freqs = match freqs {
            Some(v) => FrequencyGrid::new(v).map_err(err)?,
            None => FrequencyGrid::default(),
        };
        let inner = ForwardModel::build(&geometry, freqs.clone(), LorentzianParams::new(gamma).map_err(err)?).map_err(err)?;
        Ok(Self { inner, geometry, freqs })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.geometry.shape()
    }

    #[getter]
    fn freqs(&self) -> Vec<f64> {
        self.freqs.values().to_vec()
    }

    /// Spectrum `[frequency][row][col]` of `rho` and `omega` under `operator`.
    fn spectrum(&self, operator: &str, rho: Vec<Vec<f64>>, omega: Vec<Vec<f64>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let s = self.inner.spectrum(parse(operator)?, &to_field(rho)?, &to_field(omega)?).map_err(err)?;
        Ok(from_spectrum(&s))
    }

    /// Frequency-summed map of `rho` and `omega` under `operator`.
    fn noise_map(&self, operator: &str, rho: Vec<Vec<f64>>, omega: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = self.inner.noise_map(parse(operator)?, &to_field(rho)?, &to_field(omega)?).map_err(err)?;
        Ok(from_field(&m))
    }

    /// Samples a scene of `class` and observes it. Returns `rho`, `omega`,
    /// `sources` and `spectrum`.
    #[pyo3(signature = (class_name, seed=0, operator="f3", noise_level=None))]
    fn sample_scene<'py>(
        &self,
        py: Python<'py>,
        class_name: &str,
        seed: u64,
        operator: &str,
        noise_level: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let class: SceneClass = parse(class_name)?;
        let mut s = sample_scene(class, &self.geometry, seed).map_err(err)?;
        let noise = noise_level.unwrap_or(pipeline::RunConfig::default().noise_level);
        s.observe(&self.inner, parse(operator)?, noise).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("rho", from_field(&s.rho_true))?;
        d.set_item("omega", from_field(&s.omega_true))?;
        let sources: Vec<(usize, usize, f64, f64)> = s.sources.iter().map(|p| (p.row, p.col, p.amplitude, p.omega)).collect();
        d.set_item("sources", sources)?;
        d.set_item("spectrum", from_spectrum(s.observed().map_err(err)?))?;
        Ok(d)
    }

    /// Inverts `spectrum` with `method` under `operator` (`f1` or `f2`).
    /// `settings` is an optional JSON object of per-method solver settings.
    #[pyo3(signature = (method, spectrum, operator="f2", seed=0, epochs_scale=1.0, settings=None))]
    fn solve<'py>(
        &self,
        py: Python<'py>,
        method: &str,
        spectrum: Vec<Vec<Vec<f64>>>,
        operator: &str,
        seed: u64,
        epochs_scale: f64,
        settings: Option<&str>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let method: Method = parse(method)?;
        let op: OperatorKind = parse(operator)?;
        let obs = to_spectrum(spectrum, self)?;
        let settings: SolverSettings = match settings {
            Some(s) => serde_json::from_str(s).map_err(err)?,
            None => SolverSettings::default(),
        };
        if !(epochs_scale > 0.0 && epochs_scale.is_finite()) {
            return Err(PyValueError::new_err("epochs_scale must be > 0"));
        }
        let scaled = settings.scaled(epochs_scale);
        let r = py
            .detach(|| pipeline::solve(method, &obs, &self.inner, op, &scaled, seed))
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("rho", from_field(&r.rho_hat))?;
        d.set_item("omega", from_field(&r.omega_hat))?;
        d.set_item("alpha", r.alpha)?;
        d.set_item("iterations", r.iterations)?;
        d.set_item("wall_time", r.wall_time)?;
        d.set_item("loss", r.loss_trace.iter().map(|t| t.loss.total).collect::<Vec<f64>>())?;
        Ok(d)
    }
}

/// Six-metric report of a reconstruction against the truth.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    pred: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
    pred_map: Vec<Vec<f64>>,
    obs_map: Vec<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::evaluate(&to_field(pred)?, &to_field(truth)?, &to_field(pred_map)?, &to_field(obs_map)?).map_err(err)?;
    let d = PyDict::new(py);
    for (name, v) in metrics::MetricsReport::NAMES.iter().zip(r.values()) {
        d.set_item(*name, v)?;
    }
    d.set_item("pred_peaks", r.pred_peaks)?;
    d.set_item("true_peaks", r.true_peaks)?;
    Ok(d)
}

#[pymodule]
fn nvrelax(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("OPERATORS", ["f1", "f2", "f3"])?;
    m.add("METHODS", ["netmy", "tikhonov", "admm", "splat", "lbfgs"])?;
    Ok(())
}
