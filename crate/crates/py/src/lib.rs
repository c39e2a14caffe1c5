//! Python bindings for `freqprobe`: the FQPB containers, concept erasers,
//! MDL probes and the spectral scoring helpers.

use std::path::PathBuf;

use freqprobe::eraser::{self, FittedEraser};
use freqprobe::probe::{self, ProbeConfig, ProbeTarget};
use freqprobe::signal::{self, SignalConfig, TaskName};
use freqprobe::store::{self, TapId};
use freqprobe::{model, spectral, Error};
use ndarray::Array2;
use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.root() {
        Error::MissingInput(_) => PyFileNotFoundError::new_err(msg),
        Error::Numerical(_) => PyArithmeticError::new_err(msg),
        Error::Io(_) => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn tap(name: &str) -> PyResult<TapId> {
    name.parse().map_err(err)
}

fn matrix<T: Copy>(rows: Vec<Vec<T>>) -> PyResult<Array2<T>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows<T: Copy>(m: &Array2<T>) -> Vec<Vec<T>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Hidden states from one tap with their labels and source frequencies.
#[pyclass(name = "ActivationSet", module = "freqprobe", skip_from_py_object)]
#[derive(Clone)]
pub struct PyActivationSet {
    pub inner: store::ActivationSet,
}

#[pymethods]
impl PyActivationSet {
    #[new]
    fn new(tap_id: &str, features: Vec<Vec<f32>>, labels: Vec<i32>, frequencies: Vec<i32>) -> PyResult<Self> {
        let inner = store::ActivationSet::new(tap(tap_id)?, matrix(features)?, labels, frequencies).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: store::read_activations(path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: store::decode_activations(data).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        store::write_activations(path, &self.inner).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &store::encode_activations(&self.inner).map_err(err)?))
    }

    #[getter]
    fn tap(&self) -> &'static str {
        self.inner.tap.as_str()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.features.dim()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f32>> {
        rows(&self.inner.features)
    }

    #[getter]
    fn labels(&self) -> Vec<i32> {
        self.inner.labels.clone()
    }

    #[getter]
    fn frequencies(&self) -> Vec<i32> {
        self.inner.frequencies.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let (n, d) = self.inner.features.dim();
        format!("ActivationSet(tap={:?}, n={n}, d={d})", self.inner.tap.as_str())
    }
}

/// Affine eraser `h -> P h + b` for one tap.
#[pyclass(name = "Eraser", module = "freqprobe", skip_from_py_object)]
#[derive(Clone)]
pub struct PyEraser {
    pub inner: FittedEraser,
}

#[pymethods]
impl PyEraser {
    /// Least-squares concept eraser fitted on `features` (n x d) and `concept` (n x k).
    #[staticmethod]
    #[pyo3(signature = (features, concept, tap_id = "out"))]
    fn fit(features: Vec<Vec<f64>>, concept: Vec<Vec<f64>>, tap_id: &str) -> PyResult<Self> {
        let inner = eraser::fit_leace(&matrix(features)?, &matrix(concept)?, tap(tap_id)?).map_err(err)?;
        Ok(Self { inner })
    }

    /// Orthogonal projection removing the class-mean differences.
    #[staticmethod]
    #[pyo3(signature = (features, concept, tap_id = "out"))]
    fn fit_mean_difference(features: Vec<Vec<f64>>, concept: Vec<Vec<f64>>, tap_id: &str) -> PyResult<Self> {
        let inner =
            eraser::fit_mean_difference(&matrix(features)?, &matrix(concept)?, tap(tap_id)?).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn identity(tap_id: &str, d: usize) -> PyResult<Self> {
        Ok(Self {
            inner: FittedEraser::identity(tap(tap_id)?, d),
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let rec = store::read_eraser(path).map_err(err)?;
        Ok(Self {
            inner: FittedEraser::from_record(&rec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let rec = store::decode_eraser(data).map_err(err)?;
        Ok(Self {
            inner: FittedEraser::from_record(&rec).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        store::write_eraser(path, &self.inner.to_record()).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &store::encode_eraser(&self.inner.to_record()).map_err(err)?))
    }

    fn apply(&self, h: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.apply(&h).map_err(err)
    }

    fn apply_rows(&self, h: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.apply_rows(&matrix(h)?).map_err(err)?))
    }

    #[getter]
    fn tap(&self) -> &'static str {
        self.inner.tap.as_str()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn rank_removed(&self) -> usize {
        self.inner.rank_removed
    }

    #[getter]
    fn p(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.p)
    }

    #[getter]
    fn b(&self) -> Vec<f64> {
        self.inner.b.to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Eraser(tap={:?}, d={}, rank_removed={})",
            self.inner.tap.as_str(),
            self.inner.dim(),
            self.inner.rank_removed
        )
    }
}

/// Scale-relative cross-covariance between features and concept.
#[pyfunction]
fn guardedness(features: Vec<Vec<f64>>, concept: Vec<Vec<f64>>) -> PyResult<f64> {
    eraser::guardedness(&matrix(features)?, &matrix(concept)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (f, fs = 512, cap = None))]
fn count_phase_shifts(f: u32, fs: u32, cap: Option<usize>) -> PyResult<usize> {
    signal::count_phase_shifts(f, fs, cap.unwrap_or(usize::MAX)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (f, fs = 512, length = 512, phase = 0.0))]
fn make_sinusoid(f: u32, fs: u32, length: usize, phase: f64) -> PyResult<Vec<f64>> {
    signal::make_sinusoid(f, fs, length, phase).map_err(err)
}

#[pyfunction]
fn spectral_predictability(x: Vec<f64>) -> PyResult<f64> {
    signal::spectral_predictability(&x).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (x, fs = 512))]
fn dominant_frequency(x: Vec<f64>, fs: u32) -> f64 {
    spectral::dominant_frequency(&x, fs)
}

/// RMSE between true and recovered dominant frequencies.
#[pyfunction]
fn spectral_rmse(f_true: Vec<f64>, f_hat: Vec<f64>) -> PyResult<f64> {
    if f_true.len() != f_hat.len() {
        return Err(PyValueError::new_err("f_true and f_hat differ in length"));
    }
    let pairs: Vec<(f64, f64)> = f_true.into_iter().zip(f_hat).collect();
    Ok(spectral::spectral_rmse(&pairs).map_err(err)?.rmse)
}

#[pyfunction]
#[pyo3(signature = (lo = 2, hi = 250))]
fn collapse_bound(lo: u32, hi: u32) -> f64 {
    spectral::collapse_bound(lo, hi)
}

/// Two-sided paired Wilcoxon signed-rank p-value.
#[pyfunction]
fn wilcoxon(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    spectral::wilcoxon_paired_two_sided(&a, &b).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (f, fs = 512, patch_len = 16))]
fn aliasing_predictor(f: u32, fs: u32, patch_len: u32) -> bool {
    model::aliasing_predictor(f, fs, patch_len)
}

#[pyfunction]
fn space_saving(codelength: f64, codelength_uniform: f64) -> PyResult<f64> {
    probe::space_saving(codelength, codelength_uniform).map_err(err)
}

/// Band task as `(lo, hi, threshold)`.
#[pyfunction]
fn band_task(name: &str) -> PyResult<(u32, u32, u32)> {
    let name: TaskName = name.parse().map_err(err)?;
    let t = signal::task_by_name(&SignalConfig::default(), name).map_err(err)?;
    Ok((t.lo, t.hi, t.threshold))
}

/// Prequential MDL probe on an activation set. `task` relabels windows by
/// band; without it the stored labels are used. Returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (set, task = None, control = false, seed = 0, config = None))]
fn run_probe<'py>(
    py: Python<'py>,
    set: &PyActivationSet,
    task: Option<&str>,
    control: bool,
    seed: u64,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg: ProbeConfig = match config {
        Some(json) => serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ProbeConfig::default(),
    };
    cfg.seed = seed;
    let target = match task {
        Some(name) => {
            let name: TaskName = name.parse().map_err(err)?;
            ProbeTarget::Band(signal::task_by_name(&SignalConfig::default(), name).map_err(err)?)
        }
        None => ProbeTarget::Stored,
    };
    let report = py
        .detach(|| probe::run_probe(&set.inner, &target, &cfg, control, None))
        .map_err(err)?;
    let json = serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (json,))
}

/// Registers every class and function on `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyActivationSet>()?;
    m.add_class::<PyEraser>()?;
    m.add_function(wrap_pyfunction!(guardedness, m)?)?;
    m.add_function(wrap_pyfunction!(count_phase_shifts, m)?)?;
    m.add_function(wrap_pyfunction!(make_sinusoid, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_predictability, m)?)?;
    m.add_function(wrap_pyfunction!(dominant_frequency, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(collapse_bound, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(aliasing_predictor, m)?)?;
    m.add_function(wrap_pyfunction!(space_saving, m)?)?;
    m.add_function(wrap_pyfunction!(band_task, m)?)?;
    m.add_function(wrap_pyfunction!(run_probe, m)?)?;
    m.add("TAPS", TapId::ALL.map(TapId::as_str).to_vec())?;
    m.add("FORMAT_VERSION", store::FORMAT_VERSION)?;
    Ok(())
}

#[pymodule]
#[pyo3(name = "freqprobe")]
fn freqprobe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
