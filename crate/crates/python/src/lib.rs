//! Python bindings for the interPDN forecaster.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use interpdn_core::checkpoint::Checkpoint;
use interpdn_core::cli::load_series;
use interpdn_core::config::{self, TrainConfig};
use interpdn_core::dataio::SplitKind;
use interpdn_core::metrics::QUANTILE_LEVELS;
use interpdn_core::probhead::{self, AppendedBoundary, SupportFlavor};
use interpdn_core::training;
use interpdn_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, c), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Truncated-normal or uniform support set.
#[pyclass(name = "SupportSet", module = "interpdn", skip_from_py_object)]
#[derive(Clone)]
struct PySupportSet {
    inner: probhead::SupportSet,
}

#[pymethods]
impl PySupportSet {
    #[new]
    #[pyo3(signature = (count=25, boundary=4.0, flavor="equal_probability"))]
    fn new(count: usize, boundary: f64, flavor: &str) -> PyResult<Self> {
        let flavor: SupportFlavor = flavor.parse().map_err(to_py)?;
        let inner = probhead::SupportSet::build(flavor, count, boundary).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Interleaved companion set with one extra point on `side` ("upper" or "lower").
    #[pyo3(signature = (side="upper"))]
    fn interleaved(&self, side: &str) -> PyResult<Self> {
        let side = match side {
            "upper" => AppendedBoundary::Upper,
            "lower" => AppendedBoundary::Lower,
            other => return Err(PyValueError::new_err(format!("side {other:?}: expected upper or lower"))),
        };
        let inner = probhead::build_interleaved_set(&self.inner, side).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn points(&self) -> Vec<f64> {
        self.inner.points().to_vec()
    }

    #[getter]
    fn edges(&self) -> Vec<f64> {
        self.inner.edges().to_vec()
    }

    #[getter]
    fn flavor(&self) -> String {
        self.inner.flavor().to_string()
    }

    fn cell_masses(&self) -> Vec<f64> {
        self.inner.cell_masses()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "SupportSet(count={}, boundary={}, flavor={:?})",
            self.inner.len(),
            self.inner.boundary(),
            self.inner.flavor().to_string()
        )
    }
}

/// Resolved run configuration.
#[pyclass(name = "TrainConfig", module = "interpdn", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: config::preset(name).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::from_toml_str(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn dataset(&self) -> String {
        self.inner.dataset.id.clone()
    }

    #[getter]
    fn lookback(&self) -> usize {
        self.inner.model.lookback
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.model.horizon
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.model.mode.name().to_string()
    }

    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.model.mode = mode.parse().map_err(to_py)?;
        Ok(())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.training.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.training.seed = seed;
    }

    #[getter]
    fn max_epochs(&self) -> usize {
        self.inner.training.max_epochs
    }

    #[setter]
    fn set_max_epochs(&mut self, epochs: usize) {
        self.inner.training.max_epochs = epochs;
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(dataset={:?}, lookback={}, horizon={}, mode={:?})",
            self.inner.dataset.id,
            self.inner.model.lookback,
            self.inner.model.horizon,
            self.inner.model.mode.name()
        )
    }
}

/// A trained model together with its configuration and data scaler.
#[pyclass(name = "Model", module = "interpdn")]
struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig {
            inner: self.inner.config().clone(),
        }
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.manifest.best_epoch
    }

    #[getter]
    fn best_val_loss(&self) -> f64 {
        self.inner.manifest.best_val_loss
    }

    #[getter]
    fn channel_names(&self) -> Vec<String> {
        self.inner.manifest.channel_names.clone()
    }

    fn num_params(&self) -> usize {
        use interpdn_core::params::ParamSet;
        self.inner.params.num_params()
    }

    /// Forecast from an `L x C` window given as a list of rows.
    ///
    /// Returns `{"prediction": T x C, "quantiles": {level: T x C}}`; quantiles
    /// are omitted for scalar ablation modes.
    fn forecast<'py>(&self, py: Python<'py>, window: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let window = from_rows(window)?;
        let spec = self.inner.spec().map_err(to_py)?;
        let f = training::forecast(&self.inner.params, &spec, &self.inner.manifest.scaler, &window).map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("prediction", to_rows(&f.prediction))?;
        if let Some(qs) = &f.quantiles {
            let d = PyDict::new(py);
            for (level, q) in QUANTILE_LEVELS.iter().zip(qs) {
                d.set_item(*level, to_rows(q))?;
            }
            out.set_item("quantiles", d)?;
        }
        Ok(out)
    }

    /// Metrics and losses on `split` of the CSV at `data` (generated for `synthetic`).
    #[pyo3(signature = (data=None, split="test"))]
    fn evaluate<'py>(&self, py: Python<'py>, data: Option<PathBuf>, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let kind: SplitKind = split.parse().map_err(to_py)?;
        let ck = &self.inner;
        let ev = py
            .detach(|| -> interpdn_core::Result<_> {
                let series = load_series(ck.config(), data.as_deref())?;
                let prepared = training::prepare_data(&series, ck.config())?;
                let spec = ck.spec()?;
                training::evaluate(&ck.params, &spec, ck.config(), &prepared, kind)
            })
            .map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("split", split)?;
        out.set_item("windows", ev.report.windows)?;
        out.set_item("mse", ev.report.mse)?;
        out.set_item("mae", ev.report.mae)?;
        out.set_item("crps", ev.report.crps)?;
        out.set_item("mase", ev.report.mase)?;
        out.set_item("loss_total", ev.total)?;
        out.set_item("l_p", ev.loss.l_p)?;
        out.set_item("l_f", ev.loss.l_f)?;
        out.set_item("l_c", ev.loss.l_c)?;
        out.set_item("l_t", ev.loss.l_t)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let m = &self.inner.manifest;
        format!(
            "Model(mode={:?}, channels={}, best_epoch={})",
            m.config.model.mode.name(),
            m.channels,
            m.best_epoch
        )
    }
}

/// Train a model. `data` may be omitted for the `synthetic` dataset.
#[pyfunction]
#[pyo3(signature = (config, data=None))]
fn train(py: Python<'_>, config: &PyTrainConfig, data: Option<PathBuf>) -> PyResult<PyModel> {
    let cfg = config.inner.clone();
    let ck = py
        .detach(|| -> interpdn_core::Result<Checkpoint> {
            cfg.validate()?;
            let series = load_series(&cfg, data.as_deref())?;
            let prepared = training::prepare_data(&series, &cfg)?;
            let out = training::train(&cfg, &prepared)?;
            Ok(Checkpoint::new(
                cfg.clone(),
                prepared.channel_names.clone(),
                prepared.scaler.clone(),
                out.params,
                out.best_epoch,
                out.best_val_loss,
                out.history.len(),
            ))
        })
        .map_err(to_py)?;
    Ok(PyModel { inner: ck })
}

/// Names of the built-in presets.
#[pyfunction]
fn presets() -> Vec<String> {
    config::preset_names()
}

/// Largest relative error between analytic and central-difference gradients.
#[pyfunction]
#[pyo3(signature = (config=None, channels=2, windows=4, seed=0, step=1e-5))]
fn gradient_check<'py>(
    py: Python<'py>,
    config: Option<&PyTrainConfig>,
    channels: usize,
    windows: usize,
    seed: u64,
    step: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.map_or_else(config::tiny, |c| c.inner.clone());
    let r = py
        .detach(|| interpdn_core::gradcheck::gradient_check(&cfg, channels, windows, seed, step))
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("max_rel_error", r.max_rel_error)?;
    out.set_item("worst", r.worst)?;
    out.set_item("checked", r.checked)?;
    out.set_item("loss", r.loss)?;
    Ok(out)
}

#[pymodule]
fn interpdn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySupportSet>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add("QUANTILE_LEVELS", QUANTILE_LEVELS.to_vec())?;
    Ok(())
}
