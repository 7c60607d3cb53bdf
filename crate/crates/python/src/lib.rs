//! Python module `debias`: data generation, training, prediction and
//! fairness auditing backed by `debias-core`.

use std::path::PathBuf;

use debias_core::data::{self, Attribute, Dataset, SkewPlan, SkewScheme, SyntheticSpec};
use debias_core::fairness::{EvalRecord, FairnessReport};
use debias_core::nnet::Matrix;
use debias_core::sgmcmc::StepSchedule;
use debias_core::trainer::{self, RunConfig, SweepData, TrainedEnsemble};
use debias_core::weighted_loss::{self, Kappa};
use debias_core::{io, Error};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Usage(_) | Error::Schema(_) => PyValueError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::State(_) | Error::Storage(_) | Error::Metric(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for debias_core::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(f)) => f.into_pyobject(py)?.into_any(),
            _ => n.to_string().into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, json_to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn rows_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).or_py()
}

fn attribute(a: u8) -> PyResult<Attribute> {
    Attribute::try_from(a).or_py()
}

/// Labelled samples with a binary attribute, in the on-disk CSV layout.
#[pyclass(name = "Dataset", module = "debias", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_dataset(&path).or_py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_dataset(&path, &self.inner).or_py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    #[getter]
    fn attributes(&self) -> Vec<u8> {
        self.inner.samples.iter().map(|s| s.attribute.as_u8()).collect()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.inner.features())
    }

    /// Per-class `[untouched, transformed]` counts.
    fn attribute_counts(&self) -> Vec<[usize; 2]> {
        self.inner.attribute_counts()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, n_features={}, n_classes={}, channels={})",
            self.inner.len(),
            self.inner.n_features,
            self.inner.n_classes,
            self.inner.channels
        )
    }
}

/// Training configuration; build it from TOML text.
#[pyclass(name = "RunConfig", module = "debias", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml_str(text).or_py()?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// Copy with some fields replaced, e.g. `cfg.replace(kappa=2.0, seed=4)`.
    #[pyo3(signature = (**changes))]
    fn replace(&self, changes: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut v = serde_json::to_value(&self.inner).expect("config serializes");
        if let Some(changes) = changes {
            let json = changes.py().import("json")?;
            let text: String = json.call_method1("dumps", (changes,))?.extract()?;
            let patch: serde_json::Map<String, Value> =
                serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
            let obj = v.as_object_mut().expect("config is an object");
            for (k, x) in patch {
                obj.insert(k, x);
            }
        }
        let inner: RunConfig = serde_json::from_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().or_py()?;
        Ok(Self { inner })
    }

    fn as_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(mode={}, kappa={}, seed={})", self.inner.mode, self.inner.kappa, self.inner.seed)
    }
}

/// Retained posterior draws plus the last uncertainty table.
#[pyclass(name = "TrainedEnsemble", module = "debias", from_py_object)]
#[derive(Clone)]
struct PyEnsemble {
    inner: TrainedEnsemble,
}

#[pymethods]
impl PyEnsemble {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_archive(&path).or_py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_archive(&path, &self.inner).or_py()
    }

    #[getter]
    fn n_draws(&self) -> usize {
        self.inner.draws.len()
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.spec.layer_sizes().to_vec()
    }

    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.history)
    }

    /// True-class sigma per training sample from the final cycle, or None.
    #[getter]
    fn sigma_true(&self) -> Option<Vec<f64>> {
        self.inner.table.as_ref().map(|t| t.sigma_true_all())
    }

    /// `(predicted, mean, sigma)` for a list of feature rows.
    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let x = rows_matrix(features)?;
        let p = trainer::predict_ensemble(&self.inner, &x).or_py()?;
        Ok((p.predicted, matrix_rows(&p.mean), matrix_rows(&p.sigma)))
    }

    /// Fairness report (dict) on an untouched and a transformed test set.
    fn evaluate<'py>(&self, py: Python<'py>, test_colour: &PyDataset, test_gray: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        let eval = trainer::evaluate(&self.inner, &test_colour.inner, &test_gray.inner).or_py()?;
        to_py(py, &eval)
    }

    /// Composition of the highest-sigma training decile.
    fn top_decile<'py>(&self, py: Python<'py>, train: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        let table = self
            .inner
            .table
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("ensemble has no uncertainty table"))?;
        to_py(py, &trainer::top_decile_composition(table, &train.inner).or_py()?)
    }

    fn validation_nll(&self, data: &PyDataset) -> PyResult<f64> {
        trainer::ensemble_nll(&self.inner, &data.inner).or_py()
    }
}

fn spec_from_kwargs(
    n_classes: usize,
    samples_per_class: usize,
    positions_per_channel: usize,
    center_scale: f64,
    noise_std: f64,
    seed: u64,
    channels: usize,
    chroma_share: f64,
) -> PyResult<SyntheticSpec> {
    let spec = SyntheticSpec {
        n_classes,
        samples_per_class,
        channels,
        positions_per_channel,
        center_scale,
        noise_std,
        chroma_share,
        seed,
    };
    spec.validate().or_py()?;
    Ok(spec)
}

/// Generate, skew and split a synthetic experiment. Returns a dict with
/// `train`, `val`, `test_colour` and `test_gray` datasets.
#[pyfunction]
#[pyo3(signature = (n_classes, samples_per_class, positions_per_channel, center_scale, noise_std, seed, plan, test_per_class, channels=3, chroma_share=0.5))]
#[allow(clippy::too_many_arguments)]
fn generate<'py>(
    py: Python<'py>,
    n_classes: usize,
    samples_per_class: usize,
    positions_per_channel: usize,
    center_scale: f64,
    noise_std: f64,
    seed: u64,
    plan: &str,
    test_per_class: usize,
    channels: usize,
    chroma_share: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = spec_from_kwargs(
        n_classes,
        samples_per_class,
        positions_per_channel,
        center_scale,
        noise_std,
        seed,
        channels,
        chroma_share,
    )?;
    let scheme: SkewScheme = plan.parse().or_py()?;
    let plan = SkewPlan::for_scheme(scheme, n_classes).or_py()?;
    let d = py.detach(|| data::build_experiment(&spec, &plan, test_per_class)).or_py()?;
    let out = PyDict::new(py);
    out.set_item("train", PyDataset { inner: d.train })?;
    out.set_item("val", PyDataset { inner: d.validation })?;
    out.set_item("test_colour", PyDataset { inner: d.test_untouched })?;
    out.set_item("test_gray", PyDataset { inner: d.test_transformed })?;
    Ok(out)
}

/// Replace each position's channel values by their mean.
#[pyfunction]
fn attribute_transform(features: Vec<f64>, channels: usize) -> PyResult<Vec<f64>> {
    data::attribute_transform(&features, channels).or_py()
}

#[pyfunction]
fn train(py: Python<'_>, config: &PyRunConfig, data: &PyDataset) -> PyResult<PyEnsemble> {
    let (cfg, ds) = (&config.inner, &data.inner);
    let inner = py.detach(|| trainer::train(cfg, ds)).or_py()?;
    Ok(PyEnsemble { inner })
}

/// One weighted run per kappa; returns the sweep report as a dict.
#[pyfunction]
fn sweep_kappa<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    grid: Vec<f64>,
    train: &PyDataset,
    val: &PyDataset,
    test_colour: &PyDataset,
    test_gray: &PyDataset,
) -> PyResult<Bound<'py, PyAny>> {
    let grid = grid.into_iter().map(Kappa::new).collect::<debias_core::Result<Vec<_>>>().or_py()?;
    let sweep_data = SweepData {
        train: &train.inner,
        validation: &val.inner,
        test_untouched: &test_colour.inner,
        test_transformed: &test_gray.inner,
    };
    let cfg = &config.inner;
    let report = py.detach(|| trainer::sweep_kappa(cfg, &grid, sweep_data)).or_py()?;
    to_py(py, &report)
}

/// Fairness report from `(true_class, predicted_class, attribute[, subgroup])` tuples.
#[pyfunction]
fn fairness_report<'py>(
    py: Python<'py>,
    records: Vec<(usize, usize, u8, Option<u32>)>,
    n_classes: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let recs = records
        .into_iter()
        .map(|(t, p, a, g)| {
            let r = EvalRecord::new(t, p, attribute(a)?);
            Ok(match g {
                Some(g) => r.with_subgroup(g),
                None => r,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    to_py(py, &FairnessReport::from_records(&recs, n_classes))
}

/// `(1 + sigma_true)^kappa`.
#[pyfunction]
fn loss_weight(sigma_true: f64, kappa: f64) -> PyResult<f64> {
    weighted_loss::weight(sigma_true, Kappa::new(kappa).or_py()?).or_py()
}

/// Cyclical cosine step size at 1-based iteration `i`.
#[pyfunction]
fn stepsize(alpha0: f64, total_iters: usize, cycles: usize, i: usize) -> PyResult<f64> {
    StepSchedule::new(alpha0, total_iters, cycles).or_py()?.stepsize(i).or_py()
}

#[pymodule]
fn debias(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DEFAULT_KAPPA_GRID", weighted_loss::DEFAULT_KAPPA_GRID.to_vec())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(attribute_transform, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(fairness_report, m)?)?;
    m.add_function(wrap_pyfunction!(loss_weight, m)?)?;
    m.add_function(wrap_pyfunction!(stepsize, m)?)?;
    Ok(())
}
