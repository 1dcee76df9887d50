//! Python bindings for `care_core`.
//!
//! Structured results (reports, configs) cross the boundary as plain dicts by
//! way of JSON. Feature matrices are lists of rows.

use std::path::PathBuf;

use care_core::alignment;
use care_core::annotations::{self, AnnotationFormat, DetectionDataset, Domain, LoadOptions};
use care_core::content_stats::{self, BoxRatioModel, Kde2, Smoothing, WeightMode, MIN_BANDWIDTH};
use care_core::toy::{self, fixtures};
use care_core::trainer::{self, BenchConfig, ExperimentConfig};
use care_core::verify;
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn parse_domain(name: &str) -> PyResult<Domain> {
    match name {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        other => Err(value_err(format!("domain must be 'source' or 'target', got {other:?}"))),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(value_err("rows must all have the same length"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(value_err)
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

/// A loaded annotation set with boxes in normalized center form.
#[pyclass(name = "Dataset", module = "care_py", frozen)]
struct PyDataset {
    inner: DetectionDataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    #[getter]
    fn domain(&self) -> String {
        self.inner.domain.to_string()
    }

    #[getter]
    fn num_images(&self) -> usize {
        self.inner.images.len()
    }

    fn __len__(&self) -> usize {
        self.inner.annotations.len()
    }

    fn class_counts(&self) -> Vec<usize> {
        content_stats::class_counts(&self.inner)
    }

    /// `(image_id, class_id, cx, cy, w, h)` per annotation.
    fn boxes(&self) -> Vec<(String, usize, f64, f64, f64, f64)> {
        self.inner
            .annotations
            .iter()
            .map(|a| (a.image_id.clone(), a.class_id, a.cx, a.cy, a.w, a.h))
            .collect()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(domain={}, classes={}, images={}, annotations={})",
            self.inner.domain,
            self.inner.classes.len(),
            self.inner.images.len(),
            self.inner.annotations.len()
        )
    }
}

/// Loads COCO JSON or JSONL annotations. The format follows the file
/// extension unless given as `"coco"` or `"jsonl"`.
#[pyfunction]
#[pyo3(signature = (path, domain, format=None, clamp=false))]
fn load_dataset(path: PathBuf, domain: &str, format: Option<&str>, clamp: bool) -> PyResult<PyDataset> {
    let format = match format {
        None => None,
        Some("coco") => Some(AnnotationFormat::Coco),
        Some("jsonl") => Some(AnnotationFormat::Jsonl),
        Some(other) => return Err(value_err(format!("unknown format {other:?}"))),
    };
    let domain = parse_domain(domain)?;
    annotations::load_auto(&path, format, domain, LoadOptions { clamp })
        .map(|inner| PyDataset { inner })
        .map_err(|e| match e {
            annotations::AnnotationError::Io { .. } => PyOSError::new_err(e.to_string()),
            other => value_err(other),
        })
}

/// Inverse-frequency class weights `N_total / (K * N(c))`.
#[pyfunction]
fn class_weights(counts: Vec<usize>) -> PyResult<Vec<f64>> {
    content_stats::inverse_frequency_weights(&counts)
        .map(|w| w.weights)
        .map_err(value_err)
}

/// Smoothed box weight for a raw density ratio.
#[pyfunction]
fn squash(ratio: f64) -> f64 {
    Smoothing::default().squash(ratio)
}

#[pyfunction]
fn gap_report<'py>(py: Python<'py>, source: &PyDataset, target: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
    let report = content_stats::gap_report(&source.inner, &target.inner).map_err(value_err)?;
    to_py(py, &report)
}

/// Per-annotation class and box weights for the rows of `source` or `target`.
#[pyfunction]
#[pyo3(signature = (source, target, rows="target", raw=false))]
fn annotation_weights<'py>(
    py: Python<'py>,
    source: &PyDataset,
    target: &PyDataset,
    rows: &str,
    raw: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let model =
        BoxRatioModel::fit(&source.inner, &target.inner, Smoothing::default(), MIN_BANDWIDTH).map_err(value_err)?;
    let dataset = match rows {
        "source" => &source.inner,
        "target" => &target.inner,
        other => return Err(value_err(format!("rows must be 'source' or 'target', got {other:?}"))),
    };
    let mode = if raw { WeightMode::Raw } else { WeightMode::Smoothed };
    to_py(py, &content_stats::annotation_weights(dataset, &model, mode))
}

/// Two-dimensional Gaussian KDE with a Scott bandwidth.
#[pyclass(name = "Kde", module = "care_py", frozen)]
struct PyKde {
    inner: Kde2,
}

#[pymethods]
impl PyKde {
    #[new]
    #[pyo3(signature = (points, min_bandwidth=MIN_BANDWIDTH, bandwidth=None))]
    fn new(points: Vec<[f64; 2]>, min_bandwidth: f64, bandwidth: Option<[f64; 2]>) -> PyResult<Self> {
        let inner = match bandwidth {
            Some(h) => Kde2::with_bandwidth(&points, h),
            None => Kde2::fit(&points, min_bandwidth),
        };
        inner.map(|inner| PyKde { inner }).map_err(value_err)
    }

    #[getter]
    fn bandwidth(&self) -> [f64; 2] {
        self.inner.bandwidth()
    }

    fn pdf(&self, point: [f64; 2]) -> f64 {
        self.inner.pdf(point)
    }

    fn log_pdf(&self, point: [f64; 2]) -> f64 {
        self.inner.log_pdf(point)
    }

    #[pyo3(signature = (lo=-0.5, hi=1.5, n=400))]
    fn grid_mass(&self, lo: f64, hi: f64, n: usize) -> f64 {
        self.inner.grid_mass(lo, hi, n)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// `(features, class_id, [cx, cy, w, h])`.
type Instance = (Vec<f64>, usize, [f64; 4]);

type LossAndGrads = (f64, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Cycle-consistency loss for one class with gradients for both sides.
#[pyfunction]
fn cycle_consistency_loss(source: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<LossAndGrads> {
    let (s, t) = (matrix(source)?, matrix(target)?);
    let (loss, gs, gt) = alignment::cycle_consistency_loss(s.view(), t.view()).map_err(value_err)?;
    Ok((loss, rows(&gs), rows(&gt)))
}

/// Squared distance between feature means, with gradients.
#[pyfunction]
fn linear_mmd(source: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<LossAndGrads> {
    let (s, t) = (matrix(source)?, matrix(target)?);
    let (loss, gs, gt) = alignment::linear_mmd(s.view(), t.view()).map_err(value_err)?;
    Ok((loss, rows(&gs), rows(&gt)))
}

/// Worst relative error between analytic and central-difference gradients
/// of the cycle-consistency loss.
#[pyfunction]
#[pyo3(signature = (source, target, step=1e-5))]
fn check_gradients(source: Vec<Vec<f64>>, target: Vec<Vec<f64>>, step: f64) -> PyResult<f64> {
    let (s, t) = (matrix(source)?, matrix(target)?);
    alignment::check_gradients(s.view(), t.view(), step).map_err(value_err)
}

/// Cross-entropy plus L1 box loss for one instance.
#[pyfunction]
fn det_loss(logits: Vec<f64>, pred_box: [f64; 4], target_box: [f64; 4], class_id: usize) -> PyResult<f64> {
    if class_id >= logits.len() {
        return Err(value_err(format!(
            "class {class_id} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(toy::det_loss(
        Array1::from(logits).view(),
        Array1::from(pred_box.to_vec()).view(),
        target_box,
        class_id,
    ))
}

/// Exact reweighting check on random discrete joints.
#[pyfunction]
#[pyo3(signature = (trials=1000, seed=0))]
fn identity_report<'py>(py: Python<'py>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let report = py.detach(|| verify::identity_report(trials, seed));
    to_py(py, &report)
}

/// The builtin toy task as a dict, usable as the `task` entry of a config.
#[pyfunction]
fn default_task<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &fixtures::imbalanced_shift())
}

/// Samples toy instances.
#[pyfunction]
#[pyo3(signature = (domain, n, seed=0, task=None))]
fn generate(domain: &str, n: usize, seed: u64, task: Option<&Bound<'_, PyAny>>) -> PyResult<Vec<Instance>> {
    let spec = match task {
        Some(t) => from_py(t)?,
        None => fixtures::imbalanced_shift(),
    };
    let instances = toy::generate_domain(&spec, parse_domain(domain)?, n, seed).map_err(value_err)?;
    Ok(instances
        .into_iter()
        .map(|i| {
            let b = i.annotation.as_array();
            (i.features, i.annotation.class_id, b)
        })
        .collect())
}

/// Trains one toy model from a config dict shaped like the `train` command's
/// config file and returns the report.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ExperimentConfig = from_py(config)?;
    let spec = cfg.load_task(None).map_err(value_err)?;
    let report = py.detach(|| -> Result<_, trainer::ConfigError> {
        let data = trainer::prepare_data(&spec, &cfg.data)?;
        Ok(trainer::train(&cfg.train, &data)?.0)
    });
    to_py(py, &report.map_err(value_err)?)
}

/// Runs a bench grid from a config dict and returns the report.
#[pyfunction]
#[pyo3(name = "bench", signature = (config, threads=None))]
fn run_bench<'py>(py: Python<'py>, config: &Bound<'py, PyAny>, threads: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: BenchConfig = from_py(config)?;
    let spec = cfg.experiment.load_task(None).map_err(value_err)?;
    let report = py.detach(|| -> Result<_, trainer::ConfigError> {
        let data = trainer::prepare_data(&spec, &cfg.experiment.data)?;
        trainer::bench(&cfg, &data, threads)
    });
    to_py(py, &report.map_err(value_err)?)
}

#[pymodule]
fn care_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyKde>()?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(squash, m)?)?;
    m.add_function(wrap_pyfunction!(gap_report, m)?)?;
    m.add_function(wrap_pyfunction!(annotation_weights, m)?)?;
    m.add_function(wrap_pyfunction!(cycle_consistency_loss, m)?)?;
    m.add_function(wrap_pyfunction!(linear_mmd, m)?)?;
    m.add_function(wrap_pyfunction!(check_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(det_loss, m)?)?;
    m.add_function(wrap_pyfunction!(identity_report, m)?)?;
    m.add_function(wrap_pyfunction!(default_task, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    Ok(())
}
