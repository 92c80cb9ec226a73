//! Python bindings for `decision_core`.
//!
//! Inputs are passed as lists of rows (`list[list[float]]`) and labels as
//! `list[int]`; reports come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use decision_core::adaptation::{self, AdaptOutcome, AdaptationConfig, Objective};
use decision_core::cli::config::ExperimentConfig;
use decision_core::distill::{train_student, StudentConfig, TeacherView};
use decision_core::domains::{self, DomainSpec, Generator, LabeledSet, UnlabeledSet};
use decision_core::models::{self, Architecture, TrainConfig};
use decision_core::oracle::{self, Loss, TrialConfig};
use decision_core::tensor::Tensor;
use decision_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        Error::Violation(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(to_py)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Serializes through JSON so Python receives ordinary dicts and lists.
fn to_dict<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Samples a synthetic domain. Returns `(inputs, labels)`.
#[pyfunction]
#[pyo3(signature = (samples, seed=0, generator="two_moons", classes=2, rotation=0.0, noise=0.0, label_corruption=0.0, translation=(0.0, 0.0)))]
#[allow(clippy::too_many_arguments)]
fn generate_domain(
    samples: usize,
    seed: u64,
    generator: &str,
    classes: usize,
    rotation: f64,
    noise: f64,
    label_corruption: f64,
    translation: (f64, f64),
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let generator = match generator {
        "two_moons" => Generator::TwoMoons,
        "gaussian_mixture" => Generator::GaussianMixture,
        other => return Err(PyValueError::new_err(format!("unknown generator {other:?}"))),
    };
    let spec = DomainSpec {
        generator,
        classes,
        rotation,
        translation: [translation.0, translation.1],
        noise,
        label_corruption,
        samples,
        seed,
    };
    let d = domains::generate_domain(&spec).map_err(to_py)?;
    Ok((rows_of(&d.inputs), d.labels))
}

/// A source model: feature extractor plus linear classifier.
#[pyclass(name = "SourceModel", module = "decision", skip_from_py_object)]
#[derive(Clone)]
struct PySourceModel {
    inner: models::SourceModel,
}

#[pymethods]
impl PySourceModel {
    /// Trains a fresh model on labeled data with label smoothing.
    #[staticmethod]
    #[pyo3(signature = (name, inputs, labels, classes, hidden=64, feature_dim=16, epochs=30, batch_size=32, lr=0.01, label_smoothing=0.1, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        name: &str,
        inputs: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
        hidden: usize,
        feature_dim: usize,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        label_smoothing: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let data = LabeledSet::new(tensor(&inputs)?, labels, classes).map_err(to_py)?;
        let arch = Architecture {
            input_dim: data.input_dim(),
            hidden,
            feature_dim,
            classes,
        };
        let mut model = models::SourceModel::init(name, arch, seed);
        let cfg = TrainConfig {
            epochs,
            batch_size,
            lr,
            label_smoothing,
            seed,
            ..TrainConfig::default()
        };
        models::train_source(&mut model, &data, &cfg).map_err(to_py)?;
        Ok(Self { inner: model })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: models::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        models::save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.domain.clone()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    fn logits(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows_of(&self.inner.forward_logits(&tensor(&inputs)?).map_err(to_py)?))
    }

    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&tensor(&inputs)?).map_err(to_py)
    }

    fn accuracy(&self, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        let pred = self.predict(inputs)?;
        if pred.len() != labels.len() {
            return Err(PyValueError::new_err("inputs and labels differ in length"));
        }
        Ok(accuracy(&pred, &labels))
    }

    fn classifier_checksum(&self) -> u64 {
        self.inner.classifier_checksum()
    }

    fn __repr__(&self) -> String {
        format!("SourceModel(name={:?}, classes={})", self.inner.domain, self.inner.classes())
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Adapted source models together with their learned weights.
#[pyclass(name = "AdaptResult", module = "decision")]
struct PyAdaptResult {
    inner: AdaptOutcome,
}

#[pymethods]
impl PyAdaptResult {
    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.inner.alpha().to_vec()
    }

    #[getter]
    fn alpha_trajectory(&self) -> Vec<Vec<f64>> {
        self.inner.alpha_trajectory.clone()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn max_simplex_error(&self) -> f64 {
        self.inner.max_simplex_error
    }

    #[getter]
    fn models(&self) -> Vec<PySourceModel> {
        self.inner.models.iter().map(|m| PySourceModel { inner: m.clone() }).collect()
    }

    fn metrics(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_dict(py, &self.inner.metrics)
    }

    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&tensor(&inputs)?).map_err(to_py)
    }

    fn accuracy(&self, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        let pred = self.predict(inputs)?;
        Ok(accuracy(&pred, &labels))
    }

    /// Trains one student on the ensemble's hard labels for `inputs`.
    /// Returns `(student, agreement)`.
    #[pyo3(signature = (inputs, epochs=30, batch_size=32, lr=0.01, seed=0))]
    fn distill(
        &self,
        inputs: Vec<Vec<f64>>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<(PySourceModel, f64)> {
        let teacher = TeacherView::new(&self.inner.models, self.inner.alpha()).map_err(to_py)?;
        let target = UnlabeledSet { inputs: tensor(&inputs)? };
        let cfg = StudentConfig {
            epochs,
            batch_size,
            lr,
            seed,
        };
        let out = train_student(&teacher, &target, &cfg).map_err(to_py)?;
        Ok((PySourceModel { inner: out.student }, out.agreement))
    }
}

fn objective(name: &str) -> PyResult<Objective> {
    match name {
        "full" => Ok(Objective::FULL),
        "entropy" => Ok(Objective::ENTROPY_ONLY),
        "info_max" => Ok(Objective::INFO_MAX),
        "pseudo_label" => Ok(Objective::PSEUDO_LABEL_ONLY),
        other => Err(PyValueError::new_err(format!(
            "unknown objective {other:?}; expected full, entropy, info_max or pseudo_label"
        ))),
    }
}

/// Adapts the models to unlabeled target inputs, learning aggregation weights.
#[pyfunction]
#[pyo3(signature = (models, target, lambda_=0.3, epochs=15, batch_size=32, lr_backbone=1e-3, lr_alpha=1e-2, seed=0, objective="full", train_backbone=true))]
#[allow(clippy::too_many_arguments)]
fn adapt(
    models: Vec<PyRef<'_, PySourceModel>>,
    target: Vec<Vec<f64>>,
    lambda_: f64,
    epochs: usize,
    batch_size: usize,
    lr_backbone: f64,
    lr_alpha: f64,
    seed: u64,
    objective: &str,
    train_backbone: bool,
) -> PyResult<PyAdaptResult> {
    let cfg = AdaptationConfig {
        lambda: lambda_,
        epochs,
        batch_size,
        lr_backbone,
        lr_alpha,
        seed,
        objective: self::objective(objective)?,
        train_backbone,
        check_simplex: true,
        ..AdaptationConfig::default()
    };
    let models = models.iter().map(|m| m.inner.clone()).collect();
    let target = UnlabeledSet { inputs: tensor(&target)? };
    let inner = adaptation::adapt(models, &target, &cfg, None).map_err(to_py)?;
    Ok(PyAdaptResult { inner })
}

/// `sigmoid(raw) / sum(sigmoid(raw))`.
#[pyfunction]
fn alpha_project(raw: Vec<f64>) -> Vec<f64> {
    adaptation::alpha_project(&raw)
}

/// Constant per-input weights for sources uniform on the target support.
#[pyfunction]
fn uniform_reduction(lambda_: Vec<f64>, c: Vec<f64>) -> PyResult<Vec<f64>> {
    oracle::uniform_reduction(&lambda_, &c).map_err(to_py)
}

/// Randomized check of the source-combination bound; returns the report dict.
#[pyfunction]
#[pyo3(signature = (trials=1000, seed=0, loss="cross_entropy"))]
fn verify_lemma(py: Python<'_>, trials: usize, seed: u64, loss: &str) -> PyResult<Py<PyAny>> {
    let loss = match loss {
        "cross_entropy" => Loss::CrossEntropy,
        "squared_error" => Loss::SquaredError,
        other => return Err(PyValueError::new_err(format!("unknown loss {other:?}"))),
    };
    let cfg = TrialConfig {
        trials,
        seed,
        loss,
        ..TrialConfig::default()
    };
    let report = py.detach(|| oracle::verify_lemma(&cfg)).map_err(to_py)?;
    to_dict(py, &report)
}

/// Runs the whole pipeline for a TOML config (default: the built-in
/// moons-3+1 fixture) and returns the run report.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
fn run_experiment(py: Python<'_>, config: Option<&str>, seed: Option<u64>) -> PyResult<Py<PyAny>> {
    let mut cfg = match config {
        Some(text) => ExperimentConfig::from_toml(text).map_err(to_py)?,
        None => ExperimentConfig::moons_3_plus_1(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let exp = py
        .detach(|| decision_core::cli::pipeline::run_experiment(&cfg))
        .map_err(to_py)?;
    to_dict(py, &exp.report)
}

/// The built-in moons-3+1 fixture as TOML text.
#[pyfunction]
fn moons_3_plus_1_config() -> PyResult<String> {
    ExperimentConfig::moons_3_plus_1().to_toml().map_err(to_py)
}

#[pymodule]
fn decision(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySourceModel>()?;
    m.add_class::<PyAdaptResult>()?;
    m.add_function(wrap_pyfunction!(generate_domain, m)?)?;
    m.add_function(wrap_pyfunction!(adapt, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_project, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_reduction, m)?)?;
    m.add_function(wrap_pyfunction!(verify_lemma, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(moons_3_plus_1_config, m)?)?;
    m.add("CHECKPOINT_VERSION", models::CHECKPOINT_VERSION)?;
    Ok(())
}
