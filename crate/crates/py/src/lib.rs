//! Python bindings: cost accounting, metrics, data generation and a model
//! handle that trains, scores and round-trips checkpoints.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use zenith_core::checkpoint;
use zenith_core::evaluator;
use zenith_core::featurizer::{self, FeatureSchema, GroundTruthSpec};
use zenith_core::model::{self, ModelConfig, Scorer};
use zenith_core::trainer::{self, TrainConfig};
use zenith_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Input(_) | Error::UndefinedMetric(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn schema_or_default(schema_json: Option<&str>) -> PyResult<FeatureSchema> {
    schema_json.map_or_else(|| Ok(FeatureSchema::desk_default()), parse)
}

/// Parameter and FLOP accounting of a model config, as a JSON string.
#[pyfunction]
#[pyo3(signature = (model_json, schema_json=None))]
fn cost_report(model_json: &str, schema_json: Option<&str>) -> PyResult<String> {
    let cfg: ModelConfig = parse(model_json)?;
    let schema = schema_json.map(parse::<FeatureSchema>).transpose()?;
    let report = model::count_costs(&cfg, schema.as_ref()).map_err(to_py)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    evaluator::auc(&scores, &labels).map_err(to_py)
}

/// Mean per-user AUC over users that have both classes.
#[pyfunction]
fn uauc(scores: Vec<f64>, labels: Vec<f64>, user_ids: Vec<u64>) -> PyResult<f64> {
    evaluator::uauc(&scores, &labels, &user_ids).map(|u| u.value).map_err(to_py)
}

#[pyfunction]
fn logloss(probs: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    evaluator::logloss(&probs, &labels).map_err(to_py)
}

/// Writes `rows` synthetic examples (plus the metadata sidecar) to `path`
/// and returns the generator's Bayes AUC.
#[pyfunction]
#[pyo3(signature = (path, rows, seed=0))]
fn generate_dataset(path: PathBuf, rows: usize, seed: u64) -> PyResult<f64> {
    let schema = FeatureSchema::desk_default();
    let (data, meta) = featurizer::generate_dataset(&schema, &GroundTruthSpec::desk_default(), rows, seed).map_err(to_py)?;
    featurizer::write_dataset(&data, &meta, &path).map_err(to_py)?;
    Ok(meta.bayes_auc)
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    /// Builds a freshly initialized model; the schema defaults to the
    /// desk-scale synthetic layout.
    #[new]
    #[pyo3(signature = (config_json, schema_json=None))]
    fn new(config_json: &str, schema_json: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = parse(config_json)?;
        let schema = schema_or_default(schema_json)?;
        Ok(Self { inner: model::Model::build(&cfg, &schema).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.store.numel()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Trains on a dataset file and returns the per-step task losses.
    fn fit(&mut self, csv_path: PathBuf, train_json: &str) -> PyResult<Vec<f64>> {
        let cfg: TrainConfig = parse(train_json)?;
        let data = featurizer::read_csv(&csv_path, self.inner.schema()).map_err(to_py)?;
        let report = trainer::train(&mut self.inner, &data, &cfg).map_err(to_py)?;
        Ok(report.log.iter().map(|r| r.task_loss).collect())
    }

    /// Click probabilities for every row of a dataset file.
    fn predict(&self, csv_path: PathBuf) -> PyResult<Vec<f64>> {
        let data = featurizer::read_csv(&csv_path, self.inner.schema()).map_err(to_py)?;
        self.inner.predict(&data).map_err(to_py)
    }

    /// AUC, UAUC and log loss on a dataset file, as a JSON string.
    fn evaluate(&self, csv_path: PathBuf) -> PyResult<String> {
        let data = featurizer::read_csv(&csv_path, self.inner.schema()).map_err(to_py)?;
        let report = evaluator::evaluate(&self.inner, &data).map_err(to_py)?;
        serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

#[pymodule]
fn _zenith(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(uauc, m)?)?;
    m.add_function(wrap_pyfunction!(logloss, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    Ok(())
}
