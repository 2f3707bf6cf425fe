//! Python bindings: corpora, embedding stores, episodes, the prototypical
//! head, training, evaluation and diagnostics.

use std::path::PathBuf;

use protonorm::corpus::{parse_conll, read_conll, serialize_conll, FrequencyTable};
use protonorm::diagnostics::{self, BiasScenario};
use protonorm::encoder::ProjectionParams;
use protonorm::math::{coeff_variation, Mat};
use protonorm::protohead::distance_decomposition;
use protonorm::trainer::{self, EvalOptions, SplitData};
use protonorm::{
    episode_forward, load_embedding_dump, sample_episodes, synth_generate, Dataset, EmbeddingStore, Episode, EpisodeSpec,
    NormalizationMode, Split, SyntheticConfig, TrainConfig,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString};
use pyo3::IntoPyObjectExt;
use serde::Serialize;
use serde_json::Value;

create_exception!(protonorm_py, ProtonormError, PyValueError, "Validation or numerical error raised by protonorm.");

fn err(e: protonorm::Error) -> PyErr {
    match e {
        protonorm::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => ProtonormError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPy<T> for protonorm::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_bound_py_any(py)?,
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_bound_py_any(py)?,
            (None, Some(i)) => i.into_bound_py_any(py)?,
            _ => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py)?,
        },
        Value::String(s) => s.into_bound_py_any(py)?,
        Value::Array(items) => {
            let list = PyList::empty(py);
            for it in items {
                list.append(json_to_py(py, it)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, it) in map {
                d.set_item(k, json_to_py(py, it)?)?;
            }
            d.into_any()
        }
    })
}

fn py_to_json(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    if obj.is_none() {
        Ok(Value::Null)
    } else if obj.is_instance_of::<PyBool>() {
        Ok(Value::Bool(obj.extract()?))
    } else if obj.is_instance_of::<PyInt>() {
        match obj.extract::<i64>() {
            Ok(i) => Ok(i.into()),
            Err(_) => Ok(obj.extract::<u64>()?.into()),
        }
    } else if obj.is_instance_of::<PyFloat>() {
        let f: f64 = obj.extract()?;
        serde_json::Number::from_f64(f)
            .map(Value::Number)
            .ok_or_else(|| PyValueError::new_err(format!("non-finite number {f} in config")))
    } else if obj.is_instance_of::<PyString>() {
        Ok(Value::String(obj.extract()?))
    } else if let Ok(d) = obj.cast::<PyDict>() {
        let mut map = serde_json::Map::new();
        for (k, v) in d.iter() {
            map.insert(k.extract::<String>()?, py_to_json(&v)?);
        }
        Ok(Value::Object(map))
    } else if let Ok(items) = obj.try_iter() {
        Ok(Value::Array(items.map(|it| py_to_json(&it?)).collect::<PyResult<_>>()?))
    } else {
        Err(PyValueError::new_err(format!("cannot convert {} to JSON", obj.get_type().name()?)))
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

/// Deserializes a config from an optional dict; missing keys take defaults.
fn from_dict<T: serde::de::DeserializeOwned + Default>(d: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    match d {
        None => Ok(T::default()),
        Some(d) => serde_json::from_value(py_to_json(d.as_any())?).map_err(|e| ProtonormError::new_err(format!("config: {e}"))),
    }
}

fn parse_mode(mode: &str) -> PyResult<NormalizationMode> {
    mode.parse().py_err()
}

fn parse_split(split: &str) -> PyResult<Split> {
    serde_json::from_value(Value::String(split.to_ascii_lowercase()))
        .map_err(|_| PyValueError::new_err(format!("unknown split {split:?}; expected train, dev or test")))
}

fn mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    Mat::from_rows(&rows).py_err()
}

fn mat_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.to_vec()).collect()
}

/// Token embeddings indexed by `(sentence, position)`.
#[pyclass(name = "EmbeddingStore", module = "protonorm_py", frozen)]
struct PyStore {
    inner: EmbeddingStore,
}

#[pymethods]
impl PyStore {
    /// Reads a PNE1 dump and its `.index.jsonl` companion.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyStore { inner: load_embedding_dump(&path).py_err()? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).py_err()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!("row {i} out of range")));
        }
        Ok(self.inner.row(i).to_vec())
    }

    fn row_id(&self, sent: u64, pos: u32) -> Option<usize> {
        self.inner.row_id(sent, pos)
    }

    fn word(&self, i: usize) -> PyResult<String> {
        self.inner.meta().get(i).map(|m| m.word.clone()).ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(i))
    }

    fn __repr__(&self) -> String {
        format!("EmbeddingStore(rows={}, dim={})", self.inner.len(), self.inner.dim())
    }
}

/// Labeled sentences of one split.
#[pyclass(name = "Dataset", module = "protonorm_py", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (path, split = "test"))]
    fn read_conll(path: PathBuf, split: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: read_conll(&path, parse_split(split)?).py_err()? })
    }

    #[staticmethod]
    #[pyo3(signature = (text, split = "test"))]
    fn parse_conll(text: &str, split: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: parse_conll(text, parse_split(split)?).py_err()? })
    }

    fn to_conll(&self) -> String {
        serialize_conll(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.sentences.len()
    }

    /// Entity class names (O excluded).
    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.schema.names()[1..].to_vec()
    }

    #[getter]
    fn token_count(&self) -> usize {
        self.inner.token_count()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(sentences={}, classes={})", self.inner.sentences.len(), self.inner.schema.len() - 1)
    }
}

/// One few-shot episode.
#[pyclass(name = "Episode", module = "protonorm_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyEpisode {
    inner: Episode,
}

#[pymethods]
impl PyEpisode {
    #[getter]
    fn index(&self) -> u64 {
        self.inner.index
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    #[getter]
    fn support_ids(&self) -> Vec<u64> {
        self.inner.support.iter().map(|s| s.sent).collect()
    }

    #[getter]
    fn query_ids(&self) -> Vec<u64> {
        self.inner.query.iter().map(|s| s.sent).collect()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Episode(index={}, classes={:?}, support={}, query={})",
            self.inner.index,
            self.inner.classes,
            self.inner.support.len(),
            self.inner.query.len()
        )
    }
}

/// Linear projection `y = W x + b`.
#[pyclass(name = "ProjectionParams", module = "protonorm_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyParams {
    inner: ProjectionParams,
}

#[pymethods]
impl PyParams {
    #[new]
    fn new(w: Vec<Vec<f64>>, b: Vec<f64>) -> PyResult<Self> {
        Ok(PyParams { inner: ProjectionParams::new(mat(w)?, b, true).py_err()? })
    }

    #[staticmethod]
    fn identity(dim: usize) -> Self {
        PyParams { inner: ProjectionParams::identity(dim) }
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyParams { inner: ProjectionParams::read(&path).py_err()? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).py_err()
    }

    #[getter]
    fn w(&self) -> Vec<Vec<f64>> {
        mat_rows(&self.inner.w)
    }

    #[getter]
    fn b(&self) -> Vec<f64> {
        self.inner.b.clone()
    }

    fn apply(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.d_in() {
            return Err(err(protonorm::Error::DimensionMismatch { expected: self.inner.d_in(), actual: x.len() }));
        }
        Ok(self.inner.apply(&x))
    }
}

/// Generated corpus with frequency-dependent embedding norms.
#[pyclass(name = "SyntheticCorpus", module = "protonorm_py", frozen)]
struct PySynthetic {
    inner: protonorm::SyntheticCorpus,
    config: SyntheticConfig,
}

#[pymethods]
impl PySynthetic {
    /// `config` keys override the defaults; `symmetric=True` starts from the
    /// equal-frequency preset instead.
    #[new]
    #[pyo3(signature = (config = None, symmetric = false))]
    fn new(config: Option<&Bound<'_, PyDict>>, symmetric: bool) -> PyResult<Self> {
        let base = if symmetric { SyntheticConfig::symmetric() } else { SyntheticConfig::default() };
        let mut doc = serde_json::to_value(&base).expect("config serializes");
        if let Some(d) = config {
            if let (Value::Object(b), Value::Object(o)) = (&mut doc, py_to_json(d.as_any())?) {
                b.extend(o);
            }
        }
        let cfg: SyntheticConfig = serde_json::from_value(doc).map_err(|e| ProtonormError::new_err(format!("config: {e}")))?;
        Ok(PySynthetic { inner: synth_generate(&cfg).py_err()?, config: cfg })
    }

    /// The split's dataset and a store keyed to its local sentence ids.
    fn split(&self, split: &str) -> PyResult<(PyDataset, PyStore)> {
        let (ds, store) = self.inner.store.rebased(self.inner.split(parse_split(split)?)).py_err()?;
        Ok((PyDataset { inner: ds }, PyStore { inner: store }))
    }

    #[getter]
    fn frequencies(&self) -> Vec<(String, u64)> {
        self.inner.frequencies.iter().map(|(w, c)| (w.to_string(), c)).collect()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.config)
    }
}

/// Outcome of a training run.
#[pyclass(name = "TrainResult", module = "protonorm_py", frozen)]
struct PyTrainResult {
    #[pyo3(get)]
    params: PyParams,
    #[pyo3(get)]
    initial_params: PyParams,
    #[pyo3(get)]
    best_step: usize,
    #[pyo3(get)]
    best_dev_f1: f64,
    #[pyo3(get)]
    steps: usize,
    #[pyo3(get)]
    stopped_early: bool,
    curve: trainer::LearningCurve,
}

#[pymethods]
impl PyTrainResult {
    /// Records of `step`, `train_f1`, `dev_f1`, `train_loss`.
    #[getter]
    fn curve<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.curve.records)
    }

    fn curve_csv(&self) -> String {
        self.curve.to_csv()
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, k = 5, n_lo = 1, n_hi = 2, q_lo = 1, q_hi = 2, seed = 0, start = 0, count = 1, workers = 1))]
#[allow(clippy::too_many_arguments)]
fn sample(
    dataset: &PyDataset,
    k: usize,
    n_lo: usize,
    n_hi: usize,
    q_lo: usize,
    q_hi: usize,
    seed: u64,
    start: u64,
    count: usize,
    workers: usize,
) -> PyResult<Vec<PyEpisode>> {
    let spec = EpisodeSpec::new(k, n_lo, n_hi, q_lo, q_hi, seed).py_err()?;
    let eps = sample_episodes(&dataset.inner, &spec, start, count, workers).py_err()?;
    Ok(eps.into_iter().map(|inner| PyEpisode { inner }).collect())
}

/// Prototypes, normalization, distances and loss for already-embedded rows.
#[pyfunction]
#[pyo3(signature = (support, support_labels, query, query_labels, n_classes, mode = "none"))]
fn forward<'py>(
    py: Python<'py>,
    support: Vec<Vec<f64>>,
    support_labels: Vec<usize>,
    query: Vec<Vec<f64>>,
    query_labels: Vec<usize>,
    n_classes: usize,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let out = episode_forward(&mat(support)?, &support_labels, &mat(query)?, &query_labels, n_classes, parse_mode(mode)?)
        .py_err()?;
    let d = PyDict::new(py);
    d.set_item("loss", out.loss)?;
    d.set_item("predictions", out.predictions)?;
    d.set_item("probabilities", mat_rows(&out.probs))?;
    d.set_item("distances", mat_rows(&out.distances))?;
    d.set_item("prototypes", mat_rows(&out.prototypes.c))?;
    d.set_item("prototype_norms", out.prototypes.raw_norms)?;
    Ok(d)
}

/// `‖x‖²`, `xᵀc`, `‖c‖²` and their combination `‖x − c‖²`.
#[pyfunction]
fn distance_terms<'py>(py: Python<'py>, x: Vec<f64>, c: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let t = distance_decomposition(&x, &c).py_err()?;
    let d = PyDict::new(py);
    d.set_item("query_sq", t.query_sq)?;
    d.set_item("cross", t.cross)?;
    d.set_item("proto_sq", t.proto_sq)?;
    d.set_item("distance", t.distance())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(name = "coeff_variation")]
fn py_coeff_variation<'py>(py: Python<'py>, values: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &coeff_variation(&values).py_err()?)
}

/// Episodic training. `config` holds `TrainConfig` fields, e.g.
/// `{"mode": "proto_only", "max_epochs": 5}`.
#[pyfunction]
#[pyo3(signature = (train_data, dev_data, config = None))]
fn train(
    py: Python<'_>,
    train_data: (PyRef<'_, PyDataset>, PyRef<'_, PyStore>),
    dev_data: (PyRef<'_, PyDataset>, PyRef<'_, PyStore>),
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyTrainResult> {
    let cfg: TrainConfig = from_dict(config)?;
    let (tr_ds, tr_store) = (&train_data.0.inner, &train_data.1.inner);
    let (dv_ds, dv_store) = (&dev_data.0.inner, &dev_data.1.inner);
    let out = py
        .detach(|| {
            protonorm::train(
                SplitData { dataset: tr_ds, store: tr_store },
                SplitData { dataset: dv_ds, store: dv_store },
                &cfg,
            )
        })
        .py_err()?;
    Ok(PyTrainResult {
        params: PyParams { inner: out.params },
        initial_params: PyParams { inner: out.initial_params },
        best_step: out.best_step,
        best_dev_f1: out.best_dev_f1,
        steps: out.steps,
        stopped_early: out.stopped_early,
        curve: out.curve,
    })
}

/// Pooled micro-F1 over the query tokens of `episodes`.
#[pyfunction]
#[pyo3(signature = (episodes, store, params = None, mode = "none", span_level = false, workers = 1))]
fn evaluate<'py>(
    py: Python<'py>,
    episodes: Vec<PyRef<'py, PyEpisode>>,
    store: &PyStore,
    params: Option<&PyParams>,
    mode: &str,
    span_level: bool,
    workers: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let eps: Vec<Episode> = episodes.iter().map(|e| e.inner.clone()).collect();
    let mode = parse_mode(mode)?;
    let report = py
        .detach(|| protonorm::evaluate(&eps, &store.inner, params.map(|p| &p.inner), mode, EvalOptions { span_level, workers }))
        .py_err()?;
    to_py(py, &report)
}

/// Analytic against central-difference gradients; one row per mode.
#[pyfunction]
#[pyo3(signature = (episodes = 20, h = 1e-5, tol = 1e-4, seed = 2024))]
fn gradient_check<'py>(py: Python<'py>, episodes: usize, h: f64, tol: f64, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let rows = py.detach(|| trainer::gradient_check_suite(episodes, h, tol, seed, false)).py_err()?;
    to_py(py, &rows)
}

/// Pre-normalization prototype norms per class across episodes.
#[pyfunction]
#[pyo3(signature = (episodes, store, params = None))]
fn norm_survey<'py>(
    py: Python<'py>,
    episodes: Vec<PyRef<'py, PyEpisode>>,
    store: &PyStore,
    params: Option<&PyParams>,
) -> PyResult<Bound<'py, PyAny>> {
    let eps: Vec<Episode> = episodes.iter().map(|e| e.inner.clone()).collect();
    to_py(py, &diagnostics::prototype_norm_survey(&eps, &store.inner, params.map(|p| &p.inner)).py_err()?)
}

/// Predictions of every mode on two-prototype scenarios. Without
/// `prototypes`/`query`, draws `n` bisector scenarios.
#[pyfunction]
#[pyo3(signature = (prototypes = None, query = None, n = 1000, dim = 16, seed = 0, unit_prototypes = false))]
fn bias_probe<'py>(
    py: Python<'py>,
    prototypes: Option<Vec<Vec<f64>>>,
    query: Option<Vec<f64>>,
    n: usize,
    dim: usize,
    seed: u64,
    unit_prototypes: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let scenarios = match (prototypes, query) {
        (Some(p), Some(q)) => vec![BiasScenario { prototypes: mat(p)?, query: q }],
        (None, None) => {
            if dim < 2 {
                return Err(ProtonormError::new_err("dim must be at least 2"));
            }
            diagnostics::auto_scenarios(n, dim, seed, unit_prototypes)
        }
        _ => return Err(PyValueError::new_err("give both prototypes and query, or neither")),
    };
    let r = diagnostics::bias_probe(&scenarios).py_err()?;
    let d = PyDict::new(py);
    d.set_item("scenarios", r.scenarios.len())?;
    d.set_item("flips", r.flips)?;
    d.set_item("ambiguous", r.ambiguous)?;
    d.set_item("attraction", r.attraction)?;
    d.set_item("predictions", r.scenarios.iter().map(|s| s.predictions.to_vec()).collect::<Vec<_>>())?;
    Ok(d.into_any())
}

/// Word-mean PCA against log frequency; `frequencies` maps word to count.
#[pyfunction]
fn frequency_scatter<'py>(py: Python<'py>, store: &PyStore, frequencies: Vec<(String, u64)>) -> PyResult<Bound<'py, PyAny>> {
    let table = FrequencyTable::from_counts(frequencies);
    let s = diagnostics::pca_frequency_scatter(&store.inner, &table).py_err()?;
    let d = PyDict::new(py);
    d.set_item("words", s.rows.iter().map(|r| r.word.clone()).collect::<Vec<_>>())?;
    d.set_item("pc1", s.rows.iter().map(|r| r.pc1).collect::<Vec<_>>())?;
    d.set_item("pc2", s.rows.iter().map(|r| r.pc2).collect::<Vec<_>>())?;
    d.set_item("log_freq", s.rows.iter().map(|r| r.log_freq).collect::<Vec<_>>())?;
    d.set_item("variances", s.variances.to_vec())?;
    d.set_item("corr_pc1", s.corr_pc1)?;
    d.set_item("corr_pc2", s.corr_pc2)?;
    Ok(d.into_any())
}

#[pymodule]
fn protonorm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ProtonormError", m.py().get_type::<ProtonormError>())?;
    m.add("MODES", NormalizationMode::ALL.iter().map(|m| m.as_str()).collect::<Vec<_>>())?;
    m.add_class::<PyStore>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PySynthetic>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add_function(wrap_pyfunction!(distance_terms, m)?)?;
    m.add_function(wrap_pyfunction!(py_coeff_variation, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(norm_survey, m)?)?;
    m.add_function(wrap_pyfunction!(bias_probe, m)?)?;
    m.add_function(wrap_pyfunction!(frequency_scatter, m)?)?;
    Ok(())
}
