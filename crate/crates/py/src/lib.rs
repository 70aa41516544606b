//! Python bindings: `import dlformer`.

use std::path::PathBuf;

use dlformer::checkpoint::{config_hash, Checkpoint, CheckpointError, Provenance, TrainingMeta};
use dlformer::data::{
    chronological_split, latest_window, load_csv, make_windows, prepare_splits, LoadOptions, SeriesTable,
    WindowSample, DEFAULT_SPLIT,
};
use dlformer::explain::{extract_explanation, per_horizon_explanations, ExplanationMap};
use dlformer::metrics::{self, evaluate, MetricCell, MetricError};
use dlformer::model::{DLFormer, ModelConfig};
use dlformer::synth::{self as synthetic, Generator};
use dlformer::training::{self, EpochRecord, TrainConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn checkpoint_err(e: CheckpointError) -> PyErr {
    match e {
        CheckpointError::Io(io) => PyIOError::new_err(io.to_string()),
        other => value_err(other),
    }
}

/// Architecture hyperparameters. Unset widths take the library defaults.
#[pyclass(name = "ModelConfig", module = "dlformer", from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    pub inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (features, lags, horizon, *, reference=None, d_embed=None, d_attn=None, heads=None,
        encoder_blocks=None, decoder_blocks=None, d_ff=None, d_head=None, layer_norm=false, causal_mask=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        features: usize,
        lags: usize,
        horizon: usize,
        reference: Option<usize>,
        d_embed: Option<usize>,
        d_attn: Option<usize>,
        heads: Option<usize>,
        encoder_blocks: Option<usize>,
        decoder_blocks: Option<usize>,
        d_ff: Option<usize>,
        d_head: Option<usize>,
        layer_norm: bool,
        causal_mask: bool,
    ) -> PyResult<Self> {
        let mut c = ModelConfig::new(features, lags, horizon);
        if let Some(d) = d_embed {
            c = c.with_embed(d);
        }
        c.reference = reference.unwrap_or(c.reference);
        c.d_attn = d_attn.unwrap_or(c.d_attn);
        c.heads = heads.unwrap_or(c.heads);
        c.encoder_blocks = encoder_blocks.unwrap_or(c.encoder_blocks);
        c.decoder_blocks = decoder_blocks.unwrap_or(c.decoder_blocks);
        c.d_ff = d_ff.unwrap_or(c.d_ff);
        c.d_head = d_head.unwrap_or(c.d_head);
        c.layer_norm = layer_norm;
        c.causal_mask = causal_mask;
        c.validate().map_err(value_err)?;
        Ok(Self { inner: c })
    }

    #[getter]
    fn features(&self) -> usize {
        self.inner.features
    }

    #[getter]
    fn lags(&self) -> usize {
        self.inner.lags
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[getter]
    fn reference(&self) -> usize {
        self.inner.reference
    }

    #[getter]
    fn d_embed(&self) -> usize {
        self.inner.d_embed
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.heads
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("serializable")
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.to_json())
    }
}

/// A multivariate series with one named target column.
#[pyclass(name = "Table", module = "dlformer", from_py_object)]
#[derive(Clone)]
pub struct PyTable {
    pub inner: SeriesTable,
}

#[pymethods]
impl PyTable {
    /// Builds a table from rows of floats ordered like `columns`.
    #[new]
    fn new(columns: Vec<String>, target: &str, rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = SeriesTable::new(columns, target, rows, None).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_csv(path: PathBuf, target: &str) -> PyResult<Self> {
        let inner = load_csv(&path, target, &LoadOptions::default()).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.inner.feature_names().to_vec()
    }

    #[getter]
    fn target(&self) -> String {
        self.inner.target_name().to_string()
    }

    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        let j = self
            .inner
            .feature_names()
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| value_err(format!("no column {name:?}")))?;
        Ok(self.inner.column(j))
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len()).map(|t| self.inner.row(t).to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Table(rows={}, columns={:?}, target={:?})",
            self.inner.len(),
            self.inner.feature_names(),
            self.inner.target_name()
        )
    }
}

/// A bare network. `forward` takes one `features × lags` window (oldest lag
/// first) and the `reference` most recent target values.
#[pyclass(name = "DLFormer", module = "dlformer", from_py_object)]
#[derive(Clone)]
pub struct PyDLFormer {
    pub inner: DLFormer,
}

fn sample_from(cfg: &ModelConfig, x: Vec<Vec<f64>>, y_ref: Vec<f64>) -> PyResult<WindowSample> {
    if x.len() != cfg.features || x.iter().any(|r| r.len() != cfg.lags) {
        return Err(value_err(format!("x must be {} rows of {} lags", cfg.features, cfg.lags)));
    }
    if y_ref.len() != cfg.reference {
        return Err(value_err(format!("y_ref must hold {} values", cfg.reference)));
    }
    Ok(WindowSample {
        features: cfg.features,
        lags: cfg.lags,
        x: x.concat(),
        y_ref,
        y: Vec::new(),
        anchor: 0,
    })
}

#[pymethods]
impl PyDLFormer {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        let inner = DLFormer::new(config.inner.clone(), seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config().clone(),
        }
    }

    /// Number of trainable scalars.
    fn num_parameters(&self) -> usize {
        let p = self.inner.params();
        p.ids().map(|id| p.get(id).value.numel()).sum()
    }

    /// Returns the forecast and the last decoder block's cross-attention
    /// matrix (`None` without decoder blocks).
    fn forward(&self, x: Vec<Vec<f64>>, y_ref: Vec<f64>) -> PyResult<(Vec<f64>, Option<Vec<Vec<f64>>>)> {
        let s = sample_from(self.inner.config(), x, y_ref)?;
        let (pred, rec) = self.inner.forward(&s).map_err(runtime_err)?;
        let matrix = rec.map(|r| {
            let n = r.matrix.shape()[0];
            (0..n).map(|i| r.matrix.row(i).to_vec()).collect()
        });
        Ok((pred, matrix))
    }
}

/// Weights over every (feature, lag) pair; lags run from 1 (oldest) to L.
#[pyclass(name = "Explanation", module = "dlformer", from_py_object)]
#[derive(Clone)]
pub struct PyExplanation {
    pub inner: ExplanationMap,
}

#[pymethods]
impl PyExplanation {
    #[getter]
    fn features(&self) -> Vec<String> {
        self.inner.features.clone()
    }

    #[getter]
    fn lags(&self) -> usize {
        self.inner.lags
    }

    #[getter]
    fn sample_count(&self) -> usize {
        self.inner.sample_count
    }

    /// `features × lags` nested list.
    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        self.inner.weights.chunks(self.inner.lags).map(<[f64]>::to_vec).collect()
    }

    fn feature_importance<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let fi = self.inner.aggregate_by_feature();
        let d = PyDict::new(py);
        for (f, w) in fi.features.iter().zip(&fi.weights) {
            d.set_item(f, w)?;
        }
        Ok(d)
    }

    /// 1-based lag with the largest weight for `feature`.
    fn peak_lag(&self, feature: &str) -> PyResult<usize> {
        self.inner
            .lag_profiles()
            .into_iter()
            .find(|p| p.feature == feature)
            .map(|p| p.peak_lag())
            .ok_or_else(|| value_err(format!("no feature {feature:?}")))
    }

    /// The `k` heaviest `(feature, lag, weight)` triples, descending.
    fn top(&self, k: usize) -> Vec<(String, usize, f64)> {
        self.inner
            .top_k(k)
            .into_iter()
            .map(|r| (r.feature, r.lag, r.weight))
            .collect()
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let prov = Provenance::new("unknown", 0);
        self.inner.write_csv(path, None, &prov).map_err(runtime_err)
    }
}

fn cell_dict<'py>(py: Python<'py>, c: &MetricCell) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("lags", c.lags)?;
    d.set_item("horizon", c.horizon)?;
    d.set_item("rmse", c.rmse)?;
    d.set_item("r2", c.r2)?;
    d.set_item("dtw", c.dtw)?;
    d.set_item("samples", c.samples)?;
    d.set_item("scale", &c.scale)?;
    Ok(d)
}

/// A trained model bundled with its column names and normalizer.
#[pyclass(name = "Forecaster", module = "dlformer", from_py_object)]
#[derive(Clone)]
pub struct PyForecaster {
    pub inner: Checkpoint,
    history: Vec<EpochRecord>,
}

impl PyForecaster {
    fn split_ratios(&self) -> [f64; 3] {
        self.inner
            .meta
            .extra
            .get("split")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or(DEFAULT_SPLIT)
    }

    fn windows(&self, table: &PyTable, split: &str) -> PyResult<Vec<WindowSample>> {
        let ck = &self.inner;
        ck.check_columns(table.inner.feature_names(), table.inner.target_name())
            .map_err(checkpoint_err)?;
        let spec = ck.model.config().window();
        let (tr, va, te) = chronological_split(&table.inner, self.split_ratios(), spec.min_rows()).map_err(value_err)?;
        let part = match split {
            "train" => tr,
            "valid" => va,
            "test" => te,
            "all" => table.inner.clone(),
            other => return Err(value_err(format!("unknown split {other:?}"))),
        };
        make_windows(&ck.normalizer.apply(&part), &spec).map_err(value_err)
    }
}

#[pymethods]
impl PyForecaster {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Checkpoint::load(path).map_err(checkpoint_err)?;
        Ok(Self {
            inner,
            history: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(checkpoint_err)
    }

    #[getter]
    fn model(&self) -> PyDLFormer {
        PyDLFormer {
            inner: self.inner.model.clone(),
        }
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.meta.epoch
    }

    #[getter]
    fn best_valid_mse(&self) -> Option<f64> {
        self.inner.meta.best_valid_mse
    }

    /// Per-epoch `(epoch, train_mse, valid_mse, is_best)`; empty after `load`.
    #[getter]
    fn history(&self) -> Vec<(usize, f64, f64, bool)> {
        self.history
            .iter()
            .map(|r| (r.epoch, r.train_mse, r.valid_mse, r.is_best))
            .collect()
    }

    /// RMSE, R² (`None` for a constant target) and DTW on the original scale.
    #[pyo3(signature = (table, split="test"))]
    fn evaluate<'py>(&self, py: Python<'py>, table: &PyTable, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let ws = self.windows(table, split)?;
        let target = table.inner.target_index();
        let cell = py
            .detach(|| evaluate(&self.inner.model, &ws, &self.inner.normalizer, target, 64))
            .map_err(runtime_err)?;
        cell_dict(py, &cell)
    }

    /// Attention map averaged over every window of `split`.
    #[pyo3(signature = (table, split="test"))]
    fn explain(&self, py: Python<'_>, table: &PyTable, split: &str) -> PyResult<PyExplanation> {
        let ws = self.windows(table, split)?;
        let names = table.inner.feature_names().to_vec();
        let inner = py
            .detach(|| extract_explanation(&self.inner.model, &ws, &names))
            .map_err(runtime_err)?;
        Ok(PyExplanation { inner })
    }

    /// One map per forecast step.
    #[pyo3(signature = (table, split="test"))]
    fn explain_per_horizon(&self, py: Python<'_>, table: &PyTable, split: &str) -> PyResult<Vec<PyExplanation>> {
        let ws = self.windows(table, split)?;
        let names = table.inner.feature_names().to_vec();
        let maps = py
            .detach(|| per_horizon_explanations(&self.inner.model, &ws, &names))
            .map_err(runtime_err)?;
        Ok(maps.into_iter().map(|inner| PyExplanation { inner }).collect())
    }

    /// Forecast of the next `horizon` target values past the end of `table`,
    /// on the original scale.
    fn forecast(&self, table: &PyTable) -> PyResult<Vec<f64>> {
        let ck = &self.inner;
        ck.check_columns(table.inner.feature_names(), table.inner.target_name())
            .map_err(checkpoint_err)?;
        let spec = ck.model.config().window();
        let w = latest_window(&ck.normalizer.apply(&table.inner), &spec).map_err(value_err)?;
        let (pred, _) = ck.model.forward(&w).map_err(runtime_err)?;
        let t = table.inner.target_index();
        Ok(pred.into_iter().map(|v| ck.normalizer.invert_value(t, v)).collect())
    }
}

/// Trains a model on the train split of `table`, early-stopping on the
/// validation split. `patience` defaults to `min(50, max_epochs)`.
#[pyfunction]
#[pyo3(signature = (table, config, *, learning_rate=1e-4, batch_size=64, max_epochs=200, patience=None, seed=0,
    split=(0.6, 0.2, 0.2), normalize=true, threads=1))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    table: &PyTable,
    config: &PyModelConfig,
    learning_rate: f64,
    batch_size: usize,
    max_epochs: usize,
    patience: Option<usize>,
    seed: u64,
    split: (f64, f64, f64),
    normalize: bool,
    threads: usize,
) -> PyResult<PyForecaster> {
    let t = &table.inner;
    let cfg = config.inner.clone();
    if cfg.features != t.num_features() {
        return Err(value_err(format!(
            "config has {} features but the table has {}",
            cfg.features,
            t.num_features()
        )));
    }
    let tc = TrainConfig {
        learning_rate,
        batch_size,
        max_epochs,
        patience: patience.unwrap_or(TrainConfig::default().patience.min(max_epochs)),
        seed,
        threads,
        ..TrainConfig::default()
    };
    tc.validate().map_err(value_err)?;
    let ratios = [split.0, split.1, split.2];
    let splits = prepare_splits(t, ratios, cfg.window().min_rows(), normalize).map_err(value_err)?;
    let tr = make_windows(&splits.train, &cfg.window()).map_err(value_err)?;
    let va = make_windows(&splits.valid, &cfg.window()).map_err(value_err)?;
    let model = DLFormer::new(cfg, seed).map_err(value_err)?;
    let outcome = py
        .detach(|| training::train(model, &tr, &va, &tc, |_| {}))
        .map_err(runtime_err)?;
    let mut extra = serde_json::Map::new();
    extra.insert("split".into(), serde_json::json!(ratios));
    extra.insert("normalize".into(), serde_json::json!(normalize));
    extra.insert("train_config".into(), serde_json::to_value(&tc).expect("serializable"));
    let inner = Checkpoint {
        model: outcome.model,
        feature_names: t.feature_names().to_vec(),
        target: t.target_name().to_string(),
        normalizer: splits.normalizer,
        meta: TrainingMeta {
            epoch: outcome.best_epoch,
            best_valid_mse: Some(outcome.best_valid_mse),
            seed,
            extra,
        },
    };
    Ok(PyForecaster {
        inner,
        history: outcome.history,
    })
}

/// Generates a synthetic table, e.g. `synth("lagged-copy(j=2,tau=3)")`.
/// With `path` set, also writes the CSV and its metadata sidecar.
#[pyfunction]
#[pyo3(signature = (spec, rows=1000, features=3, seed=0, path=None))]
fn synth(spec: &str, rows: usize, features: usize, seed: u64, path: Option<PathBuf>) -> PyResult<PyTable> {
    let g: Generator = spec.parse().map_err(value_err)?;
    let data = synthetic::generate(&g, rows, features, seed).map_err(value_err)?;
    if let Some(p) = path {
        synthetic::write(&data, &p).map_err(|e| PyIOError::new_err(e.to_string()))?;
    }
    Ok(PyTable { inner: data.table })
}

/// Stable short hash of a config and its column layout.
#[pyfunction]
fn hash_config(config: &PyModelConfig, columns: Vec<String>, target: &str) -> String {
    config_hash(&config.inner, &columns, target)
}

#[pyfunction]
fn rmse(y: Vec<f64>, y_hat: Vec<f64>) -> PyResult<f64> {
    metrics::rmse(&y, &y_hat).map_err(value_err)
}

/// Coefficient of determination; `None` when `y` is constant.
#[pyfunction]
fn r2(y: Vec<f64>, y_hat: Vec<f64>) -> PyResult<Option<f64>> {
    match metrics::r2(&y, &y_hat) {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::ConstantTarget) => Ok(None),
        Err(e) => Err(value_err(e)),
    }
}

/// Dynamic time warping distance with absolute-difference cost.
#[pyfunction]
fn dtw(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::dtw(&a, &b).map_err(value_err)
}

#[pymodule(name = "dlformer")]
pub fn dlformer_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyTable>()?;
    m.add_class::<PyDLFormer>()?;
    m.add_class::<PyExplanation>()?;
    m.add_class::<PyForecaster>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(hash_config, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(r2, m)?)?;
    m.add_function(wrap_pyfunction!(dtw, m)?)?;
    Ok(())
}
