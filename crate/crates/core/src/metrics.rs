//! Forecast metrics and the evaluation harness.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Provenance;
use crate::data::{Normalizer, PreparedSplits, WindowSample};
use crate::model::{DLFormer, ModelConfig, ModelError};
use crate::training::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty series")]
    Empty,
    #[error("r2 needs at least two values")]
    TooShort,
    #[error("r2 is undefined for a constant target")]
    ConstantTarget,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("data error: {0}")]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(MetricError::LengthMismatch(y.len(), y_hat.len()));
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Coefficient of determination `1 − SSE/SST`.
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    if y.len() < 2 {
        return Err(MetricError::TooShort);
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|a| (a - mean) * (a - mean)).sum();
    if sst == 0.0 {
        return Err(MetricError::ConstantTarget);
    }
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - sse / sst)
}

/// Unconstrained dynamic time warping with `|aᵢ − bⱼ|` local cost and no
/// path-length normalization.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &ai in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = (ai - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Metrics of one (L, T) configuration. `r2` is `None` when the target is
/// constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub lags: usize,
    pub horizon: usize,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub dtw: f64,
    pub samples: usize,
    /// Scale the metrics are reported on.
    pub scale: String,
}

/// Scores forecasts against the targets of `samples` after mapping both back
/// to the original scale of the target column. RMSE and R² pool every
/// horizon step; DTW is computed per window and averaged.
pub fn score(
    samples: &[WindowSample],
    predictions: &[Vec<f64>],
    normalizer: &Normalizer,
    target: usize,
) -> Result<MetricCell> {
    if samples.is_empty() {
        return Err(MetricError::Empty);
    }
    if samples.len() != predictions.len() {
        return Err(MetricError::LengthMismatch(samples.len(), predictions.len()));
    }
    let denorm = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| normalizer.invert_value(target, x)).collect() };
    let mut ys = Vec::new();
    let mut preds = Vec::new();
    let mut dtw_sum = 0.0;
    for (s, p) in samples.iter().zip(predictions) {
        let (y, yh) = (denorm(&s.y), denorm(p));
        dtw_sum += dtw(&y, &yh)?;
        ys.extend(y);
        preds.extend(yh);
    }
    let r2 = match r2(&ys, &preds) {
        Ok(v) => Some(v),
        Err(MetricError::ConstantTarget) | Err(MetricError::TooShort) => {
            log::warn!("r2 undefined: target is constant over the evaluated windows");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MetricCell {
        lags: samples[0].lags,
        horizon: samples[0].y.len(),
        rmse: rmse(&ys, &preds)?,
        r2,
        dtw: dtw_sum / samples.len() as f64,
        samples: samples.len(),
        scale: "original".to_string(),
    })
}

pub fn evaluate(
    model: &DLFormer,
    samples: &[WindowSample],
    normalizer: &Normalizer,
    target: usize,
    batch_size: usize,
) -> Result<MetricCell> {
    if samples.is_empty() {
        return Err(MetricError::Empty);
    }
    let preds = model.predict(samples, batch_size)?;
    score(samples, &preds, normalizer, target)
}

/// A grid of metric cells in lag-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub provenance: Provenance,
    pub lags: Vec<usize>,
    pub horizons: Vec<usize>,
    pub cells: Vec<MetricCell>,
}

impl MetricReport {
    pub fn cell(&self, lags: usize, horizon: usize) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.lags == lags && c.horizon == horizon)
    }

    /// One row per lag; for each horizon the columns `T{h}_rmse`, `T{h}_r2`,
    /// `T{h}_dtw`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        use std::io::Write;
        writeln!(file, "{}", self.provenance.comment_line())?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["lags".to_string()];
        for h in &self.horizons {
            for m in ["rmse", "r2", "dtw"] {
                header.push(format!("T{h}_{m}"));
            }
        }
        w.write_record(&header)?;
        for &l in &self.lags {
            let mut row = vec![l.to_string()];
            for &h in &self.horizons {
                match self.cell(l, h) {
                    Some(c) => {
                        row.push(c.rmse.to_string());
                        row.push(c.r2.map_or("NaN".to_string(), |v| v.to_string()));
                        row.push(c.dtw.to_string());
                    }
                    None => row.extend(["".to_string(), "".to_string(), "".to_string()]),
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>, extra: &serde_json::Value) -> Result<()> {
        let doc = serde_json::json!({ "report": self, "run": extra });
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }
}

pub const SWEEP_LAGS: [usize; 4] = [3, 6, 12, 24];
pub const SWEEP_HORIZONS: [usize; 4] = [1, 3, 6, 12];

/// Trains and tests one model per (L, T) cell. `base` supplies every model
/// hyperparameter except `lags`, `horizon` and `reference`; the reference
/// length is `min(T, L)`. Each cell seeds from `(seed, L, T)`.
pub fn lag_sweep(
    splits: &PreparedSplits,
    lags: &[usize],
    horizons: &[usize],
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    provenance: Provenance,
    mut on_cell: impl FnMut(&MetricCell),
) -> Result<MetricReport> {
    let target = splits.train.target_index();
    let mut cells = Vec::new();
    for &l in lags {
        for &t in horizons {
            let mut cfg = base.clone();
            cfg.lags = l;
            cfg.horizon = t;
            cfg.reference = t.min(l);
            cfg.validate()?;
            let spec = cfg.window();
            let tr = crate::data::make_windows(&splits.train, &spec)?;
            let va = crate::data::make_windows(&splits.valid, &spec)?;
            let te = crate::data::make_windows(&splits.test, &spec)?;
            let seed = cell_seed(train_cfg.seed, l, t);
            let model = DLFormer::new(cfg, seed)?;
            let tc = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let outcome = train(model, &tr, &va, &tc, |_| {})?;
            let cell = evaluate(&outcome.model, &te, &splits.normalizer, target, tc.batch_size)?;
            on_cell(&cell);
            cells.push(cell);
        }
    }
    Ok(MetricReport {
        provenance,
        lags: lags.to_vec(),
        horizons: horizons.to_vec(),
        cells,
    })
}

pub fn cell_seed(seed: u64, lags: usize, horizon: usize) -> u64 {
    seed ^ ((lags as u64) << 32) ^ ((horizon as u64) << 16)
}
