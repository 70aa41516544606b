//! Per-(feature, lag) importance read off the last decoder cross-attention.
//!
//! For each sample the final row of the last decoder block's head-averaged
//! cross-attention is a distribution over the `k·L` encoder positions. The
//! explanation is the mean of those rows over all samples, optionally taken
//! per forecast step instead of only at the final one.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Provenance;
use crate::data::WindowSample;
use crate::model::{DLFormer, ModelError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("no samples to explain")]
    NoSamples,
    #[error("model has no decoder blocks, so there is no cross-attention to read")]
    NoDecoder,
    #[error("expected {expected} feature names, got {found}")]
    FeatureNames { expected: usize, found: usize },
    #[error("invalid explanation: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// Averaged attention over the distributed-lag positions. Lags are numbered
/// `1` (oldest) to `L` (most recent) within each feature block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMap {
    pub features: Vec<String>,
    pub lags: usize,
    pub weights: Vec<f64>,
    pub sample_count: usize,
    /// 0-based decoder row the weights were read from.
    pub row: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub features: Vec<String>,
    pub weights: Vec<f64>,
}

impl FeatureImportance {
    pub fn argmax(&self) -> usize {
        argmax(&self.weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagProfile {
    pub feature: String,
    /// Index `i` holds lag `i + 1`.
    pub weights: Vec<f64>,
}

impl LagProfile {
    /// 1-based lag with the largest weight.
    pub fn peak_lag(&self) -> usize {
        argmax(&self.weights) + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub feature: String,
    pub lag: usize,
    pub weight: f64,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl ExplanationMap {
    pub fn new(features: Vec<String>, lags: usize, weights: Vec<f64>, sample_count: usize, row: usize) -> Result<Self> {
        if lags == 0 || weights.len() != features.len() * lags {
            return Err(ExplainError::Invalid(format!(
                "{} weights for {} features at {lags} lags",
                weights.len(),
                features.len()
            )));
        }
        Ok(Self {
            features,
            lags,
            weights,
            sample_count,
            row,
        })
    }

    /// `(feature, lag)` label of flattened position `p`.
    pub fn label(&self, p: usize) -> (&str, usize) {
        (&self.features[p / self.lags], p % self.lags + 1)
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn aggregate_by_feature(&self) -> FeatureImportance {
        FeatureImportance {
            features: self.features.clone(),
            weights: self.weights.chunks(self.lags).map(|c| c.iter().sum()).collect(),
        }
    }

    pub fn lag_profiles(&self) -> Vec<LagProfile> {
        self.features
            .iter()
            .zip(self.weights.chunks(self.lags))
            .map(|(f, w)| LagProfile {
                feature: f.clone(),
                weights: w.to_vec(),
            })
            .collect()
    }

    /// Positions sorted by descending weight; ties keep position order.
    pub fn ranked(&self) -> Vec<RankedPair> {
        let mut idx: Vec<usize> = (0..self.weights.len()).collect();
        idx.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]));
        idx.into_iter()
            .map(|p| {
                let (f, lag) = self.label(p);
                RankedPair {
                    feature: f.to_string(),
                    lag,
                    weight: self.weights[p],
                }
            })
            .collect()
    }

    pub fn top_k(&self, k: usize) -> Vec<RankedPair> {
        let mut r = self.ranked();
        r.truncate(k);
        r
    }

    /// Long-format `feature,lag,weight` rows, in position order or, with
    /// `top`, the `top` heaviest positions in descending order.
    pub fn write_csv(&self, path: impl AsRef<Path>, top: Option<usize>, provenance: &Provenance) -> Result<()> {
        let rows: Vec<RankedPair> = match top {
            Some(k) => self.top_k(k),
            None => (0..self.weights.len())
                .map(|p| {
                    let (f, lag) = self.label(p);
                    RankedPair {
                        feature: f.to_string(),
                        lag,
                        weight: self.weights[p],
                    }
                })
                .collect(),
        };
        let mut file = std::fs::File::create(path)?;
        use std::io::Write;
        writeln!(file, "{}", provenance.comment_line())?;
        writeln!(file, "# samples={} row={}", self.sample_count, self.row)?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["feature", "lag", "weight"])?;
        for r in rows {
            w.write_record([r.feature, r.lag.to_string(), r.weight.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>, provenance: &Provenance) -> Result<()> {
        let doc = ExplanationDocument {
            provenance: provenance.clone(),
            feature_importance: self.aggregate_by_feature(),
            lag_profiles: self.lag_profiles(),
            map: self.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let doc: ExplanationDocument = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let m = doc.map;
        Self::new(m.features, m.lags, m.weights, m.sample_count, m.row)
    }
}

/// The JSON export: the map plus both aggregations and provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplanationDocument {
    pub provenance: Provenance,
    pub map: ExplanationMap,
    pub feature_importance: FeatureImportance,
    pub lag_profiles: Vec<LagProfile>,
}

/// Writes the per-feature totals as `feature,importance` rows.
pub fn write_feature_importance_csv(
    fi: &FeatureImportance,
    path: impl AsRef<Path>,
    provenance: &Provenance,
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    use std::io::Write;
    writeln!(file, "{}", provenance.comment_line())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["feature", "importance"])?;
    for (f, v) in fi.features.iter().zip(&fi.weights) {
        w.write_record([f.clone(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

const CHUNK: usize = 64;

/// Mean cross-attention rows for the requested decoder rows, one map each.
fn averaged_rows(model: &DLFormer, samples: &[WindowSample], features: &[String], rows: &[usize]) -> Result<Vec<ExplanationMap>> {
    let cfg = model.config();
    if samples.is_empty() {
        return Err(ExplainError::NoSamples);
    }
    if cfg.decoder_blocks == 0 {
        return Err(ExplainError::NoDecoder);
    }
    if features.len() != cfg.features {
        return Err(ExplainError::FeatureNames {
            expected: cfg.features,
            found: features.len(),
        });
    }
    let p_g = cfg.p_global();
    let mut sums = vec![vec![0.0; p_g]; rows.len()];
    for chunk in samples.chunks(CHUNK) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let out = model.forward_batch(&refs, false)?;
        for rec in &out.last_cross {
            for (sum, &r) in sums.iter_mut().zip(rows) {
                sum.iter_mut().zip(rec.matrix.row(r)).for_each(|(s, a)| *s += a);
            }
        }
    }
    let n = samples.len() as f64;
    sums.into_iter()
        .zip(rows)
        .map(|(s, &r)| {
            ExplanationMap::new(
                features.to_vec(),
                cfg.lags,
                s.into_iter().map(|x| x / n).collect(),
                samples.len(),
                r,
            )
        })
        .collect()
}

/// Sample-averaged last row of the final cross-attention. Read-only on the
/// model.
pub fn extract_explanation(model: &DLFormer, samples: &[WindowSample], features: &[String]) -> Result<ExplanationMap> {
    let last = model.config().decoder_len() - 1;
    Ok(averaged_rows(model, samples, features, &[last])?.remove(0))
}

/// One map per forecast step, for the final `T` decoder rows in order.
pub fn per_horizon_explanations(
    model: &DLFormer,
    samples: &[WindowSample],
    features: &[String],
) -> Result<Vec<ExplanationMap>> {
    let cfg = model.config();
    let rows: Vec<usize> = (cfg.reference..cfg.decoder_len()).collect();
    averaged_rows(model, samples, features, &rows)
}
