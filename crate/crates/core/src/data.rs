//! Loading, splitting, normalizing and windowing multivariate series.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("no column named '{name}' (available: {available})")]
    MissingColumn { name: String, available: String },
    #[error("duplicate column name '{0}'")]
    DuplicateColumn(String),
    #[error("row {row}, column '{column}': non-numeric value '{value}'")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: expected {expected} cells, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("table has no usable rows")]
    Empty,
    #[error("split ratios {0:?} must be positive and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("{part} split has {len} rows, needs at least {required} (L + T)")]
    DegenerateSplit {
        part: &'static str,
        len: usize,
        required: usize,
    },
    #[error("series has {len} rows, windowing needs at least {required}")]
    TooShort { len: usize, required: usize },
    #[error("invalid window shape: {0}")]
    InvalidWindow(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Named multivariate series in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    feature_names: Vec<String>,
    target: usize,
    values: Vec<f64>,
    timestamps: Option<Vec<String>>,
}

impl SeriesTable {
    pub fn new(
        feature_names: Vec<String>,
        target_name: &str,
        rows: Vec<Vec<f64>>,
        timestamps: Option<Vec<String>>,
    ) -> Result<Self> {
        if feature_names.is_empty() {
            return Err(DataError::Empty);
        }
        for (i, n) in feature_names.iter().enumerate() {
            if feature_names[..i].contains(n) {
                return Err(DataError::DuplicateColumn(n.clone()));
            }
        }
        let target = feature_names
            .iter()
            .position(|n| n == target_name)
            .ok_or_else(|| DataError::MissingColumn {
                name: target_name.to_string(),
                available: feature_names.join(", "),
            })?;
        let k = feature_names.len();
        let mut values = Vec::with_capacity(rows.len() * k);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(DataError::Ragged {
                    row: i + 1,
                    expected: k,
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        if let Some(ts) = &timestamps {
            if ts.len() != rows.len() {
                return Err(DataError::Ragged {
                    row: ts.len().min(rows.len()) + 1,
                    expected: rows.len(),
                    found: ts.len(),
                });
            }
        }
        Ok(Self {
            feature_names,
            target,
            values,
            timestamps,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_name(&self) -> &str {
        &self.feature_names[self.target]
    }

    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.feature_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let k = self.num_features();
        &self.values[t * k..(t + 1) * k]
    }

    pub fn value(&self, t: usize, feature: usize) -> f64 {
        self.values[t * self.num_features() + feature]
    }

    pub fn column(&self, feature: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.value(t, feature)).collect()
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    /// Contiguous rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> SeriesTable {
        let k = self.num_features();
        SeriesTable {
            feature_names: self.feature_names.clone(),
            target: self.target,
            values: self.values[start * k..end * k].to_vec(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
        }
    }

    fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> SeriesTable {
        let k = self.num_features();
        let mut out = self.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = f(i % k, *v);
        }
        out
    }
}

/// Options controlling how raw CSV cells are interpreted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Numeric values that mark a missing observation.
    pub sentinels: Vec<f64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            sentinels: vec![-200.0],
        }
    }
}

const TIMESTAMP_HEADERS: [&str; 5] = ["date", "time", "timestamp", "datetime", "ds"];

fn is_missing_literal(cell: &str) -> bool {
    cell.is_empty() || matches!(cell.to_ascii_lowercase().as_str(), "nan" | "na" | "null" | "n/a")
}

/// Reads a CSV file with a header row. A leading non-numeric column is kept
/// as timestamp labels; rows holding sentinel or non-finite values are
/// dropped.
pub fn load_csv(path: impl AsRef<Path>, target_name: &str, opts: &LoadOptions) -> Result<SeriesTable> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    parse_csv(&text, target_name, opts)
}

/// Same as [`load_csv`] over in-memory text.
pub fn parse_csv(text: &str, target_name: &str, opts: &LoadOptions) -> Result<SeriesTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    if headers.is_empty() {
        return Err(DataError::Empty);
    }

    let first_is_time = TIMESTAMP_HEADERS.contains(&headers[0].to_ascii_lowercase().as_str())
        || records.first().is_some_and(|r| {
            let c = r.get(0).unwrap_or("");
            !is_missing_literal(c) && c.parse::<f64>().is_err()
        });
    let offset = usize::from(first_is_time);
    let names: Vec<String> = headers[offset..].to_vec();
    if !names.iter().any(|n| n == target_name) {
        return Err(DataError::MissingColumn {
            name: target_name.to_string(),
            available: names.join(", "),
        });
    }

    let mut rows = Vec::with_capacity(records.len());
    let mut stamps = Vec::new();
    let mut dropped = 0usize;
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != headers.len() {
            return Err(DataError::Ragged {
                row: i + 1,
                expected: headers.len(),
                found: rec.len(),
            });
        }
        let mut row = Vec::with_capacity(names.len());
        let mut missing = false;
        for (j, cell) in rec.iter().enumerate().skip(offset) {
            if is_missing_literal(cell) {
                missing = true;
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                row: i + 1,
                column: headers[j].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() || opts.sentinels.contains(&v) {
                missing = true;
            }
            row.push(v);
        }
        if missing {
            dropped += 1;
            continue;
        }
        if first_is_time {
            stamps.push(rec.get(0).unwrap_or("").to_string());
        }
        rows.push(row);
    }
    if dropped > 0 {
        log::info!("dropped {dropped} rows with missing or sentinel values");
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    SeriesTable::new(names, target_name, rows, first_is_time.then_some(stamps))
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalizer {
    /// Fits on `table`. Features with zero spread keep a unit scale.
    pub fn fit(table: &SeriesTable) -> Self {
        let n = table.len() as f64;
        let k = table.num_features();
        let mut means = vec![0.0; k];
        let mut stds = vec![0.0; k];
        for j in 0..k {
            let col = table.column(j);
            let mu = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            means[j] = mu;
            stds[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { means, stds }
    }

    pub fn identity(k: usize) -> Self {
        Self {
            means: vec![0.0; k],
            stds: vec![1.0; k],
        }
    }

    pub fn apply(&self, table: &SeriesTable) -> SeriesTable {
        table.map_values(|j, v| (v - self.means[j]) / self.stds[j])
    }

    pub fn invert(&self, table: &SeriesTable) -> SeriesTable {
        table.map_values(|j, v| v * self.stds[j] + self.means[j])
    }

    pub fn invert_value(&self, feature: usize, v: f64) -> f64 {
        v * self.stds[feature] + self.means[feature]
    }

    pub fn apply_value(&self, feature: usize, v: f64) -> f64 {
        (v - self.means[feature]) / self.stds[feature]
    }
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.2, 0.2];

/// Split sizes: validation and test take `floor(len·ratio)`, training gets the
/// rest.
pub fn split_sizes(len: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|&r| r <= 0.0 || !r.is_finite())
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DataError::InvalidRatios(ratios));
    }
    if len < 3 {
        return Err(DataError::TooShort { len, required: 3 });
    }
    let part = |r: f64| (len as f64 * r + 1e-9).floor() as usize;
    let (valid, test) = (part(ratios[1]), part(ratios[2]));
    Ok([len - valid - test, valid, test])
}

/// Contiguous train/validation/test partitions in time order. Every part must
/// hold at least `min_len` rows.
pub fn chronological_split(
    table: &SeriesTable,
    ratios: [f64; 3],
    min_len: usize,
) -> Result<(SeriesTable, SeriesTable, SeriesTable)> {
    let [a, b, c] = split_sizes(table.len(), ratios)?;
    for (part, len) in [("train", a), ("valid", b), ("test", c)] {
        if len < min_len {
            return Err(DataError::DegenerateSplit {
                part,
                len,
                required: min_len,
            });
        }
    }
    Ok((
        table.slice(0, a),
        table.slice(a, a + b),
        table.slice(a + b, a + b + c),
    ))
}

/// Normalized train/valid/test tables plus the normalizer fitted on train.
#[derive(Clone, Debug)]
pub struct PreparedSplits {
    pub train: SeriesTable,
    pub valid: SeriesTable,
    pub test: SeriesTable,
    pub normalizer: Normalizer,
}

/// Splits chronologically, then z-scores all parts with train statistics.
/// With `normalize` off the identity normalizer is used.
pub fn prepare_splits(
    table: &SeriesTable,
    ratios: [f64; 3],
    min_len: usize,
    normalize: bool,
) -> Result<PreparedSplits> {
    let (train, valid, test) = chronological_split(table, ratios, min_len)?;
    let normalizer = if normalize {
        Normalizer::fit(&train)
    } else {
        Normalizer::identity(table.num_features())
    };
    Ok(PreparedSplits {
        train: normalizer.apply(&train),
        valid: normalizer.apply(&valid),
        test: normalizer.apply(&test),
        normalizer,
    })
}

/// Window geometry: `lags` inputs per feature, `horizon` targets, `reference`
/// known target values fed to the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lags: usize,
    pub horizon: usize,
    pub reference: usize,
}

impl WindowSpec {
    pub fn new(lags: usize, horizon: usize, reference: usize) -> Result<Self> {
        let spec = Self {
            lags,
            horizon,
            reference,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lags == 0 || self.horizon == 0 {
            return Err(DataError::InvalidWindow("L and T must be at least 1".into()));
        }
        if self.reference == 0 || self.reference > self.lags {
            return Err(DataError::InvalidWindow(format!(
                "reference length r={} must satisfy 1 <= r <= L={}",
                self.reference, self.lags
            )));
        }
        Ok(())
    }

    pub fn min_rows(&self) -> usize {
        self.lags + self.horizon
    }
}

/// One model input/target instance anchored at row `anchor` (0-based index of
/// the newest input time).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub features: usize,
    pub lags: usize,
    /// `features × lags`, row-major, oldest lag first.
    pub x: Vec<f64>,
    pub y_ref: Vec<f64>,
    /// Next `horizon` target values; empty for pure inference windows.
    pub y: Vec<f64>,
    pub anchor: usize,
}

impl WindowSample {
    pub fn feature_lags(&self, j: usize) -> &[f64] {
        &self.x[j * self.lags..(j + 1) * self.lags]
    }
}

fn window_at(table: &SeriesTable, spec: &WindowSpec, anchor: usize, with_target: bool) -> WindowSample {
    let k = table.num_features();
    let start = anchor + 1 - spec.lags;
    let mut x = Vec::with_capacity(k * spec.lags);
    for j in 0..k {
        x.extend((start..=anchor).map(|t| table.value(t, j)));
    }
    let tgt = table.target_index();
    let y_ref = (anchor + 1 - spec.reference..=anchor)
        .map(|t| table.value(t, tgt))
        .collect();
    let y = if with_target {
        (anchor + 1..=anchor + spec.horizon)
            .map(|t| table.value(t, tgt))
            .collect()
    } else {
        Vec::new()
    };
    WindowSample {
        features: k,
        lags: spec.lags,
        x,
        y_ref,
        y,
        anchor,
    }
}

/// All windows of `table`, one per anchor; `len − L − T + 1` in total.
pub fn make_windows(table: &SeriesTable, spec: &WindowSpec) -> Result<Vec<WindowSample>> {
    spec.validate()?;
    let m = table.len();
    if m < spec.min_rows() {
        return Err(DataError::TooShort {
            len: m,
            required: spec.min_rows(),
        });
    }
    Ok((spec.lags - 1..=m - 1 - spec.horizon)
        .map(|anchor| window_at(table, spec, anchor, true))
        .collect())
}

/// Window over the last `L` rows with no known future, for forecasting past
/// the end of the table.
pub fn latest_window(table: &SeriesTable, spec: &WindowSpec) -> Result<WindowSample> {
    spec.validate()?;
    if table.len() < spec.lags {
        return Err(DataError::TooShort {
            len: table.len(),
            required: spec.lags,
        });
    }
    Ok(window_at(table, spec, table.len() - 1, false))
}
