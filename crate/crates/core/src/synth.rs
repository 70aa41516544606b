//! Seeded synthetic series with known ground truth.
//!
//! Spec strings look like `lagged-copy(j=2,tau=3,sigma=0.01)`,
//! `sinusoid(components=3,sigma=0.05)` or `random-walk(sigma=1)`. Feature
//! columns are named `x1 … x{k-1}` and the target column is `y`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SeriesTable;

pub const TARGET_COLUMN: &str = "y";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec {spec:?}: {reason}")]
    Spec { spec: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    /// `y_s = x^{(j)}_{s−τ} + ε`, features iid standard normal.
    LaggedCopy { j: usize, tau: usize, sigma: f64 },
    /// Each feature is a sum of sinusoids with random period and phase; the
    /// target is a fixed random mixture of the features plus noise.
    Sinusoid { components: usize, sigma: f64 },
    /// Independent Gaussian random walks; the target is one more walk.
    RandomWalk { sigma: f64 },
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::LaggedCopy { j, tau, sigma } => write!(f, "lagged-copy(j={j},tau={tau},sigma={sigma})"),
            Generator::Sinusoid { components, sigma } => {
                write!(f, "sinusoid(components={components},sigma={sigma})")
            }
            Generator::RandomWalk { sigma } => write!(f, "random-walk(sigma={sigma})"),
        }
    }
}

impl FromStr for Generator {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        let err = |reason: String| SynthError::Spec {
            spec: s.to_string(),
            reason,
        };
        let s_trim = s.trim();
        let (name, args) = match s_trim.find('(') {
            Some(open) => {
                let close = s_trim
                    .strip_suffix(')')
                    .ok_or_else(|| err("missing closing parenthesis".into()))?;
                (&s_trim[..open], &close[open + 1..])
            }
            None => (s_trim, ""),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        for part in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| err(format!("argument {part:?} is not key=value")))?;
            pairs.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
        }
        let mut take = |key: &str, aliases: &[&str]| -> Option<String> {
            let pos = pairs
                .iter()
                .position(|(k, _)| k == key || aliases.contains(&k.as_str()))?;
            Some(pairs.remove(pos).1)
        };
        let num = |v: Option<String>, key: &str, default: Option<f64>| -> Result<f64> {
            match v {
                Some(v) => v
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite() && *x >= 0.0)
                    .ok_or_else(|| err(format!("{key} must be a nonnegative number, got {v:?}"))),
                None => default.ok_or_else(|| err(format!("missing argument {key}"))),
            }
        };
        let int = |v: Option<String>, key: &str, default: Option<usize>| -> Result<usize> {
            match v {
                Some(v) => v
                    .parse::<usize>()
                    .ok()
                    .filter(|&x| x > 0)
                    .ok_or_else(|| err(format!("{key} must be a positive integer, got {v:?}"))),
                None => default.ok_or_else(|| err(format!("missing argument {key}"))),
            }
        };
        let g = match name.trim().to_ascii_lowercase().as_str() {
            "lagged-copy" | "lagged_copy" => Generator::LaggedCopy {
                j: int(take("j", &[]), "j", None)?,
                tau: int(take("tau", &["τ"]), "tau", None)?,
                sigma: num(take("sigma", &["noise", "σ"]), "sigma", Some(0.01))?,
            },
            "sinusoid" | "sinusoid-mixture" => Generator::Sinusoid {
                components: int(take("components", &[]), "components", Some(3))?,
                sigma: num(take("sigma", &["noise"]), "sigma", Some(0.05))?,
            },
            "random-walk" | "random_walk" => Generator::RandomWalk {
                sigma: num(take("sigma", &["step"]), "sigma", Some(1.0))?,
            },
            other => return Err(err(format!("unknown generator {other:?}"))),
        };
        if let Some((k, _)) = pairs.first() {
            return Err(err(format!("unknown argument {k:?}")));
        }
        Ok(g)
    }
}

/// Ground truth recorded next to a generated file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub generator: Generator,
    pub spec: String,
    pub rows: usize,
    pub features: usize,
    pub seed: u64,
    pub columns: Vec<String>,
    pub target: String,
    /// Name of the copied feature, for lagged-copy data.
    pub source_feature: Option<String>,
    /// 0-based index of the copied feature, for lagged-copy data.
    pub source_index: Option<usize>,
    pub tau: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub table: SeriesTable,
    pub meta: SynthMeta,
}

pub fn column_names(features: usize) -> Vec<String> {
    (1..features)
        .map(|i| format!("x{i}"))
        .chain(std::iter::once(TARGET_COLUMN.to_string()))
        .collect()
}

/// Generates `rows` rows of `features` columns (target included).
pub fn generate(generator: &Generator, rows: usize, features: usize, seed: u64) -> Result<SynthData> {
    let spec_err = |reason: String| SynthError::Spec {
        spec: generator.to_string(),
        reason,
    };
    if features < 2 {
        return Err(spec_err("need at least one feature besides the target".into()));
    }
    if rows == 0 {
        return Err(spec_err("rows must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = features;
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(rows); k];
    let (mut source_index, mut tau_out) = (None, None);
    match *generator {
        Generator::LaggedCopy { j, tau, sigma } => {
            if j == 0 || j >= k {
                return Err(spec_err(format!("j must be in 1..={}", k - 1)));
            }
            if tau >= rows {
                return Err(spec_err("tau must be shorter than the series".into()));
            }
            for c in cols.iter_mut().take(k - 1) {
                c.extend((0..rows).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)));
            }
            let noise = Normal::new(0.0, sigma).map_err(|e| spec_err(e.to_string()))?;
            let src = cols[j - 1].clone();
            let y = &mut cols[k - 1];
            for s in 0..rows {
                let eps = noise.sample(&mut rng);
                // the first tau rows have no source yet and are filled with noise
                let base = if s >= tau { src[s - tau] } else { Distribution::<f64>::sample(&StandardNormal, &mut rng) };
                y.push(base + eps);
            }
            source_index = Some(j - 1);
            tau_out = Some(tau);
        }
        Generator::Sinusoid { components, sigma } => {
            let noise = Normal::new(0.0, sigma).map_err(|e| spec_err(e.to_string()))?;
            for c in cols.iter_mut().take(k - 1) {
                let waves: Vec<(f64, f64, f64)> = (0..components)
                    .map(|_| {
                        (
                            rng.random_range(0.2..1.0),
                            rng.random_range(6.0..96.0),
                            rng.random_range(0.0..std::f64::consts::TAU),
                        )
                    })
                    .collect();
                for t in 0..rows {
                    let v: f64 = waves
                        .iter()
                        .map(|(a, p, ph)| a * (std::f64::consts::TAU * t as f64 / p + ph).sin())
                        .sum();
                    c.push(v + noise.sample(&mut rng));
                }
            }
            let mix: Vec<f64> = (0..k - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
            for t in 0..rows {
                let v: f64 = mix.iter().enumerate().map(|(i, w)| w * cols[i][t]).sum();
                let e = noise.sample(&mut rng);
                cols[k - 1].push(v + e);
            }
        }
        Generator::RandomWalk { sigma } => {
            let step = Normal::new(0.0, sigma).map_err(|e| spec_err(e.to_string()))?;
            for c in cols.iter_mut() {
                let mut x = 0.0;
                for _ in 0..rows {
                    x += step.sample(&mut rng);
                    c.push(x);
                }
            }
        }
    }
    let names = column_names(k);
    let table_rows: Vec<Vec<f64>> = (0..rows).map(|t| cols.iter().map(|c| c[t]).collect()).collect();
    let table = SeriesTable::new(names.clone(), TARGET_COLUMN, table_rows, None)
        .map_err(|e| spec_err(e.to_string()))?;
    let meta = SynthMeta {
        generator: generator.clone(),
        spec: generator.to_string(),
        rows,
        features: k,
        seed,
        target: TARGET_COLUMN.to_string(),
        source_feature: source_index.map(|i| names[i].clone()),
        columns: names,
        source_index,
        tau: tau_out,
    };
    Ok(SynthData { table, meta })
}

/// `data.csv` → `data.meta.json`
pub fn meta_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("meta.json")
}

/// Writes the CSV (with a leading `time` index column) and its metadata
/// sidecar.
pub fn write(data: &SynthData, csv_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header = vec!["time".to_string()];
    header.extend(data.table.feature_names().iter().cloned());
    w.write_record(&header)?;
    for t in 0..data.table.len() {
        let mut rec = vec![t.to_string()];
        rec.extend(data.table.row(t).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let meta = serde_json::to_string_pretty(&data.meta)?;
    std::fs::write(meta_path(csv_path), meta + "\n")?;
    Ok(())
}

pub fn read_meta(csv_path: &Path) -> Result<SynthMeta> {
    let text = std::fs::read_to_string(meta_path(csv_path))?;
    Ok(serde_json::from_str(&text)?)
}
