//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "DLFCKPT\0"
//! version   u32
//! hlen      u64      length of the JSON header
//! header    hlen bytes of UTF-8 JSON
//! payload   f64 LE values, tensors back to back in directory order
//! ```
//!
//! The header holds the model config, column names, normalizer, training
//! metadata and a directory of `{name, shape, offset}` entries where `offset`
//! counts f64 values from the start of the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::Normalizer;
use crate::model::{DLFormer, ModelConfig, ModelError};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"DLFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match data: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Identifies the run that produced an artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            version: ARTIFACT_VERSION.to_string(),
        }
    }

    /// `#`-prefixed comment line for the top of text outputs.
    pub fn comment_line(&self) -> String {
        format!(
            "# dlformer {} config_hash={} seed={}",
            self.version, self.config_hash, self.seed
        )
    }
}

/// First 16 hex digits of SHA-256 over the config and column layout.
pub fn config_hash(config: &ModelConfig, feature_names: &[String], target: &str) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        config: &'a ModelConfig,
        features: &'a [String],
        target: &'a str,
    }
    let bytes = serde_json::to_vec(&Key {
        config,
        features: feature_names,
        target,
    })
    .expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub best_valid_mse: Option<f64>,
    pub seed: u64,
    /// Free-form extras such as the training config or data path.
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    feature_names: Vec<String>,
    target: String,
    normalizer: Normalizer,
    meta: TrainingMeta,
    config_hash: String,
    artifact_version: String,
    tensors: Vec<DirEntry>,
}

/// A trained model together with everything needed to run it on raw data.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DLFormer,
    pub feature_names: Vec<String>,
    pub target: String,
    pub normalizer: Normalizer,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(self.model.config(), &self.feature_names, &self.target)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.config_hash(), self.meta.seed)
    }

    /// Checks that a dataset has the columns this model was trained on.
    pub fn check_columns(&self, feature_names: &[String], target: &str) -> Result<()> {
        if feature_names != self.feature_names.as_slice() || target != self.target {
            return Err(CheckpointError::Mismatch(format!(
                "model expects columns [{}] with target {}, data has [{}] with target {} (config {})",
                self.feature_names.join(", "),
                self.target,
                feature_names.join(", "),
                target,
                self.config_hash()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (_, name, p) in self.model.params().iter() {
            tensors.push(DirEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += p.value.numel();
        }
        let header = Header {
            config: self.model.config().clone(),
            feature_names: self.feature_names.clone(),
            target: self.target.clone(),
            normalizer: self.normalizer.clone(),
            meta: self.meta.clone(),
            config_hash: self.config_hash(),
            artifact_version: ARTIFACT_VERSION.to_string(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, p) in self.model.params().iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let hlen = usize::try_from(u64::from_le_bytes(u64b))
            .map_err(|_| CheckpointError::Corrupt("header length overflows".into()))?;
        if hlen > r.len() {
            return Err(CheckpointError::Corrupt("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..hlen])?;
        let payload = &r[hlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(CheckpointError::Corrupt("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut store = ParamStore::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {} runs past the payload", e.name)))?;
            let t = Tensor::new(e.shape.clone(), data.to_vec())
                .map_err(|err| CheckpointError::Corrupt(format!("tensor {}: {err}", e.name)))?;
            store.add(e.name.clone(), t);
        }
        let model = DLFormer::from_params(header.config, store)?;
        let ckpt = Checkpoint {
            model,
            feature_names: header.feature_names,
            target: header.target,
            normalizer: header.normalizer,
            meta: header.meta,
        };
        if ckpt.config_hash() != header.config_hash {
            return Err(CheckpointError::Corrupt(format!(
                "stored config hash {} does not match contents {}",
                header.config_hash,
                ckpt.config_hash()
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::new(2, 3, 2).with_embed(8).with_heads(2, 4).with_blocks(1, 1);
        Checkpoint {
            model: DLFormer::new(cfg, 3).unwrap(),
            feature_names: vec!["a".into(), "y".into()],
            target: "y".into(),
            normalizer: Normalizer::identity(2),
            meta: TrainingMeta {
                epoch: 4,
                best_valid_mse: Some(0.25),
                seed: 3,
                extra: Default::default(),
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.model.params(), c.model.params());
        assert_eq!(back.model.config(), c.model.config());
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.config_hash(), c.config_hash());
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn rejects_bad_input() {
        let c = sample();
        let mut bytes = c.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 9 })
        ));
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn hash_tracks_config_and_columns() {
        let c = sample();
        let h = c.config_hash();
        assert_eq!(h.len(), 16);
        let other = config_hash(c.model.config(), &["b".into(), "y".into()], "y");
        assert_ne!(h, other);
        assert!(c.check_columns(&["a".into(), "y".into()], "y").is_ok());
        assert!(c.check_columns(&["a".into(), "b".into(), "y".into()], "y").is_err());
    }
}
