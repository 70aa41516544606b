//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dlformer::data::DEFAULT_SPLIT;
use dlformer::model::ModelConfig;
use dlformer::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Every key accepted in a config file or through `--set`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub target: Option<String>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub normalize: bool,
    pub split: [f64; 3],

    pub lags: usize,
    pub horizon: usize,
    /// Defaults to `horizon`.
    pub reference: Option<usize>,
    pub d_embed: usize,
    pub d_attn: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Defaults to `4 · d_embed`.
    pub d_ff: Option<usize>,
    /// Defaults to `d_embed / 2`.
    pub d_head: Option<usize>,
    pub period: f64,
    pub embed_relu: bool,
    pub layer_norm: bool,
    pub causal_mask: bool,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Defaults to `min(50, max_epochs)`.
    pub patience: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub threads: usize,

    /// Split whose windows are averaged by `explain`.
    pub explain_split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1, 12, 1);
        let t = TrainConfig::default();
        Self {
            data: None,
            target: None,
            output_dir: PathBuf::from("runs"),
            seed: 0,
            normalize: true,
            split: DEFAULT_SPLIT,
            lags: m.lags,
            horizon: m.horizon,
            reference: None,
            d_embed: m.d_embed,
            d_attn: m.d_attn,
            heads: m.heads,
            encoder_blocks: m.encoder_blocks,
            decoder_blocks: m.decoder_blocks,
            d_ff: None,
            d_head: None,
            period: m.period,
            embed_relu: m.embed_relu,
            layer_norm: m.layer_norm,
            causal_mask: m.causal_mask,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: None,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            threads: t.threads,
            explain_split: "test".into(),
        }
    }
}

/// Parses the right-hand side of `--set key=value`. Anything that is not a
/// TOML literal is taken as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Reads `path` (if any) and applies `key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = table.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.explain_split.as_str(), "train" | "valid" | "test") {
            bail!("explain_split must be train, valid or test");
        }
        self.train_config().validate()?;
        self.model_config(1).validate()?;
        Ok(())
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| anyhow!("no data path: set `data` in the config or pass --data"))
    }

    pub fn target_name(&self) -> Result<&str> {
        self.target.as_deref().ok_or_else(|| anyhow!("no target column: set `target` in the config"))
    }

    pub fn model_config(&self, features: usize) -> ModelConfig {
        ModelConfig {
            features,
            lags: self.lags,
            horizon: self.horizon,
            reference: self.reference.unwrap_or(self.horizon),
            d_embed: self.d_embed,
            d_attn: self.d_attn,
            heads: self.heads,
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            d_ff: self.d_ff.unwrap_or(4 * self.d_embed),
            d_head: self.d_head.unwrap_or((self.d_embed / 2).max(1)),
            period: self.period,
            embed_relu: self.embed_relu,
            layer_norm: self.layer_norm,
            causal_mask: self.causal_mask,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience.unwrap_or(TrainConfig::default().patience.min(self.max_epochs)),
            seed: self.seed,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            threads: self.threads,
        }
    }
}
