//! Mini-batch MSE training with Adam and validation-based early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::WindowSample;
use crate::model::{DLFormer, ModelError};
use crate::params::ParamStore;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("length mismatch: {0} targets, {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Box<TrainOutcome>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn default_threads() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Worker threads for gradient evaluation within a batch.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            max_epochs: 200,
            patience: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.threads == 0 {
            return bad("batch_size, max_epochs, patience and threads must be positive");
        }
        if self.patience > self.max_epochs {
            return bad("patience must not exceed max_epochs");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// Mean squared error `(1/n) Σ (yᵢ − ŷᵢ)²`.
pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(TrainError::LengthMismatch(y.len(), y_hat.len()));
    }
    let sum: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / y.len() as f64)
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero. Nothing
/// is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (id, name, _) in params.iter() {
        if let Some(g) = &grads[id.index()] {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient { name: name.to_string() });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, _, p) in params.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        let i = id.index();
        let g = grads[i].as_deref();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Tracks the best validation loss and counts epochs without improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub const TOLERANCE: f64 = 1e-12;

    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = loss < self.best - Self::TOLERANCE;
        if improved {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// One line of the training log. Epochs are numbered from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub valid_mse: f64,
    pub is_best: bool,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_mse,valid_mse,is_best";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.train_mse, self.valid_mse, self.is_best as u8
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model holding the best-validation weights.
    pub model: DLFormer,
    pub best_epoch: usize,
    pub best_valid_mse: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Batch loss and gradients, split across `threads` workers. Chunk results are
/// combined in chunk order, so a fixed thread count gives reproducible sums.
pub fn batch_gradients(
    model: &DLFormer,
    batch: &[&WindowSample],
    threads: usize,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    if threads <= 1 || batch.len() < 2 {
        return Ok(model.loss_and_gradients(batch)?);
    }
    let chunk = batch.len().div_ceil(threads);
    let parts: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|c| s.spawn(move || (c.len(), model.loss_and_gradients(c))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let total = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
    for (n, part) in parts {
        let (l, g) = part?;
        let w = n as f64 / total;
        loss += w * l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            if let Some(gi) = gi {
                match acc {
                    Some(a) => a.iter_mut().zip(&gi).for_each(|(a, b)| *a += w * b),
                    None => *acc = Some(gi.iter().map(|b| w * b).collect()),
                }
            }
        }
    }
    Ok((loss, grads))
}

/// MSE of the model's forecasts over every horizon step of `samples`.
pub fn dataset_mse(model: &DLFormer, samples: &[WindowSample], batch_size: usize) -> Result<f64> {
    let preds = model.predict(samples, batch_size)?;
    let y: Vec<f64> = samples.iter().flat_map(|s| s.y.iter().copied()).collect();
    let y_hat: Vec<f64> = preds.into_iter().flatten().collect();
    mse(&y, &y_hat)
}

/// Trains `model` in place from its current weights. `on_epoch` sees every
/// epoch record as soon as it is complete.
pub fn train(
    model: DLFormer,
    train_set: &[WindowSample],
    valid_set: &[WindowSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if valid_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut outcome = TrainOutcome {
        model: model.clone(),
        best_epoch: 0,
        best_valid_mse: f64::INFINITY,
        history: Vec::new(),
        stopped_early: false,
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch, cfg.threads)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, format!("training loss is {loss}"), outcome));
            }
            if let Err(e) = adam_step(model.params_mut(), &grads, &mut adam, cfg) {
                return Err(diverged(epoch, e.to_string(), outcome));
            }
            weighted += loss * batch.len() as f64;
        }
        let train_mse = weighted / train_set.len() as f64;
        let valid_mse = dataset_mse(&model, valid_set, cfg.batch_size)?;
        if !valid_mse.is_finite() {
            return Err(diverged(epoch, format!("validation loss is {valid_mse}"), outcome));
        }
        let decision = stopper.observe(epoch, valid_mse);
        let record = EpochRecord {
            epoch,
            train_mse,
            valid_mse,
            is_best: decision.improved,
        };
        log::debug!("epoch {epoch} train {train_mse:.6e} valid {valid_mse:.6e}");
        on_epoch(&record);
        outcome.history.push(record);
        if decision.improved {
            outcome.model = model.clone();
            outcome.best_epoch = epoch;
            outcome.best_valid_mse = valid_mse;
        }
        if decision.stop {
            outcome.stopped_early = true;
            break;
        }
    }
    Ok(outcome)
}

fn diverged(epoch: usize, reason: String, last_good: TrainOutcome) -> TrainError {
    TrainError::Diverged {
        epoch,
        reason,
        last_good: Box::new(last_good),
    }
}
