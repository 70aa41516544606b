//! Encoder/decoder stacks and the full forecaster.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    causal_mask, icmh, imh, AttentionKind, AttentionRecord, BlockRef, ImhParams, Stack,
};
use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::{WindowSample, WindowSpec};
use crate::embedding::{decoder_embed, dle, dle_positions, spe, ValueProjection};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample does not match model: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn default_period() -> f64 {
    10_000.0
}

fn default_true() -> bool {
    true
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of input features `k` (target included).
    pub features: usize,
    /// Distributed lag size `L`.
    pub lags: usize,
    /// Forecast horizon `T`.
    pub horizon: usize,
    /// Reference length `r`.
    pub reference: usize,
    pub d_embed: usize,
    pub d_attn: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub d_ff: usize,
    pub d_head: usize,
    #[serde(default = "default_period")]
    pub period: f64,
    /// ReLU after the value projections of both embeddings.
    #[serde(default = "default_true")]
    pub embed_relu: bool,
    /// Post-residual layer normalization in every block.
    #[serde(default)]
    pub layer_norm: bool,
    /// Causal mask on decoder self-attention.
    #[serde(default)]
    pub causal_mask: bool,
}

impl ModelConfig {
    /// Defaults for `k` features, `L` lags and horizon `T`, with `r = T`.
    pub fn new(features: usize, lags: usize, horizon: usize) -> Self {
        let d_embed = 128;
        Self {
            features,
            lags,
            horizon,
            reference: horizon,
            d_embed,
            d_attn: 16,
            heads: 8,
            encoder_blocks: 6,
            decoder_blocks: 6,
            d_ff: 4 * d_embed,
            d_head: d_embed / 2,
            period: default_period(),
            embed_relu: true,
            layer_norm: false,
            causal_mask: false,
        }
    }

    /// Sets `d_E` and the widths derived from it.
    pub fn with_embed(mut self, d_embed: usize) -> Self {
        self.d_embed = d_embed;
        self.d_ff = 4 * d_embed;
        self.d_head = (d_embed / 2).max(1);
        self
    }

    pub fn with_blocks(mut self, encoder: usize, decoder: usize) -> Self {
        self.encoder_blocks = encoder;
        self.decoder_blocks = decoder;
        self
    }

    pub fn with_heads(mut self, heads: usize, d_attn: usize) -> Self {
        self.heads = heads;
        self.d_attn = d_attn;
        self
    }

    pub fn with_reference(mut self, reference: usize) -> Self {
        self.reference = reference;
        self
    }

    pub fn p_global(&self) -> usize {
        self.features * self.lags
    }

    pub fn decoder_len(&self) -> usize {
        self.horizon + self.reference
    }

    pub fn window(&self) -> WindowSpec {
        WindowSpec {
            lags: self.lags,
            horizon: self.horizon,
            reference: self.reference,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("features", self.features),
            ("lags", self.lags),
            ("horizon", self.horizon),
            ("reference", self.reference),
            ("d_embed", self.d_embed),
            ("d_attn", self.d_attn),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("d_head", self.d_head),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_embed.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "d_embed must be even, got {}",
                self.d_embed
            )));
        }
        if self.reference > self.lags {
            return Err(ModelError::Config(format!(
                "reference {} exceeds lags {}",
                self.reference, self.lags
            )));
        }
        if !(self.period > 1.0) {
            return Err(ModelError::Config(format!(
                "period must exceed 1, got {}",
                self.period
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PwffParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: ImhParams,
    pub ffn: PwffParams,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: ImhParams,
    pub cross_attn: ImhParams,
    pub ffn: PwffParams,
}

/// Two affine maps `d_E → d_head → 1` with ReLU between.
#[derive(Clone, Debug)]
pub struct OutputHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub enc_embed: ValueProjection,
    pub dec_embed: ValueProjection,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    pub head: OutputHead,
}

enum Init<'a> {
    Zeros,
    Xavier(&'a mut ChaCha8Rng),
}

impl Init<'_> {
    fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(&[rows, cols]),
            Init::Xavier(rng) => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::new(vec![rows, cols], data).expect("matrix shape")
            }
        }
    }
}

fn build_layout(cfg: &ModelConfig, store: &mut ParamStore, init: &mut Init) -> Layout {
    let (de, da, dff) = (cfg.d_embed, cfg.d_attn, cfg.d_ff);
    let projection = |store: &mut ParamStore, init: &mut Init, name: &str| ValueProjection {
        weight: store.add(format!("{name}.weight"), init.matrix(1, de)),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[de])),
    };
    let enc_embed = projection(store, init, "enc_embed");
    let dec_embed = projection(store, init, "dec_embed");

    let attn = |store: &mut ParamStore, init: &mut Init, name: &str| ImhParams {
        wq: (0..cfg.heads)
            .map(|i| store.add(format!("{name}.wq.{i}"), init.matrix(de, da)))
            .collect(),
        wk: (0..cfg.heads)
            .map(|i| store.add(format!("{name}.wk.{i}"), init.matrix(de, da)))
            .collect(),
        wv: store.add(format!("{name}.wv"), init.matrix(de, da)),
        wh: store.add(format!("{name}.wh"), init.matrix(da, de)),
    };
    let ffn = |store: &mut ParamStore, init: &mut Init, name: &str| PwffParams {
        w1: store.add(format!("{name}.w1"), init.matrix(de, dff)),
        b1: store.add(format!("{name}.b1"), Tensor::zeros(&[dff])),
        w2: store.add(format!("{name}.w2"), init.matrix(dff, de)),
        b2: store.add(format!("{name}.b2"), Tensor::zeros(&[de])),
    };

    let encoder = (0..cfg.encoder_blocks)
        .map(|l| EncoderBlock {
            attn: attn(store, init, &format!("enc.{l}.attn")),
            ffn: ffn(store, init, &format!("enc.{l}.ffn")),
        })
        .collect();
    let decoder = (0..cfg.decoder_blocks)
        .map(|l| DecoderBlock {
            self_attn: attn(store, init, &format!("dec.{l}.self")),
            cross_attn: attn(store, init, &format!("dec.{l}.cross")),
            ffn: ffn(store, init, &format!("dec.{l}.ffn")),
        })
        .collect();
    let head = OutputHead {
        w1: store.add("head.w1", init.matrix(de, cfg.d_head)),
        b1: store.add("head.b1", Tensor::zeros(&[cfg.d_head])),
        w2: store.add("head.w2", init.matrix(cfg.d_head, 1)),
        b2: store.add("head.b2", Tensor::zeros(&[1])),
    };
    Layout {
        enc_embed,
        dec_embed,
        encoder,
        decoder,
        head,
    }
}

/// Position-wise feed-forward: `relu(x W₁ + b₁) W₂ + b₂` on every row.
pub fn pwff(tape: &mut Tape, bound: &Bound, p: &PwffParams, x: Var) -> Result<Var> {
    let h = tape.matmul(x, bound[p.w1])?;
    let h = tape.add(h, bound[p.b1])?;
    let h = tape.relu(h);
    let o = tape.matmul(h, bound[p.w2])?;
    Ok(tape.add(o, bound[p.b2])?)
}

fn residual(tape: &mut Tape, sub: Var, input: Var, layer_norm: bool) -> Result<Var> {
    let s = tape.add(sub, input)?;
    Ok(if layer_norm { tape.layer_norm(s, 1e-5) } else { s })
}

/// Encoder stack output and, when requested, each block's self-attention.
pub struct EncoderOutput {
    pub latent: Var,
    pub scores: Vec<Var>,
}

/// Runs `Z ← IMH(Z,Z,Z) + Z; Z ← PWFF(Z) + Z` for every block.
pub fn encoder_forward(
    tape: &mut Tape,
    bound: &Bound,
    blocks: &[EncoderBlock],
    z0: Var,
    layer_norm: bool,
) -> Result<EncoderOutput> {
    let mut z = z0;
    let mut scores = Vec::with_capacity(blocks.len());
    for b in blocks {
        let a = imh(tape, bound, &b.attn, z, z, z, None)?;
        scores.push(a.scores);
        let z1 = residual(tape, a.output, z, layer_norm)?;
        let f = pwff(tape, bound, &b.ffn, z1)?;
        z = residual(tape, f, z1, layer_norm)?;
    }
    Ok(EncoderOutput { latent: z, scores })
}

/// Decoder input values: the `r` known targets followed by `T` zeros.
pub fn build_decoder_input(y_ref: &[f64], horizon: usize) -> Vec<f64> {
    let mut v = y_ref.to_vec();
    v.resize(y_ref.len() + horizon, 0.0);
    v
}

pub struct DecoderOutput {
    pub output: Var,
    pub self_scores: Vec<Var>,
    pub cross_scores: Vec<Var>,
}

impl DecoderOutput {
    /// `Ā` of the final block's cross-attention; `None` for an empty stack.
    pub fn last_cross(&self) -> Option<Var> {
        self.cross_scores.last().copied()
    }
}

/// Runs self-IMH, cross-IMH over the encoder latent, and PWFF, each with a
/// residual, for every decoder block.
pub fn decoder_forward(
    tape: &mut Tape,
    bound: &Bound,
    blocks: &[DecoderBlock],
    s0: Var,
    latent: Var,
    cfg: &ModelConfig,
) -> Result<DecoderOutput> {
    let mask = if cfg.causal_mask {
        let n = tape.shape(s0)[1];
        Some(tape.constant(causal_mask(n)))
    } else {
        None
    };
    let mut s = s0;
    let mut self_scores = Vec::with_capacity(blocks.len());
    let mut cross_scores = Vec::with_capacity(blocks.len());
    for b in blocks {
        let a = imh(tape, bound, &b.self_attn, s, s, s, mask)?;
        self_scores.push(a.scores);
        let s1 = residual(tape, a.output, s, cfg.layer_norm)?;
        let c = icmh(tape, bound, &b.cross_attn, s1, latent, cfg.p_global())?;
        cross_scores.push(c.scores);
        let s2 = residual(tape, c.output, s1, cfg.layer_norm)?;
        let f = pwff(tape, bound, &b.ffn, s2)?;
        s = residual(tape, f, s2, cfg.layer_norm)?;
    }
    Ok(DecoderOutput {
        output: s,
        self_scores,
        cross_scores,
    })
}

/// Handles produced by one batched forward pass.
pub struct ForwardVars {
    /// `[B, T, 1]` forecasts on the horizon positions.
    pub prediction: Var,
    /// `[B, T+r, 1]` head output on every decoder position.
    pub all_positions: Var,
    pub encoder: EncoderOutput,
    pub decoder: DecoderOutput,
}

/// Values of a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub predictions: Vec<Vec<f64>>,
    /// Last decoder block's cross-attention per sample; empty when the model
    /// has no decoder blocks.
    pub last_cross: Vec<AttentionRecord>,
    /// Every attention matrix per sample, filled only with diagnostics on.
    pub all_records: Vec<Vec<AttentionRecord>>,
}

/// The distributed-lag transformer forecaster.
#[derive(Clone, Debug)]
pub struct DLFormer {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    enc_positions: Tensor,
    dec_positions: Tensor,
}

impl DLFormer {
    /// Xavier-uniform weights and zero biases from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, &mut Init::Xavier(&mut rng))
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, &mut Init::Zeros)
    }

    fn build(config: ModelConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, init);
        let enc_positions = dle_positions(config.features, config.lags, config.d_embed, config.period)?;
        let dec_positions = spe(config.decoder_len(), config.d_embed, config.period)?;
        Ok(Self {
            config,
            params,
            layout,
            enc_positions,
            dec_positions,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, stored: ParamStore) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        if stored.len() != model.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                stored.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let src = stored
                .find(&name)
                .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))?;
            let value = &stored.get(src).value;
            if value.shape() != model.params.get(id).value.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    value.shape(),
                    model.params.get(id).value.shape()
                )));
            }
            model.params.get_mut(id).value = value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder_blocks(&self) -> &[EncoderBlock] {
        &self.layout.encoder
    }

    pub fn decoder_blocks(&self) -> &[DecoderBlock] {
        &self.layout.decoder
    }

    pub fn output_head(&self) -> &OutputHead {
        &self.layout.head
    }

    pub fn encoder_projection(&self) -> &ValueProjection {
        &self.layout.enc_embed
    }

    pub fn decoder_projection(&self) -> &ValueProjection {
        &self.layout.dec_embed
    }

    pub fn encoder_positions(&self) -> &Tensor {
        &self.enc_positions
    }

    pub fn decoder_positions(&self) -> &Tensor {
        &self.dec_positions
    }

    fn check_sample(&self, s: &WindowSample) -> Result<()> {
        let c = &self.config;
        if s.features != c.features || s.lags != c.lags || s.x.len() != c.p_global() {
            return Err(ModelError::Shape(format!(
                "inputs are {}×{}, model expects {}×{}",
                s.features, s.lags, c.features, c.lags
            )));
        }
        if s.y_ref.len() != c.reference {
            return Err(ModelError::Shape(format!(
                "reference length {}, model expects {}",
                s.y_ref.len(),
                c.reference
            )));
        }
        Ok(())
    }

    /// `[B, p_G, 1]` distributed-lag inputs.
    pub fn encoder_input(&self, batch: &[&WindowSample]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(batch.len() * self.config.p_global());
        for s in batch {
            self.check_sample(s)?;
            data.extend_from_slice(&s.x);
        }
        Ok(Tensor::new(
            vec![batch.len(), self.config.p_global(), 1],
            data,
        )?)
    }

    /// `[B, T+r, 1]` decoder input values.
    pub fn decoder_input(&self, batch: &[&WindowSample]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(batch.len() * self.config.decoder_len());
        for s in batch {
            self.check_sample(s)?;
            data.extend(build_decoder_input(&s.y_ref, self.config.horizon));
        }
        Ok(Tensor::new(
            vec![batch.len(), self.config.decoder_len(), 1],
            data,
        )?)
    }

    /// Records the full forward pass for `batch` on `tape`.
    pub fn forward_vars(&self, tape: &mut Tape, bound: &Bound, batch: &[&WindowSample]) -> Result<ForwardVars> {
        let cfg = &self.config;
        let x = tape.constant(self.encoder_input(batch)?);
        let y_de = tape.constant(self.decoder_input(batch)?);
        let z0 = dle(
            tape,
            bound,
            &self.layout.enc_embed,
            x,
            &self.enc_positions,
            cfg.embed_relu,
        )?;
        let encoder = encoder_forward(tape, bound, &self.layout.encoder, z0, cfg.layer_norm)?;
        let s0 = decoder_embed(
            tape,
            bound,
            &self.layout.dec_embed,
            y_de,
            &self.dec_positions,
            cfg.embed_relu,
        )?;
        let decoder = decoder_forward(tape, bound, &self.layout.decoder, s0, encoder.latent, cfg)?;
        let head = &self.layout.head;
        let h = tape.matmul(decoder.output, bound[head.w1])?;
        let h = tape.add(h, bound[head.b1])?;
        let h = tape.relu(h);
        let o = tape.matmul(h, bound[head.w2])?;
        let all_positions = tape.add(o, bound[head.b2])?;
        let prediction = tape.slice(all_positions, 1, cfg.reference, cfg.horizon)?;
        Ok(ForwardVars {
            prediction,
            all_positions,
            encoder,
            decoder,
        })
    }

    /// Forward pass without gradients.
    pub fn forward_batch(&self, batch: &[&WindowSample], diagnostics: bool) -> Result<BatchForward> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let fv = self.forward_vars(&mut tape, &bound, batch)?;
        let t = self.config.horizon;
        let predictions = tape
            .value(fv.prediction)
            .data()
            .chunks(t)
            .map(<[f64]>::to_vec)
            .collect();
        let last_block = self.config.decoder_blocks.saturating_sub(1);
        let last_cross = fv
            .decoder
            .last_cross()
            .map(|v| {
                AttentionRecord::split_batch(
                    BlockRef {
                        stack: Stack::Decoder,
                        block: last_block,
                        kind: AttentionKind::Cross,
                    },
                    tape.value(v),
                )
            })
            .unwrap_or_default();
        let mut all_records = vec![Vec::new(); batch.len()];
        if diagnostics {
            let mut push = |source: BlockRef, v: Var| {
                for (i, r) in AttentionRecord::split_batch(source, tape.value(v))
                    .into_iter()
                    .enumerate()
                {
                    all_records[i].push(r);
                }
            };
            for (l, &v) in fv.encoder.scores.iter().enumerate() {
                push(
                    BlockRef {
                        stack: Stack::Encoder,
                        block: l,
                        kind: AttentionKind::SelfAttention,
                    },
                    v,
                );
            }
            for (l, (&sv, &cv)) in fv
                .decoder
                .self_scores
                .iter()
                .zip(&fv.decoder.cross_scores)
                .enumerate()
            {
                let at = |kind| BlockRef {
                    stack: Stack::Decoder,
                    block: l,
                    kind,
                };
                push(at(AttentionKind::SelfAttention), sv);
                push(at(AttentionKind::Cross), cv);
            }
        }
        Ok(BatchForward {
            predictions,
            last_cross,
            all_records,
        })
    }

    /// Forecast for one sample plus the last cross-attention record, if any.
    pub fn forward(&self, sample: &WindowSample) -> Result<(Vec<f64>, Option<AttentionRecord>)> {
        let mut out = self.forward_batch(&[sample], false)?;
        Ok((out.predictions.remove(0), out.last_cross.pop()))
    }

    /// Forecasts for many samples, evaluated in chunks of `batch_size`.
    pub fn predict(&self, samples: &[WindowSample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&WindowSample> = chunk.iter().collect();
            out.extend(self.forward_batch(&refs, false)?.predictions);
        }
        Ok(out)
    }

    /// Mean squared error of `batch` on the horizon positions, with the
    /// gradient of every parameter. Parameter gradient slots are untouched.
    pub fn loss_and_gradients(&self, batch: &[&WindowSample]) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let fv = self.forward_vars(&mut tape, &bound, batch)?;
        let mut target = Vec::with_capacity(batch.len() * self.config.horizon);
        for s in batch {
            if s.y.len() != self.config.horizon {
                return Err(ModelError::Shape(format!(
                    "target length {}, model horizon {}",
                    s.y.len(),
                    self.config.horizon
                )));
            }
            target.extend_from_slice(&s.y);
        }
        let y = tape.constant(Tensor::new(
            vec![batch.len(), self.config.horizon, 1],
            target,
        )?);
        let diff = tape.sub(fv.prediction, y)?;
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss)?;
        let per_param = self
            .params
            .ids()
            .map(|id| grads.get(bound[id]).map(<[f64]>::to_vec))
            .collect();
        Ok((tape.value(loss).data()[0], per_param))
    }
}
