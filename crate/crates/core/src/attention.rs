//! Scaled dot-product attention and its interpretable multi-head form.
//!
//! Interpretable multi-head attention (IMH) keeps a query and key map per
//! head but a single value map `W^V` shared by all heads. Head score matrices
//! are averaged into one row-stochastic matrix `Ā`, so
//!
//! ```text
//! Ā·(V W^V) = (1/h) Σᵢ Aᵢ·(V W^V)
//! ```
//!
//! and `Ā` can be read directly as position-to-position influence.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::params::{Bound, ParamId};

/// Weights of one IMH sublayer.
#[derive(Clone, Debug)]
pub struct ImhParams {
    /// One `d_E × d_A` query map per head.
    pub wq: Vec<ParamId>,
    /// One `d_E × d_A` key map per head.
    pub wk: Vec<ParamId>,
    /// Shared `d_E × d_A` value map.
    pub wv: ParamId,
    /// `d_A × d_E` output map.
    pub wh: ParamId,
}

impl ImhParams {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    SelfAttention,
    Cross,
}

/// Which sublayer an attention matrix came from (0-based block index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub stack: Stack,
    pub block: usize,
    pub kind: AttentionKind,
}

/// Head-averaged attention matrix `Ā` of one sample, `n_q × n_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub source: BlockRef,
    pub matrix: Tensor,
}

impl AttentionRecord {
    /// Splits a batched `[B, n_q, n_k]` score tensor into per-sample records.
    pub fn split_batch(source: BlockRef, scores: &Tensor) -> Vec<AttentionRecord> {
        let s = scores.shape();
        let (nq, nk) = (s[1], s[2]);
        scores
            .data()
            .chunks(nq * nk)
            .map(|c| AttentionRecord {
                source,
                matrix: Tensor::new(vec![nq, nk], c.to_vec()).expect("record shape"),
            })
            .collect()
    }

    pub fn last_row(&self) -> &[f64] {
        self.matrix.row(self.matrix.shape()[0] - 1)
    }
}

/// Result of an IMH call: output `[B, n_q, d_E]` and `Ā` `[B, n_q, n_k]`.
#[derive(Clone, Copy, Debug)]
pub struct ImhOutput {
    pub output: Var,
    pub scores: Var,
}

/// Additive causal mask: 0 where key ≤ query position, a large negative value
/// elsewhere.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = -1e9;
        }
    }
    Tensor::new(vec![n, n], data).expect("mask shape")
}

/// `softmax(Q Kᵀ / √d_A)` row-wise, with an optional additive mask.
pub fn scores(tape: &mut Tape, q: Var, k: Var, mask: Option<Var>) -> Result<Var, TensorError> {
    let d_attn = *tape.shape(q).last().unwrap();
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (d_attn as f64).sqrt());
    if let Some(m) = mask {
        logits = tape.add(logits, m)?;
    }
    tape.softmax_rows(logits)
}

/// One attention head: `scores(Q W^Q, K W^K) · (V W^V)`.
#[allow(clippy::too_many_arguments)]
pub fn single_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<Var, TensorError> {
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = tape.matmul(v, wv)?;
    let a = scores(tape, qp, kp, None)?;
    tape.matmul(a, vp)
}

/// Interpretable multi-head attention: `(Ā · V W^V) · W^H` where `Ā` is the
/// mean of the per-head score matrices.
pub fn imh(
    tape: &mut Tape,
    bound: &Bound,
    params: &ImhParams,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<ImhOutput, TensorError> {
    let heads = params.heads();
    let mut total: Option<Var> = None;
    for (&wq, &wk) in params.wq.iter().zip(&params.wk) {
        let qp = tape.matmul(q, bound[wq])?;
        let kp = tape.matmul(k, bound[wk])?;
        let a = scores(tape, qp, kp, mask)?;
        total = Some(match total {
            None => a,
            Some(t) => tape.add(t, a)?,
        });
    }
    let total = total.expect("at least one head");
    let abar = if heads == 1 {
        total
    } else {
        tape.scale(total, 1.0 / heads as f64)
    };
    let vp = tape.matmul(v, bound[params.wv])?;
    let hbar = tape.matmul(abar, vp)?;
    let output = tape.matmul(hbar, bound[params.wh])?;
    Ok(ImhOutput {
        output,
        scores: abar,
    })
}

/// Cross form of IMH: queries from the decoder stream, keys and values from
/// the encoder latent `z_enc: [B, p_G, d_E]`.
pub fn icmh(
    tape: &mut Tape,
    bound: &Bound,
    params: &ImhParams,
    q_dec: Var,
    z_enc: Var,
    expected_keys: usize,
) -> Result<ImhOutput, TensorError> {
    let zs = tape.shape(z_enc).to_vec();
    if zs.len() != 3 || zs[1] != expected_keys {
        return Err(TensorError::ShapeMismatch {
            op: "icmh",
            lhs: tape.shape(q_dec).to_vec(),
            rhs: zs,
        });
    }
    imh(tape, bound, params, q_dec, z_enc, z_enc, None)
}
