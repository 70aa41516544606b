//! Distributed-lag embedding.
//!
//! Every (feature, lag) pair becomes its own sequence position. The `k × L`
//! lag matrix is flattened feature-major into `p_G = k·L` scalars, each scalar
//! is lifted to `d_E` dimensions by a shared value projection, and two
//! sinusoidal codes are added: a global one indexed over all `p_G` positions
//! and a local one that restarts for every feature.

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::params::{Bound, ParamId};

/// Scalar-to-`d_E` affine map shared by all positions of a sequence.
#[derive(Clone, Copy, Debug)]
pub struct ValueProjection {
    /// `[1, d_E]`
    pub weight: ParamId,
    /// `[d_E]`
    pub bias: ParamId,
}

/// Feature-major flattening of a `k × L` lag matrix.
pub fn flatten_distributed_lags(x: &Tensor) -> Result<Vec<f64>, TensorError> {
    if x.rank() != 2 {
        return Err(TensorError::InvalidShape {
            shape: x.shape().to_vec(),
        });
    }
    // row-major storage of [k, L] already lists feature 1's lags, then feature 2's, ...
    Ok(x.data().to_vec())
}

pub fn unflatten_distributed_lags(flat: &[f64], k: usize, lags: usize) -> Result<Tensor, TensorError> {
    Tensor::new(vec![k, lags], flat.to_vec())
}

/// Sinusoidal position codes for 1-based positions `1..=p_max`:
/// column `2d` holds `sin(p / v^(2d/d_model))`, column `2d+1` the cosine.
pub fn spe(p_max: usize, d_model: usize, period: f64) -> Result<Tensor, TensorError> {
    if d_model == 0 || !d_model.is_multiple_of(2) || p_max == 0 {
        return Err(TensorError::InvalidShape {
            shape: vec![p_max, d_model],
        });
    }
    let mut out = vec![0.0; p_max * d_model];
    for p in 1..=p_max {
        let row = &mut out[(p - 1) * d_model..p * d_model];
        for d in 0..d_model / 2 {
            let angle = p as f64 / period.powf(2.0 * d as f64 / d_model as f64);
            row[2 * d] = angle.sin();
            row[2 * d + 1] = angle.cos();
        }
    }
    Tensor::new(vec![p_max, d_model], out)
}

/// Global code: one continuous position index over the flattened sequence.
pub fn gspe(p_global: usize, d_embed: usize, period: f64) -> Result<Tensor, TensorError> {
    spe(p_global, d_embed, period)
}

/// Local code: the `L × d_E` block of positions `1..=L`, stacked once per
/// feature.
pub fn lspe(k: usize, lags: usize, d_embed: usize, period: f64) -> Result<Tensor, TensorError> {
    let block = spe(lags, d_embed, period)?;
    let mut data = Vec::with_capacity(k * block.numel());
    for _ in 0..k {
        data.extend_from_slice(block.data());
    }
    Tensor::new(vec![k * lags, d_embed], data)
}

/// `GSPE + LSPE`, the positional part of the encoder input.
pub fn dle_positions(k: usize, lags: usize, d_embed: usize, period: f64) -> Result<Tensor, TensorError> {
    let mut g = gspe(k * lags, d_embed, period)?;
    let l = lspe(k, lags, d_embed, period)?;
    g.data_mut()
        .iter_mut()
        .zip(l.data())
        .for_each(|(a, b)| *a += b);
    Ok(g)
}

/// Applies the value projection to `values: [B, n, 1]`, giving `[B, n, d_E]`.
pub fn project_values(
    tape: &mut Tape,
    bound: &Bound,
    proj: &ValueProjection,
    values: Var,
    relu: bool,
) -> Result<Var, TensorError> {
    if tape.value(values).data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "embedding" });
    }
    let h = tape.matmul(values, bound[proj.weight])?;
    let h = tape.add(h, bound[proj.bias])?;
    Ok(if relu { tape.relu(h) } else { h })
}

/// Encoder input `Z_0 = DLV + GSPE + LSPE` for `x: [B, p_G, 1]`.
pub fn dle(
    tape: &mut Tape,
    bound: &Bound,
    proj: &ValueProjection,
    x: Var,
    positions: &Tensor,
    relu: bool,
) -> Result<Var, TensorError> {
    let dlv = project_values(tape, bound, proj, x, relu)?;
    let pos = tape.constant(positions.clone());
    tape.add(dlv, pos)
}

/// Decoder input `S_0`: projected `y_de: [B, T+r, 1]` plus `spe(T+r)`.
pub fn decoder_embed(
    tape: &mut Tape,
    bound: &Bound,
    proj: &ValueProjection,
    y_de: Var,
    positions: &Tensor,
    relu: bool,
) -> Result<Var, TensorError> {
    dle(tape, bound, proj, y_de, positions, relu)
}
