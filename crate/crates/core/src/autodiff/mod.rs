//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tape`] records every differentiable operation as a node in execution
//! order. Leaves are created with [`Tape::leaf`] / [`Tape::constant`]; each
//! operation returns a [`Var`] handle into the tape. [`Tape::backward`] walks
//! the nodes in reverse index order, which is a valid reverse topological
//! order because a node can only reference nodes recorded before it.
//!
//! Model code works on 3-D `[batch, rows, cols]` tensors; the batch axis is a
//! plain leading axis that `matmul` and broadcasting `add` map over.

mod gemm;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{Param, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("ragged rows")]
    Ragged,
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: axis {axis} or range out of bounds for shape {shape:?}")]
    OutOfBounds {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
}
