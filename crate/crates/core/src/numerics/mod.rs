//! Dense-tensor arithmetic with reverse-mode gradient propagation.
//!
//! [`Tensor`] is a row-major buffer with a shape; [`Tape`] records operations
//! during a forward pass and replays them in exact reverse order to populate
//! gradients. All higher layers (encoder, pretraining, fine-tuning) express
//! their math through this module.

mod tape;
mod tensor;

pub use tape::{Mode, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

/// Target value marking positions excluded from the cross-entropy mean.
pub const IGNORE_TARGET: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements but buffer holds {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("cross entropy: every target carries the ignore marker")]
    AllTargetsIgnored,
    #[error("{op}: head count {heads} does not divide feature dim {dim}")]
    HeadSplit {
        op: &'static str,
        heads: usize,
        dim: usize,
    },
    #[error("rotary embedding requires an even head dim, got {0}")]
    OddHeadDim(usize),
    #[error("{op}: corruption fractions {fractions:?} do not sum to 1")]
    BadFractions {
        op: &'static str,
        fractions: Vec<f64>,
    },
    #[error("backward unavailable: tape was built in inference mode")]
    InferenceTape,
    #[error("{op}: packed boundaries are inconsistent: {detail}")]
    BadBoundaries { op: &'static str, detail: String },
}
