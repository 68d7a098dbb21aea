//! Dense linear algebra, layer primitives and the reverse-mode gradient tape
//! shared by the evaluation models.

mod activations;
mod checkpoint;
mod matrix;
mod optim;
mod scalar;
mod tape;

pub use activations::{
    dropout, dropout_mask, log_sigmoid, log_sum_exp, relu, sigmoid, softmax, softmax_rows, sparsemax,
    sparsemax_threshold,
};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use matrix::{dot, norm, Matrix};
pub use optim::{Adam, Optimizer, SgdMomentum};
pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("node does not belong to this tape")]
    ForeignNode,
    #[error("loss must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite value in parameter {0}")]
    NonFinite(String),
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
