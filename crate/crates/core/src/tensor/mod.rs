//! Dense matrices, a reverse-mode tape, parameter storage and checkpoints.

mod checkpoint;
mod gradcheck;
mod matrix;
mod param;
mod tape;

pub use checkpoint::{Checkpoint, CheckpointKind, FORMAT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use matrix::Matrix;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{row_softmax, sigmoid, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("matrix of {rows}x{cols} cannot hold {len} values")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("backward called on an empty tape (no forward pass recorded)")]
    EmptyTape,
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("no parameter named `{0}`")]
    UnknownParam(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(&'static str),
    #[error("i/o: {0}")]
    Io(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        TensorError::ShapeMismatch { op, lhs, rhs }
    }
}
