//! Reverse-mode differentiation over dense arrays.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, rel_err, GradCheckReport};
pub use params::{load_checkpoint, save_checkpoint, Param, ParamStore};
pub use tape::{Gradients, Mask, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {a:?} vs {b:?}")]
    Shape { op: &'static str, a: Vec<usize>, b: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", .shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank} in {op}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{0} of an empty list")]
    Empty(&'static str),
    #[error("every position of a softmax row is masked")]
    AllMasked,
    #[error("loss must hold a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
