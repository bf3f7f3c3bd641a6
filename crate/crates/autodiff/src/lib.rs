//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D [`Mat`]; scalars are `1×1`. A [`Tape`] records each
//! forward op in creation order and replays them backwards exactly once.
//! Graph structure is expressed through explicit index lists
//! ([`Tape::gather_rows`], [`Tape::scatter_add_rows`], [`Tape::segment_softmax`])
//! rather than sparse matrices.

mod optim;
mod params;
mod tape;

pub use optim::{clip_global_norm, global_norm, AdamW};
pub use params::{Checkpoint, NamedTensor, ParamId, ParamStore, CHECKPOINT_VERSION};
pub use tape::{Grads, Tape, Var};

pub type Mat = ndarray::Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{op}: index {index} out of range for {len} rows")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("tape already consumed by a previous backward pass")]
    Consumed,
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AdError>;
