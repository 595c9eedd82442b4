//! Dense f64 tensors on a reverse-mode tape.
//!
//! A `Tape` owns every tensor created during one forward pass; ops append
//! nodes and return `TensorId` handles. `backward` walks the tape in reverse
//! and returns gradients for the leaves that asked for them. Training code
//! rebuilds the tape every step: parameters live outside in a `ParamStore`
//! and are copied in as leaves, which keeps the engine free of aliasing and
//! makes every step a pure function of (parameters, batch, seed).

mod checkpoint;
mod optim;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use optim::{AdamW, AdamWConfig, GradsByName, ParamStore, Parameter};
pub use tape::{GradMap, PrimitiveAttrs, PrimitiveKind, Tape};

use thiserror::Error;

/// Handle to a tensor on a specific tape. The generation tag catches ids
/// that outlive their tape or cross between tapes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId {
    pub(crate) gen: u64,
    pub(crate) index: usize,
}

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    #[error("unsupported primitive kind `{0}`")]
    UnsupportedOp(String),

    #[error("tensor does not belong to this tape (detached graph)")]
    DetachedGraph,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("cross entropy over an empty batch: every target is ignored")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("optimizer state corrupted: {0}")]
    StateCorruption(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
