//! Differentiable-computation substrate: tensors, a reverse-mode tape,
//! parameter storage, seeded randomness, checkpoints and gradient checking.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use checkpoint::{
    config_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
};
pub use gradcheck::{finite_difference_check, relative_error, relative_error_with_floor, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use rng::RngState;
pub use tensor::Tensor;

/// Clamp applied to probabilities before taking logs.
pub const EPS_CLAMP: f64 = 1e-7;

/// Variance floor used by layer normalization.
pub const EPS_VAR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("tensor rank {rank} not supported (1 to 3 axes)")]
    Rank { rank: usize },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
