//! A small differentiable tensor engine and the transformer pieces built on
//! it: masked multi-head attention with relative-position bias, layer
//! normalization, feed-forward blocks, Adam, and a binary checkpoint format.
//!
//! Everything runs in `f64` so gradients can be checked against central
//! finite differences.

pub mod attention;
pub mod batch;
pub mod checkpoint;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod relpos;
pub mod tensor;
pub mod transformer;

use thiserror::Error;

pub use attention::{attention, attention_weights, BoolMatrix};
pub use batch::{fit, sum_gradients, FitConfig, FitReport};
pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Graph, NodeId};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{Gradients, ParamId, ParamStore};
pub use relpos::relative_position_bias;
pub use tensor::Tensor;
pub use transformer::{Linear, SequenceInput, Transformer, TransformerConfig};

/// RNG used for initialization, sampling and dropout throughout the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("attention row {row} has no permitted key")]
    AllMaskedRow { row: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
