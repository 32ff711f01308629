//! Dense `f64` tensors, a recorded-tape reverse-mode differentiator, Adam,
//! finite-difference gradient checking and checkpoint I/O.
//!
//! Everything that computes a gradient in this crate goes through [`Tape`].

mod checkpoint;
mod gradcheck;
mod optim;
mod recurrent;
mod tape;
mod tensor;

pub use checkpoint::{blob_path, decode, encode, load_checkpoint, manifest_path, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckError, GradCheckReport};
pub use optim::{glorot, uniform, OptimizerConfig, Parameter, ParameterStore};
pub use recurrent::{encode_sequences, BiLstmNames, LstmNames};
pub use tape::{sigmoid, Activation, Gradients, LstmParams, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
