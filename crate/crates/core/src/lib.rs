//! Large wireless model (LWM) toolkit.
//!
//! * [`channel`] synthesizes labeled MIMO-OFDM channels and reads/writes the
//!   `LWMC` dataset format.
//! * [`patch`] turns channels into real/imaginary patch sequences and applies
//!   masked channel modeling.
//! * [`model`] is the transformer encoder with its CLS patch and decoder head.
//! * [`pretrain`] runs self-supervised pre-training and owns checkpoints.
//! * [`downstream`] extracts embeddings and benchmarks task heads on them.
//!
//! All numerics go through [`tensor`], a small reverse-mode autodiff engine.

pub mod channel;
pub mod downstream;
pub mod exec;
pub mod model;
pub mod patch;
pub mod pretrain;
pub mod seed;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Format(#[from] channel::FormatError),
    #[error(transparent)]
    Checkpoint(#[from] pretrain::CheckpointError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
