//! Minimal deterministic neural-network core.
//!
//! Everything the two classifier architectures need and nothing more: row-major
//! tensors, 1-D convolution, dense layers, SeLU/tanh activations, global
//! average pooling, a branched stack for the multi-channel model, stabilized
//! softmax cross-entropy, Adam, and finite-difference gradient verification.
//!
//! All math is generic over [`Real`]: `f32` for storage and training, `f64`
//! for gradient checks. Forward passes are pure functions; training is
//! single-threaded so runs are bit-reproducible.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod tensor;
pub mod weights;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use layers::{LayerKind, Network, SeluParams};
pub use loss::{softmax, softmax_cross_entropy};
pub use tensor::{Real, Tensor};
pub use weights::{read_tensors, read_tensors_from, write_tensors, write_tensors_to};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("reduction over an empty axis")]
    EmptyAxis,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("bad hyperparameter: {0}")]
    BadHyper(String),
}
