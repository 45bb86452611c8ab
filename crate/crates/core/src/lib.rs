//! Desk-scale laboratory for modern encoder pre-training.
//!
//! The crate is organized as a stack: dense tensor kernels with reverse-mode
//! autodiff at the bottom, an encoder model and its training objective on top,
//! and around them the machinery a full pre-training run needs — span masking,
//! a clipped AdamW variant with a trapezoidal schedule, a three-phase
//! curriculum driver, a corpus curation pipeline, and two evaluation
//! protocols (masked-token recovery and graded query/product similarity).
//!
//! All numeric code is generic over [`Scalar`]; training runs in `f32`,
//! gradient checking in `f64`.

pub mod corpus;
pub mod curriculum;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod masking;
pub mod optim;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Tensor in training precision.
pub type Tensor32 = kernels::Tensor<f32>;
/// Tensor in gradient-check precision.
pub type Tensor64 = kernels::Tensor<f64>;
/// Autodiff tape in training precision.
pub type Tape32 = kernels::Tape<f32>;
/// Autodiff tape in gradient-check precision.
pub type Tape64 = kernels::Tape<f64>;
/// Encoder in training precision.
pub type Model32 = encoder::EncoderModel<f32>;
/// Encoder in gradient-check precision.
pub type Model64 = encoder::EncoderModel<f64>;

/// Token id type used across tokenizer, masking, and model.
pub type TokenId = u32;
