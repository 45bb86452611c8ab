//! Dense tensor math with reverse-mode automatic differentiation.
//!
//! The centerpiece is [`Tape`]: forward calls record operations onto an
//! ordered list, `backward` replays them in exact reverse order accumulating
//! gradients. [`grad_check`] verifies every differentiable primitive against
//! central finite differences in `f64`.

mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use linalg::{matmul_nn, matmul_nt, matmul_tn};
pub use tape::{gelu_scalar, AttentionLayout, NodeId, Tape};
pub use tensor::Tensor;
