//! Scalar abstraction so every kernel runs in either precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for tensors, tapes, and optimizer state.
///
/// `f32` is the training precision; `f64` is used for finite-difference
/// gradient checking, where 32-bit round-off would swamp the comparison.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    /// Gauss error function, evaluated in `f64` and rounded to `Self`.
    fn erf(self) -> Self {
        Self::from_f64_lossy(libm::erf(self.to_f64_lossy()))
    }
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
