//! Scalar abstraction for all tensor math.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! model code can run in `f32` (the runtime and checkpoint format) or `f64`
//! (used by gradient-checking tests, where central finite differences need
//! the extra precision).

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

/// Floating-point element type: `f32` or `f64`.
pub trait Scalar:
    Float + NumAssignOps + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
