//! Scalar abstraction for the tensor core.
//!
//! All core math is generic over [`Scalar`]; concrete aliases at the crate
//! root pin `f64` for the model/training stack.

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt;
use std::iter::Sum;

pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + Sum + fmt::Debug + fmt::Display + 'static
{
    /// Lift an `f64` constant into the scalar type.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable")
    }

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
