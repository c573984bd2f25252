use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point element type for tensors and kernels.
///
/// The whole stack is generic over this trait: training and inference run at
/// `f32`, gradient checking runs the same code at `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Widening conversion used by metrics and checks that accumulate in `f64`.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Converts an `f64` constant into the active scalar type.
#[inline]
pub fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 constant representable in scalar type")
}

/// Converts a `usize` count into the active scalar type.
#[inline]
pub fn cast_usize<T: Scalar>(v: usize) -> T {
    T::from_usize(v).expect("usize count representable in scalar type")
}
