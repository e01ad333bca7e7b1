use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar the whole stack is generic over: f32 or f64.
///
/// f32 is the wire format (checkpoints, PNG quantization) and the default for
/// the CLI; f64 is what the gradient checks and metric oracles run on.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ScalarOperand + Sum + Debug + Display + Send + Sync + 'static
{
    /// Infallible conversion from f64 (both supported scalars cover it).
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}
