use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

/// Floating-point scalar the numeric modules are generic over.
///
/// `of`/`to_f64` are infallible conversions so hot loops avoid the `Option`s
/// of `num_traits::FromPrimitive`.
pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}
