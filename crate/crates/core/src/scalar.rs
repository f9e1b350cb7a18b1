//! Scalar abstraction shared by every numeric module.
//!
//! The math in `gmm`, `losses`, `learners`, `metrics` and `sampling` is written
//! against [`Scalar`] so it runs in `f32` or `f64`. The special functions are
//! always evaluated in double precision and rounded back.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

use crate::special;

/// floating point: f32 or f64
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Error function.
    fn erf(self) -> Self;

    /// Complementary error function.
    fn erfc(self) -> Self;

    /// Scaled complementary error function `exp(x^2) * erfc(x)`.
    fn erfcx(self) -> Self;

    /// Tolerance used for "sums to one" checks on probability vectors.
    fn simplex_tolerance() -> Self;

    /// Converts an `f64` literal. Values outside the target range saturate.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        special::erf(self)
    }

    #[inline]
    fn erfc(self) -> Self {
        special::erfc(self)
    }

    #[inline]
    fn erfcx(self) -> Self {
        special::erfcx(self)
    }

    #[inline]
    fn simplex_tolerance() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        special::erf(self as f64) as f32
    }

    #[inline]
    fn erfc(self) -> Self {
        special::erfc(self as f64) as f32
    }

    #[inline]
    fn erfcx(self) -> Self {
        special::erfcx(self as f64) as f32
    }

    #[inline]
    fn simplex_tolerance() -> Self {
        1e-5
    }
}

/// Sum of a slice.
pub(crate) fn sum<T: Scalar>(values: &[T]) -> T {
    values.iter().fold(T::zero(), |acc, &v| acc + v)
}

/// Dot product of two equal-length slices.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
