//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + LowerExp
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// How far a value may stray outside a closed interval through rounding
    /// before it is treated as an error instead of being clamped.
    fn boundary_tol() -> Self;

    /// Converts an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f64 {
    #[inline]
    fn boundary_tol() -> Self {
        1e-12
    }
}

impl Real for f32 {
    #[inline]
    fn boundary_tol() -> Self {
        1e-5
    }
}

/// Clamps `v` into `[lo, hi]` if it lies within `tol` of the interval.
/// Returns `None` when it is farther out.
pub(crate) fn clamp_within<T: Real>(v: T, lo: T, hi: T, tol: T) -> Option<T> {
    if v.is_nan() {
        None
    } else if v < lo {
        (lo - v <= tol).then_some(lo)
    } else if v > hi {
        (v - hi <= tol).then_some(hi)
    } else {
        Some(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_within_tolerance() {
        assert_eq!(clamp_within(1.0 + 1e-13, -1.0, 1.0, 1e-12), Some(1.0));
        assert_eq!(clamp_within(-1.0 - 1e-13, -1.0, 1.0, 1e-12), Some(-1.0));
        assert_eq!(clamp_within(0.25, -1.0, 1.0, 1e-12), Some(0.25));
        assert_eq!(clamp_within(1.0 + 1e-9, -1.0, 1.0, 1e-12), None);
        assert_eq!(clamp_within(f64::NAN, -1.0, 1.0, 1e-12), None);
    }
}
