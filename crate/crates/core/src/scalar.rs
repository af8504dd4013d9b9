//! Scalar abstraction shared by every module.
//!
//! Geometry, operators and transforms are written against [`Real`] so the same
//! code runs on `f32`, `f64`, and on [`Dual`](crate::dual::Dual) numbers (which
//! is how exact directional derivatives of ambient extensions are obtained).

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, NumCast};
use std::fmt::{Debug, Display};

/// Floating point scalar usable throughout the crate.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("literal representable")
    }

    /// Converts any other real (a stored parameter) into this scalar. Derivative
    /// parts of dual inputs are dropped, so only use this on constants.
    #[inline]
    fn cast<U: Real>(u: U) -> Self {
        <Self as NumCast>::from(u).expect("finite conversion")
    }

    /// Value part as `f64` (real part for dual numbers).
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_and_cast_round_trip() {
        let a: f32 = Real::lit(0.25);
        let b: f64 = Real::cast(a);
        assert_eq!(b, 0.25);
        assert_eq!(<f64 as Real>::to_f64_lossy(1.5), 1.5);
    }
}
