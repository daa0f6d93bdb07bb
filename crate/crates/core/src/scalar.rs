//! Scalar abstraction: every numeric routine in this crate is generic over [`Real`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar (`f32` or `f64`) for tensors, models, and training.
///
/// Concrete pipelines (CLI, acceptance runs) instantiate at `f64`; the crate
/// root exposes `*64` aliases for that.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, the type all constants are written in.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant")
    }

    /// Widening (f32) or identity (f64) conversion used at serialization edges.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares<S: Real>(xs: &[S]) -> S {
        xs.iter().map(|x| *x * *x).sum()
    }

    #[test]
    fn generic_math_works_at_both_widths() {
        let a: f32 = sum_of_squares(&[1.0f32, 2.0, 3.0]);
        let b: f64 = sum_of_squares(&[1.0f64, 2.0, 3.0]);
        assert_eq!(a, 14.0);
        assert_eq!(b, 14.0);
    }

    #[test]
    fn constant_round_trip() {
        assert_eq!(f64::of(0.25).as_f64(), 0.25);
        assert_eq!(f32::of(0.25).as_f64(), 0.25);
    }
}
