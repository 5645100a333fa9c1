//! Scalar abstraction for the numeric core.
//!
//! All tensor and autodiff code is generic over [`Scalar`] so the same
//! kernels compile for `f32` and `f64`. Experiments are pinned to `f64`
//! through the aliases exported at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type usable by tensors, the tape and the trainer.
///
/// The conversion helpers are infallible for the implemented types; they use
/// distinct names (`of_f64` / `as_f64`) so they never shadow the fallible
/// `num_traits` methods of the same spelling.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Send + Sync + Debug + Display + 'static
{
    /// Convert from `f64`, possibly rounding (e.g. for `f32`).
    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Convert from `usize` exactly enough for sizes used here.
    fn of_usize(v: usize) -> Self {
        Self::of_f64(v as f64)
    }

    /// Widen to `f64` (exact for `f32` and `f64`).
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f64::of_f64(1.5), 1.5);
        assert_eq!(f32::of_f64(1.5), 1.5f32);
        assert_eq!(f32::of_usize(7).as_f64(), 7.0);
        assert_eq!((-3.25f64).as_f64(), -3.25);
    }

    #[test]
    fn f32_round_trips_exactly_through_f64() {
        // Checkpoints store f64; any f32 value must survive the widening.
        for &v in &[0.1f32, -1.0e-8, 3.4e38, f32::MIN_POSITIVE] {
            assert_eq!(f32::of_f64(v.as_f64()), v);
        }
    }
}
