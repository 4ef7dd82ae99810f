//! Scalar abstraction for returns and value estimates.

use std::fmt::Debug;

use num_traits::{FromPrimitive, Num, ToPrimitive};

/// Numeric type used for rewards, returns and stored values.
///
/// Implemented for `f32` and `f64`; exact types such as
/// `num_rational::Ratio<i64>` satisfy it too and are used by the tests to
/// check return recursion without rounding.
pub trait Scalar:
    Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    /// Conversion used when reading environment rewards.
    fn from_reward(r: f64) -> Self {
        Self::from_f64(r).unwrap_or_else(Self::zero)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Returns the larger of the two; `self` wins ties.
    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl<T> Scalar for T where
    T: Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
}
