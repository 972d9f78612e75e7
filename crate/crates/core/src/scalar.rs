//! Numeric traits shared by the solvers.
//!
//! [`Scalar`] is an ordered field: enough for the closed-form scheduling
//! routines, which therefore also run on exact rationals. [`Real`] adds the
//! floating-point operations needed by the iterative solvers.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Ordered field element (`f32`, `f64`, `Ratio<i64>`, `BigRational`, ...).
pub trait Scalar: Num + Clone + PartialOrd + Debug {}

impl<T> Scalar for T where T: Num + Clone + PartialOrd + Debug {}

/// Floating point scalar used by the equilibrium, power-flow and optimizer code.
pub trait Real:
    Scalar + Float + FromPrimitive + ToPrimitive + Display + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal. Infallible for IEEE floats.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Sum of a slice of scalars, starting from zero.
pub(crate) fn sum<T: Scalar>(xs: &[T]) -> T {
    xs.iter().cloned().fold(T::zero(), |a, b| a + b)
}
