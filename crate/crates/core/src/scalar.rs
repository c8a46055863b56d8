//! Scalar abstraction shared by every numerical routine in the crate.
//!
//! All math is written against [`Scalar`], which is implemented for `f32` and
//! `f64`. The concrete `f64` aliases exported from the crate root are what the
//! CLI and the test-suite use; the tolerances quoted throughout the docs assume
//! double precision.

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// A real floating point type usable by the solvers.
pub trait Scalar: RealField + Copy + ToPrimitive + Send + Sync {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Lossy conversion to `f64` for reporting and serialization.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Smallest relative tolerance that is meaningful for `T`.
#[inline]
pub fn tolerance_floor<T: Scalar>() -> T {
    T::default_epsilon() * lit(64.0)
}

/// Clamps a requested tolerance to what `T` can resolve.
#[inline]
pub fn effective_tolerance<T: Scalar>(requested: f64) -> T {
    lit::<T>(requested).max(tolerance_floor())
}
