//! Scalar abstraction shared by every numeric routine in the crate.

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Floating-point scalar the algorithms are generic over (`f32` or `f64`).
pub trait Real: RealField + Copy + ToPrimitive + Send + Sync {}

impl<T> Real for T where T: RealField + Copy + ToPrimitive + Send + Sync {}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Lossy conversion back to `f64`, used at I/O boundaries.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
