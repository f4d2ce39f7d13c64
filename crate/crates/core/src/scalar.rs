//! Floating-point scalar abstraction for the numeric kernels.
//!
//! Alignment, encoder, and loss math are generic over [`Scalar`] so the same
//! code runs in `f32` or `f64`. The shipped pipeline instantiates everything
//! at [`crate::Real`] (`f64`).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` literal into the working scalar type.
#[inline]
pub fn real<T: Scalar>(x: f64) -> T {
    T::from(x).expect("literal representable in scalar type")
}

/// Convert a `usize` count into the working scalar type.
#[inline]
pub fn real_of_usize<T: Scalar>(x: usize) -> T {
    T::from_usize(x).expect("count representable in scalar type")
}
