//! Floating-point abstraction shared by every numeric module.
//!
//! Training runs in `f32`; gradient verification runs the identical code
//! paths in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable as tensor element: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossless-for-`f32` conversion used by the checkpoint writer.
    fn to_f32_bits(self) -> u32;
    fn from_f32_bits(bits: u32) -> Self;
}

impl Scalar for f32 {
    fn to_f32_bits(self) -> u32 {
        self.to_bits()
    }
    fn from_f32_bits(bits: u32) -> Self {
        f32::from_bits(bits)
    }
}

impl Scalar for f64 {
    fn to_f32_bits(self) -> u32 {
        (self as f32).to_bits()
    }
    fn from_f32_bits(bits: u32) -> Self {
        f32::from_bits(bits) as f64
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

#[inline]
pub fn from_usize<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("count representable as float")
}
