//! Scalar abstraction: everything numeric in this crate is generic over a
//! floating-point type so the same kernels can run at f32 (training,
//! feature files) and f64 (oracles, gradient checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point scalar usable by the numeric core: f32 or f64.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64c(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("f64 constant not representable")
    }

    fn from_usize_c(v: usize) -> Self {
        num_traits::FromPrimitive::from_usize(v).expect("usize not representable")
    }

    fn to_f64c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar not convertible to f64")
    }

    fn to_f32c(self) -> f32 {
        num_traits::ToPrimitive::to_f32(&self).expect("scalar not convertible to f32")
    }

    fn from_f32c(v: f32) -> Self {
        num_traits::FromPrimitive::from_f32(v).expect("f32 not representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for lifting an f64 constant into the generic scalar type.
pub fn real<T: Real>(v: f64) -> T {
    T::from_f64c(v)
}

/// Default scalar for the pipeline: images, activations and feature files
/// are all 32-bit.
pub type Pixel = f32;
