//! Scalar abstraction for the math core.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the numeric core is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an f64 constant into the scalar type.
///
/// Panics only if the type cannot represent ordinary finite constants, which
/// no [`Scalar`] implementation does.
pub fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("scalar conversion from f64")
}
