//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use ndarray::NdFloat;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Real floating point scalar: implemented for [`f32`] and [`f64`].
///
/// Constants are written as `f64` literals and converted with [`Real::of`];
/// the conversion is exact for `f64` and rounds to nearest for `f32`.
pub trait Real: NdFloat + FloatConst + FromPrimitive + ToPrimitive + FromStr + Default + Sum + Debug + Display {
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
