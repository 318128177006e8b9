use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type for tensors. Implemented for f32 and f64; the precision is
/// chosen once per run and everything downstream is generic over it.
///
/// 64-bit is the verification mode: domain violations and non-finite
/// results raise errors instead of propagating silently. 32-bit trades
/// those checks for speed and is meant for training runs only.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + Debug
    + Display
    + PartialOrd
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Whether this mode enforces domain and finiteness checks.
    const CHECKED: bool;
    const NAME: &'static str;
    /// Tiny additive guard used inside norm computations so that the
    /// gradient of sqrt stays finite at exactly zero vectors. Far below
    /// one ulp of any value the models produce, so results are unchanged.
    const NORM_GUARD: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn erf(self) -> Self;
    fn is_finite(self) -> bool;
    fn max_val(self, other: Self) -> Self;
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const CHECKED: bool = true;
    const NAME: &'static str = "f64";
    const NORM_GUARD: Self = 1e-300;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn max_val(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const CHECKED: bool = false;
    const NAME: &'static str = "f32";
    const NORM_GUARD: Self = 1e-30;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn max_val(self, other: Self) -> Self {
        f32::max(self, other)
    }
}
