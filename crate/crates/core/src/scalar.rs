//! Scalar abstraction for the market math.
//!
//! The cost function and its derivatives only need a real field with `exp`
//! and `ln`, so everything numeric in the crate is generic over [`Scalar`].
//! `f64` is the production type; `f32` is supported for memory-bound
//! experiments with correspondingly looser tolerances.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + NumAssign
        + Sum
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + Serialize
        + DeserializeOwned
        + 'static
{
}

/// `ln Σ exp(x_i)` with max-shift stabilisation. Returns `-inf` for an empty
/// iterator.
pub fn log_sum_exp<T: Scalar, I>(values: I) -> T
where
    I: IntoIterator<Item = T>,
    I::IntoIter: Clone,
{
    let iter = values.into_iter();
    let max = iter.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    if max.is_infinite() {
        return max;
    }
    let sum: T = iter.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Stable `ln(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == T::neg_infinity() {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// The golden ratio `(1 + √5) / 2`.
#[inline]
pub fn golden_ratio<T: Scalar>() -> T {
    (T::one() + T::lit(5.0).sqrt()) / T::lit(2.0)
}
