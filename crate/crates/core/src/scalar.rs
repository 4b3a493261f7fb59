//! Floating point abstraction shared by the numerical modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, NumAssign};

/// Real scalar used by schedules, mixtures and samplers.
///
/// Implemented for `f32` and `f64`. Random draws are always produced in
/// `f64` and narrowed through [`Scalar::from_f64`], so a given seed yields
/// the same stream regardless of the scalar type.
pub trait Scalar:
    Float + FloatConst + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;

    fn to_f64(self) -> f64;

    #[inline]
    fn two() -> Self {
        Self::one() + Self::one()
    }

    #[inline]
    fn half() -> Self {
        Self::from_f64(0.5)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Squared Euclidean distance between `a` and `scale * b`.
#[inline]
pub(crate) fn sq_dist_scaled<T: Scalar>(a: &[T], scale: T, b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - scale * y;
            d * d
        })
        .sum()
}

#[inline]
pub(crate) fn sq_norm<T: Scalar>(a: &[T]) -> T {
    a.iter().map(|&x| x * x).sum()
}

/// `log(sum(exp(v)))` with max subtraction.
pub(crate) fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}
