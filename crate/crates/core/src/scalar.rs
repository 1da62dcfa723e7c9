//! Floating-point abstraction shared by the encoder, training and ranking code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used for model parameters and embeddings: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts from `f64`, rounding to the nearest representable value.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖₂`, or `None` when the norm is zero or not finite.
pub fn normalized<T: Scalar>(v: &[T]) -> Option<Vec<T>> {
    let n = l2_norm(v);
    if !n.is_finite() || n <= T::zero() {
        return None;
    }
    Some(v.iter().map(|&x| x / n).collect())
}

/// Cosine similarity clamped into `[-1, 1]`; zero vectors score 0.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na <= T::zero() || nb <= T::zero() {
        return T::zero();
    }
    (dot(a, b) / (na * nb)).max(-T::one()).min(T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vector_has_no_normalization() {
        assert!(normalized::<f64>(&[0.0, 0.0]).is_none());
        let n = normalized(&[3.0f32, 4.0]).unwrap();
        assert!((n[0] - 0.6).abs() < 1e-7 && (n[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn cosine_is_clamped() {
        let a = [1.0f64, 1e-300];
        assert!(cosine(&a, &a) <= 1.0);
        assert_eq!(cosine(&[0.0f64, 0.0], &[1.0, 0.0]), 0.0);
    }
}
