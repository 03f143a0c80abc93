//! Scalar abstraction for the dense-vector code paths.
//!
//! Embeddings, k-means and IVF search are generic over [`Scalar`] so the same
//! code serves `f32` storage (the on-disk embedding format) and `f64`
//! (reference computations in tests). Dot products and norms always
//! accumulate in `f64` regardless of the storage type.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static {
    #[inline]
    fn widen(self) -> f64 {
        // f32 -> f64 and f64 -> f64 are both exact.
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn narrow(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.widen() * y.widen()).sum()
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// Squared Euclidean distance accumulated in `f64`.
#[inline]
pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.widen() - y.widen();
            d * d
        })
        .sum()
}
