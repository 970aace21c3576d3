//! Floating-point element trait for the autodiff engine.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Element type for tensors: `f32` for training speed, `f64` for
/// finite-difference verification.
pub trait Scalar: ndarray::NdFloat + serde::Serialize + Default + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
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
    #[inline]
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
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
    #[inline]
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}
