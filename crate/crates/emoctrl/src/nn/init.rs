//! Weight initialization. Sampling order is row-major and fixed, so a
//! given stream always produces the same tensor.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::Scalar;

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

/// Gaussian init with the given standard deviation.
pub fn randn<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<T> {
    let std = T::from_f64(std);
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = T::sample_standard_normal(rng) * std;
    }
    out
}

/// Fan-in scaled Gaussian, the default for linear and conv weights.
pub fn randn_fan_in<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}
