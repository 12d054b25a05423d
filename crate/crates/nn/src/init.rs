//! Weight initialisers.

use rand::Rng;

use crate::tensor::Tensor;

/// He/Kaiming normal: `N(0, 2 / fan_in)`, for layers followed by ReLU.
pub fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// Truncation-free Xavier/Glorot normal.
pub fn xavier_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / (fan_in + fan_out).max(1) as f64).sqrt(), rng)
}
