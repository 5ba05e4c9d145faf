//! Parameter initializers: fan-in-scaled normals for weights, zeros for
//! biases, `N(0, 0.02)` for embedding tables.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Scalar, Tensor};

pub const EMBEDDING_STD: f64 = 0.02;

pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(z * std)
    })
}

/// He-normal for ReLU convolutions: `std = sqrt(2 / fan_in)`.
pub fn conv_weight<T: Scalar>(rng: &mut impl Rng, co: usize, ci: usize, k: usize) -> Tensor<T> {
    let fan_in = ci * k * k;
    normal(rng, &[co, ci, k, k], (2.0 / fan_in as f64).sqrt())
}

/// `[fan_in, fan_out]` weight with `std = sqrt(1 / fan_in)`.
pub fn linear_weight<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    normal(rng, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())
}

pub fn embedding<T: Scalar>(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor<T> {
    normal(rng, &[rows, dim], EMBEDDING_STD)
}
