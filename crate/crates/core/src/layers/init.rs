//! Weight initialization. Every draw comes from a caller-owned ChaCha stream
//! so that building the same architecture from the same seed is bitwise
//! reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Glorot/Xavier uniform: U(−a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let values = (0..numel).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::param(shape, values).expect("xavier shape")
}

/// N(0, std²) initialization, used for embedding tables.
pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let numel: usize = shape.iter().product();
    let values = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::param(shape, values).expect("normal shape")
}

pub fn zeros(shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    t
}

pub fn constant(shape: &[usize], value: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut t = Tensor::new(shape, vec![value; numel]).expect("constant shape");
    t.set_requires_grad(true);
    t
}
