//! Seeded randomness helpers.
//!
//! Every stochastic choice in the crate flows through a `ChaCha8Rng` seeded
//! from the run configuration, which is what makes whole-pipeline runs
//! bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let mut u1: f64 = rng.random();
    while u1 <= f64::MIN_POSITIVE {
        u1 = rng.random();
    }
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| normal(rng) * std).collect();
    Tensor::from_vec(shape, data).expect("shape/product consistency")
}

pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| lo + (hi - lo) * rng.random::<f64>())
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product consistency")
}
