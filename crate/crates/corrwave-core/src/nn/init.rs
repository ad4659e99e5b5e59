//! Parameter initialization: fan-in-scaled uniform weights, zero biases.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 * bound - bound)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(shape.to_vec())
}
