//! Seeded weight initialization helpers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Uniform values in [-bound, bound].
pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
        .collect();
    Tensor::new(shape, data).expect("shape/data length agree by construction")
}

/// Fan-in scaled uniform init, bound = 1/sqrt(fan_in).
pub fn scaled_uniform(rng: &mut ChaCha8Rng, fan_in: usize, shape: Vec<usize>) -> Tensor {
    uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
}
