//! Small helpers shared by unit and integration tests.

use crate::numerics::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform tensor in [-scale, scale].
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Random probability vector of length n.
pub fn rand_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..n).map(|_| rng.gen_range(0.01f32..1.0)).collect();
    let s: f32 = v.iter().sum();
    for x in &mut v {
        *x /= s;
    }
    v
}
