//! Seeded weight initializers.

use super::graph::ArrD;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// He-normal initialization: std = sqrt(2 / fan_in).
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrD {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(shape, std, rng)
}

/// Xavier-normal initialization: std = sqrt(2 / (fan_in + fan_out)).
pub fn xavier_normal(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ArrD {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal(shape, std, rng)
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrD {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    ArrD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Uniform in [-a, a]; used for tiny deterministic embeddings.
pub fn uniform(shape: &[usize], a: f64, rng: &mut ChaCha8Rng) -> ArrD {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    ArrD::from_shape_vec(IxDyn(shape), data).unwrap()
}
