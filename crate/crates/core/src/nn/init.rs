//! Weight initializers.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Arr;

/// He-normal initialization for conv / fc layers feeding a ReLU.
/// `fan_in` is inferred from the shape: all dims except the first.
pub fn he_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let std = (2.0 / fan_in as f32).sqrt();
    normal(shape, 0.0, std, rng)
}

/// Xavier-uniform initialization for layers feeding tanh/sigmoid.
pub fn xavier_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let fan_out = shape[0];
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-limit..limit))
}

pub fn normal(shape: &[usize], mean: f32, std: f32, rng: &mut ChaCha8Rng) -> Arr {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller
        let u1: f32 = rng.random::<f32>().max(1e-12);
        let u2: f32 = rng.random();
        mean + std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
    })
}

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}
