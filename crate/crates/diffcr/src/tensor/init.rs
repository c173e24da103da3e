//! Weight initializers. All take an explicit RNG so construction order is
//! the only thing that determines initial weights.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Kaiming-normal with explicit fan-in: std = sqrt(2 / fan_in).
pub fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    sample_normal(rng, shape, std)
}

/// Plain normal with the given std.
pub fn sample_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Conv weight `[O, C, KH, KW]` with fan_in = C*KH*KW.
pub fn conv_weight(rng: &mut ChaCha8Rng, o: usize, c: usize, kh: usize, kw: usize) -> ArrayD<f64> {
    kaiming(rng, &[o, c, kh, kw], c * kh * kw)
}

/// Linear weight `[d_in, d_out]` with fan_in = d_in.
pub fn linear_weight(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> ArrayD<f64> {
    kaiming(rng, &[d_in, d_out], d_in)
}

/// Uniform in [-a, a], used for embedding tables.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}
