//! Weight initialization.

use rand::Rng;

use crate::nn::tensor::{Scalar, Tensor4};

/// Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in).
/// Samples are drawn in f64 so f32 and f64 graphs share the stream.
pub fn kaiming_uniform<T: Scalar>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor4<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..n * c * h * w)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor4::new(n, c, h, w, data)
}
