use rand::Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// Trainable tensor with entries drawn from `U(-bound, bound)`.
pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            }
        })
        .collect();
    Tensor::param(data, shape)
}

pub fn constant(shape: &[usize], value: f64) -> Result<Tensor> {
    Tensor::param(vec![value; shape.iter().product()], shape)
}
