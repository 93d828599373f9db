use rand::Rng;

use crate::tensor::Tensor;

/// Glorot/Xavier uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-a..a)).collect();
    Tensor { shape, data }
}
