use rand::Rng;

use crate::scalar::Scalar;
use crate::seed::SeedScheme;
use crate::tensor::Tensor;

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Weights drawn from `U(-limit, limit)` on the stream named after the
/// parameter, so a parameter's initial value depends only on `(seed, name)`.
pub fn glorot_uniform<T: Scalar>(
    seeds: &SeedScheme,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let limit = glorot_limit(fan_in, fan_out);
    let mut rng = seeds.stream(&format!("init/{name}"), 0);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-limit..limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}
