use rand::Rng;

use super::tensor::{numel, Tensor};

/// Uniform draws are clamped to `[EPS, 1 - EPS]` before the double log.
pub const UNIFORM_EPS: f64 = 1e-12;

/// Standard Gumbel transform `-ln(-ln u)` of a uniform draw.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// Tensor of independent standard Gumbel draws.
pub fn sample_gumbel<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let data = (0..numel(shape))
        .map(|_| gumbel_from_uniform(rng.gen::<f64>()))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
