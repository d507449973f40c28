use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1/(1 − rate)`. Deterministic for a fixed seed.
pub fn dropout_mask(shape: &[usize], rate: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = sample_mask(n, rate, &mut rng)?;
    Tensor::new(shape.to_vec(), data)
}

pub fn sample_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        bail!(InvalidArgument, "dropout rate must lie in [0, 1), got {rate}");
    }
    if rate == 0.0 {
        return Ok(vec![1.0; n]);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}
