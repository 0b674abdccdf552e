use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )))
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<E: Element, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<E>> {
    check_rate(rate)?;
    let keep = E::from_f64_lossy(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { E::zero() } else { keep })
        .collect())
}

/// Multiply by a precomputed mask. The backward pass is the same operation.
pub fn apply_mask<E: Element>(x: &Tensor<E>, mask: &[E]) -> Result<Tensor<E>> {
    if mask.len() != x.len() {
        return Err(Error::mismatch("dropout mask", x.shape(), &[mask.len()]));
    }
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(mask).map(|(&v, &m)| v * m).collect(),
    )
}
