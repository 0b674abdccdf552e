//! Batch normalisation over the last (channel / feature) axis.
//!
//! Every other axis is treated as part of the batch, so the same kernels serve
//! the convolutional `[N, H, W, C]` layer and the dense `[N, U]` layers.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel mean and (biased) variance of one training batch.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<E: Element> {
    pub normalized: Tensor<E>,
    pub inv_std: Vec<E>,
}

fn channels<E: Element>(x: &Tensor<E>, gamma: &Tensor<E>, beta: &Tensor<E>) -> Result<usize> {
    let c = *x.shape().last().expect("tensors have rank >= 1");
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::mismatch("batchnorm channels", x.shape(), gamma.shape()));
    }
    Ok(c)
}

/// Training-mode forward: normalise with the batch's own statistics.
pub fn batchnorm_train<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    epsilon: f64,
) -> Result<(Tensor<E>, BatchNormCache<E>, BatchStats)> {
    let c = channels(x, gamma, beta)?;
    let rows = x.len() / c;
    let mut mean = vec![0.0f64; c];
    for row in x.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut variance = vec![0.0f64; c];
    for row in x.data().chunks(c) {
        for ((var, m), v) in variance.iter_mut().zip(&mean).zip(row) {
            let d = v.as_f64() - m;
            *var += d * d;
        }
    }
    variance.iter_mut().for_each(|v| *v /= rows as f64);

    let inv_std: Vec<E> = variance
        .iter()
        .map(|v| E::from_f64_lossy(1.0 / (v + epsilon).sqrt()))
        .collect();
    let mean_e: Vec<E> = mean.iter().map(|&m| E::from_f64_lossy(m)).collect();

    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        for ch in 0..c {
            let xh = (row[ch] - mean_e[ch]) * inv_std[ch];
            normalized.push(xh);
            out.push(gamma.data()[ch] * xh + beta.data()[ch]);
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    let cache = BatchNormCache {
        normalized: Tensor::new(x.shape().to_vec(), normalized)?,
        inv_std,
    };
    Ok((out, cache, BatchStats { mean, variance }))
}

/// Inference-mode forward: normalise with the stored moving statistics.
pub fn batchnorm_infer<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    moving_mean: &Tensor<E>,
    moving_variance: &Tensor<E>,
    epsilon: f64,
) -> Result<Tensor<E>> {
    let c = channels(x, gamma, beta)?;
    if moving_mean.shape() != [c] || moving_variance.shape() != [c] {
        return Err(Error::mismatch("batchnorm moving statistics", x.shape(), moving_mean.shape()));
    }
    // Fold into a per-channel affine map.
    let eps = E::from_f64_lossy(epsilon);
    let scale: Vec<E> = (0..c)
        .map(|ch| gamma.data()[ch] / (moving_variance.data()[ch] + eps).sqrt())
        .collect();
    let shift: Vec<E> = (0..c)
        .map(|ch| beta.data()[ch] - moving_mean.data()[ch] * scale[ch])
        .collect();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        for ch in 0..c {
            out.push(row[ch] * scale[ch] + shift[ch]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Exponential moving average update of the stored statistics.
pub fn update_moving_stats<E: Element>(
    moving_mean: &mut Tensor<E>,
    moving_variance: &mut Tensor<E>,
    stats: &BatchStats,
    momentum: f64,
) {
    for (m, b) in moving_mean.data_mut().iter_mut().zip(&stats.mean) {
        *m = E::from_f64_lossy(momentum * m.as_f64() + (1.0 - momentum) * b);
    }
    for (v, b) in moving_variance.data_mut().iter_mut().zip(&stats.variance) {
        *v = E::from_f64_lossy(momentum * v.as_f64() + (1.0 - momentum) * b);
    }
}

/// Gradients w.r.t. input, gamma and beta, including the dependence of the
/// batch statistics on the input.
pub fn batchnorm_backward<E: Element>(
    grad_out: &Tensor<E>,
    cache: &BatchNormCache<E>,
    gamma: &Tensor<E>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<E>>, Tensor<E>, Tensor<E>)> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::mismatch(
            "batchnorm backward",
            cache.normalized.shape(),
            grad_out.shape(),
        ));
    }
    let c = cache.inv_std.len();
    let rows = grad_out.len() / c;
    let mut sum_dy = vec![E::zero(); c];
    let mut sum_dy_xh = vec![E::zero(); c];
    for (dy, xh) in grad_out.data().chunks(c).zip(cache.normalized.data().chunks(c)) {
        for ch in 0..c {
            sum_dy[ch] = sum_dy[ch] + dy[ch];
            sum_dy_xh[ch] = sum_dy_xh[ch] + dy[ch] * xh[ch];
        }
    }

    let grad_x = if need_input_grad {
        let m = E::from_usize(rows).expect("row count fits");
        let mut gx = Vec::with_capacity(grad_out.len());
        for (dy, xh) in grad_out.data().chunks(c).zip(cache.normalized.data().chunks(c)) {
            for ch in 0..c {
                let k = gamma.data()[ch] * cache.inv_std[ch] / m;
                gx.push(k * (m * dy[ch] - sum_dy[ch] - xh[ch] * sum_dy_xh[ch]));
            }
        }
        Some(Tensor::new(grad_out.shape().to_vec(), gx)?)
    } else {
        None
    };

    Ok((
        grad_x,
        Tensor::new(vec![c], sum_dy_xh)?,
        Tensor::new(vec![c], sum_dy)?,
    ))
}
