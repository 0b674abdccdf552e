//! 2×2 max pooling with stride 2 and valid padding.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Forward pooling. Returns the pooled tensor and, for every output element,
/// the flat input index that produced it (first maximum in scan order).
pub fn maxpool2d<E: Element>(x: &Tensor<E>) -> Result<(Tensor<E>, Vec<u32>)> {
    let [n, h, w, c] = match x.shape() {
        [n, h, w, c] => [*n, *h, *w, *c],
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "max pooling expects an NHWC tensor".into(),
            })
        }
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "max pooling needs even spatial dimensions".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for s in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((s * h + 2 * i) * w + 2 * j) * c + ch;
                    let mut best = data[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((s * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, oh, ow, c], out)?, argmax))
}

/// Route each output gradient to the input position that won the max.
pub fn maxpool2d_backward<E: Element>(
    grad_out: &Tensor<E>,
    input_shape: &[usize],
    argmax: &[u32],
) -> Result<Tensor<E>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::mismatch(
            "maxpool backward",
            &[argmax.len()],
            grad_out.shape(),
        ));
    }
    let mut grad = Tensor::zeros(input_shape)?;
    let buf = grad.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        buf[idx as usize] = buf[idx as usize] + g;
    }
    Ok(grad)
}
