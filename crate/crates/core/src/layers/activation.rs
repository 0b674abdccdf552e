use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Activation applied to a layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    /// Row-wise softmax. Its gradient is only available fused with the
    /// cross-entropy loss, which hands back the gradient w.r.t. the logits.
    Softmax,
}

pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v.max(E::zero()))
}

/// Pass the gradient where the activation was positive.
pub fn relu_backward<E: Element>(grad_out: &Tensor<E>, output: &Tensor<E>) -> Result<Tensor<E>> {
    if grad_out.shape() != output.shape() {
        return Err(Error::mismatch("relu backward", output.shape(), grad_out.shape()));
    }
    Tensor::new(
        grad_out.shape().to_vec(),
        grad_out
            .data()
            .iter()
            .zip(output.data())
            .map(|(&g, &y)| if y > E::zero() { g } else { E::zero() })
            .collect(),
    )
}

/// Row-wise softmax over the last axis of a `[N, K]` tensor.
pub fn softmax<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let k = match x.shape() {
        [_, k] => *k,
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "softmax expects [N, K]".into(),
            })
        }
    };
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(k) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let start = out.len();
        let mut total = E::zero();
        for &v in row {
            let e = (v - max).exp();
            total = total + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
