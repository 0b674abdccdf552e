//! Layer kinds used by HCR-Net with hand-written forward and backward passes.
//!
//! The free functions in the submodules are the numeric kernels. [`Layer`]
//! wraps them with parameters, a fused output activation and a trainable
//! flag, and is what the network stores.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod norm;
pub mod pool;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Fill, Tensor};

pub use activation::{relu, relu_backward, softmax, Activation};
pub use conv::{conv2d, conv2d_backward, ConvGrads};
pub use dense::{dense, dense_backward};
pub use dropout::{apply_mask, dropout_mask};
pub use norm::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, update_moving_stats, BatchNormCache,
    BatchStats, BN_EPSILON, BN_MOMENTUM,
};
pub use pool::{maxpool2d, maxpool2d_backward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// Named parameter tensors a layer may own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
    MovingMean,
    MovingVariance,
}

impl ParamSlot {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamSlot::Weight => "weight",
            ParamSlot::Bias => "bias",
            ParamSlot::Gamma => "gamma",
            ParamSlot::Beta => "beta",
            ParamSlot::MovingMean => "moving_mean",
            ParamSlot::MovingVariance => "moving_variance",
        }
    }

    /// Moving statistics are tracked, never learned.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamSlot::MovingMean | ParamSlot::MovingVariance)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormParams<E: Element = f32> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub moving_mean: Tensor<E>,
    pub moving_variance: Tensor<E>,
}

#[derive(Debug, Clone)]
pub enum LayerKind<E: Element = f32> {
    Conv2d { weight: Tensor<E>, bias: Tensor<E> },
    MaxPool2d,
    BatchNorm(BatchNormParams<E>),
    Flatten,
    Dense { weight: Tensor<E>, bias: Tensor<E> },
    Dropout { rate: f64 },
}

impl<E: Element> LayerKind<E> {
    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "Conv2D",
            LayerKind::MaxPool2d => "MaxPooling2D",
            LayerKind::BatchNorm(_) => "BatchNormalization",
            LayerKind::Flatten => "Flatten",
            LayerKind::Dense { .. } => "Dense",
            LayerKind::Dropout { .. } => "Dropout",
        }
    }
}

/// Forward-pass intermediates needed by [`Layer::backward`].
#[derive(Debug, Clone)]
pub struct LayerCache<E: Element = f32> {
    op: OpCache<E>,
    /// Post-activation output, kept for the ReLU mask.
    activated: Option<Tensor<E>>,
}

#[derive(Debug, Clone)]
enum OpCache<E: Element> {
    Conv2d { input: Tensor<E> },
    MaxPool2d { input_shape: Vec<usize>, argmax: Vec<u32> },
    BatchNorm(BatchNormCache<E>),
    Flatten { input_shape: Vec<usize> },
    Dense { input: Tensor<E> },
    Dropout { mask: Vec<E> },
}

/// Result of [`Layer::backward`].
#[derive(Debug, Clone)]
pub struct LayerGrads<E: Element = f32> {
    pub input: Option<Tensor<E>>,
    pub params: Vec<(ParamSlot, Tensor<E>)>,
}

#[derive(Debug, Clone)]
pub struct Layer<E: Element = f32> {
    pub name: String,
    pub kind: LayerKind<E>,
    pub activation: Activation,
    pub trainable: bool,
}

impl<E: Element> Layer<E> {
    pub fn conv2d(name: &str, cin: usize, cout: usize, seed: u64) -> Result<Self> {
        Ok(Layer {
            name: name.to_string(),
            kind: LayerKind::Conv2d {
                weight: Tensor::create(&[3, 3, cin, cout], Fill::HeUniform { seed })?,
                bias: Tensor::zeros(&[cout])?,
            },
            activation: Activation::Relu,
            trainable: true,
        })
    }

    pub fn dense(name: &str, inputs: usize, units: usize, activation: Activation, seed: u64) -> Result<Self> {
        Ok(Layer {
            name: name.to_string(),
            kind: LayerKind::Dense {
                weight: Tensor::create(&[inputs, units], Fill::GlorotUniform { seed })?,
                bias: Tensor::zeros(&[units])?,
            },
            activation,
            trainable: true,
        })
    }

    pub fn batchnorm(name: &str, channels: usize) -> Result<Self> {
        Ok(Layer {
            name: name.to_string(),
            kind: LayerKind::BatchNorm(BatchNormParams {
                gamma: Tensor::full(&[channels], 1.0)?,
                beta: Tensor::zeros(&[channels])?,
                moving_mean: Tensor::zeros(&[channels])?,
                moving_variance: Tensor::full(&[channels], 1.0)?,
            }),
            activation: Activation::Linear,
            trainable: true,
        })
    }

    pub fn maxpool(name: &str) -> Self {
        Self::parameterless(name, LayerKind::MaxPool2d)
    }

    pub fn flatten(name: &str) -> Self {
        Self::parameterless(name, LayerKind::Flatten)
    }

    pub fn dropout(name: &str, rate: f64) -> Result<Self> {
        dropout::check_rate(rate)?;
        Ok(Self::parameterless(name, LayerKind::Dropout { rate }))
    }

    fn parameterless(name: &str, kind: LayerKind<E>) -> Self {
        Layer {
            name: name.to_string(),
            kind,
            activation: Activation::Linear,
            trainable: true,
        }
    }

    /// All parameter tensors, learnable or not, in a fixed slot order.
    pub fn parameters(&self) -> Vec<(ParamSlot, &Tensor<E>)> {
        match &self.kind {
            LayerKind::Conv2d { weight, bias } | LayerKind::Dense { weight, bias } => {
                vec![(ParamSlot::Weight, weight), (ParamSlot::Bias, bias)]
            }
            LayerKind::BatchNorm(p) => vec![
                (ParamSlot::Gamma, &p.gamma),
                (ParamSlot::Beta, &p.beta),
                (ParamSlot::MovingMean, &p.moving_mean),
                (ParamSlot::MovingVariance, &p.moving_variance),
            ],
            _ => Vec::new(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<(ParamSlot, &mut Tensor<E>)> {
        match &mut self.kind {
            LayerKind::Conv2d { weight, bias } | LayerKind::Dense { weight, bias } => {
                vec![(ParamSlot::Weight, weight), (ParamSlot::Bias, bias)]
            }
            LayerKind::BatchNorm(p) => vec![
                (ParamSlot::Gamma, &mut p.gamma),
                (ParamSlot::Beta, &mut p.beta),
                (ParamSlot::MovingMean, &mut p.moving_mean),
                (ParamSlot::MovingVariance, &mut p.moving_variance),
            ],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters the optimiser may update given the current flag.
    pub fn trainable_param_count(&self) -> usize {
        if !self.trainable {
            return 0;
        }
        self.parameters()
            .iter()
            .filter(|(slot, _)| slot.is_learnable())
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn has_learnable_params(&self) -> bool {
        self.parameters().iter().any(|(slot, _)| slot.is_learnable())
    }

    /// Output shape for a given input shape (batch dimension included).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |reason: &str| Error::InvalidShape {
            shape: input.to_vec(),
            reason: format!("{}: {reason}", self.name),
        };
        match (&self.kind, input) {
            (LayerKind::Conv2d { weight, .. }, [n, h, w, c]) if weight.shape()[2] == *c => {
                Ok(vec![*n, *h, *w, weight.shape()[3]])
            }
            (LayerKind::MaxPool2d, [n, h, w, c]) if h % 2 == 0 && w % 2 == 0 => {
                Ok(vec![*n, h / 2, w / 2, *c])
            }
            (LayerKind::BatchNorm(p), [.., c]) if *c == p.gamma.len() => Ok(input.to_vec()),
            (LayerKind::Flatten, [n, rest @ ..]) if !rest.is_empty() => {
                Ok(vec![*n, rest.iter().product()])
            }
            (LayerKind::Dense { weight, .. }, [n, d]) if *d == weight.shape()[0] => {
                Ok(vec![*n, weight.shape()[1]])
            }
            (LayerKind::Dropout { .. }, _) => Ok(input.to_vec()),
            _ => Err(bad("incompatible input")),
        }
    }

    /// Inference forward pass; never mutates the layer.
    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = match &self.kind {
            LayerKind::Conv2d { weight, bias } => conv2d(x, weight, bias)?,
            LayerKind::MaxPool2d => maxpool2d(x)?.0,
            LayerKind::BatchNorm(p) => batchnorm_infer(
                x,
                &p.gamma,
                &p.beta,
                &p.moving_mean,
                &p.moving_variance,
                BN_EPSILON,
            )?,
            LayerKind::Flatten => {
                let shape = self.output_shape(x.shape())?;
                x.clone().reshape(&shape)?
            }
            LayerKind::Dense { weight, bias } => dense(x, weight, bias)?,
            LayerKind::Dropout { .. } => x.clone(),
        };
        self.activate(y)
    }

    /// Training forward pass. Updates BatchNorm moving statistics and draws
    /// dropout masks from `rng`. The cache is only built when `keep_cache`.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        x: Tensor<E>,
        rng: &mut R,
        keep_cache: bool,
    ) -> Result<(Tensor<E>, Option<LayerCache<E>>)> {
        let (y, op) = match &mut self.kind {
            LayerKind::Conv2d { weight, bias } => {
                let y = conv2d(&x, weight, bias)?;
                (y, OpCache::Conv2d { input: x })
            }
            LayerKind::MaxPool2d => {
                let (y, argmax) = maxpool2d(&x)?;
                (
                    y,
                    OpCache::MaxPool2d {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    },
                )
            }
            LayerKind::BatchNorm(p) => {
                let (y, cache, stats) = batchnorm_train(&x, &p.gamma, &p.beta, BN_EPSILON)?;
                update_moving_stats(&mut p.moving_mean, &mut p.moving_variance, &stats, BN_MOMENTUM);
                (y, OpCache::BatchNorm(cache))
            }
            LayerKind::Flatten => {
                let input_shape = x.shape().to_vec();
                let shape = self.output_shape(&input_shape)?;
                (x.reshape(&shape)?, OpCache::Flatten { input_shape })
            }
            LayerKind::Dense { weight, bias } => {
                let y = dense(&x, weight, bias)?;
                (y, OpCache::Dense { input: x })
            }
            LayerKind::Dropout { rate } => {
                let mask = dropout_mask(x.len(), *rate, rng)?;
                (apply_mask(&x, &mask)?, OpCache::Dropout { mask })
            }
        };
        let y = self.activate(y)?;
        let cache = keep_cache.then(|| LayerCache {
            op,
            activated: (self.activation == Activation::Relu).then(|| y.clone()),
        });
        Ok((y, cache))
    }

    fn activate(&self, y: Tensor<E>) -> Result<Tensor<E>> {
        match self.activation {
            Activation::Linear => Ok(y),
            Activation::Relu => Ok(relu(&y)),
            Activation::Softmax => softmax(&y),
        }
    }

    /// Backward pass from the gradient w.r.t. this layer's output.
    ///
    /// For a softmax layer `grad_out` must already be the gradient w.r.t. the
    /// logits (see [`crate::optim::cross_entropy`]).
    pub fn backward(
        &self,
        grad_out: Tensor<E>,
        cache: LayerCache<E>,
        need_input_grad: bool,
    ) -> Result<LayerGrads<E>> {
        let grad = match (self.activation, &cache.activated) {
            (Activation::Relu, Some(y)) => relu_backward(&grad_out, y)?,
            (Activation::Relu, None) => {
                return Err(Error::InvalidArgument(format!(
                    "{}: cache lacks the activation output",
                    self.name
                )))
            }
            _ => grad_out,
        };
        let mismatch = || {
            Error::InvalidArgument(format!(
                "{}: cache was not produced by a {} layer",
                self.name,
                self.kind.type_name()
            ))
        };
        let grads = match (&self.kind, cache.op) {
            (LayerKind::Conv2d { weight, .. }, OpCache::Conv2d { input }) => {
                let g = conv2d_backward(&grad, &input, weight, need_input_grad)?;
                LayerGrads {
                    input: g.input,
                    params: vec![(ParamSlot::Weight, g.weight), (ParamSlot::Bias, g.bias)],
                }
            }
            (LayerKind::MaxPool2d, OpCache::MaxPool2d { input_shape, argmax }) => LayerGrads {
                input: need_input_grad
                    .then(|| maxpool2d_backward(&grad, &input_shape, &argmax))
                    .transpose()?,
                params: Vec::new(),
            },
            (LayerKind::BatchNorm(p), OpCache::BatchNorm(cache)) => {
                let (gx, gg, gb) = batchnorm_backward(&grad, &cache, &p.gamma, need_input_grad)?;
                LayerGrads {
                    input: gx,
                    params: vec![(ParamSlot::Gamma, gg), (ParamSlot::Beta, gb)],
                }
            }
            (LayerKind::Flatten, OpCache::Flatten { input_shape }) => LayerGrads {
                input: need_input_grad.then(|| grad.reshape(&input_shape)).transpose()?,
                params: Vec::new(),
            },
            (LayerKind::Dense { weight, .. }, OpCache::Dense { input }) => {
                let (gx, gw, gb) = dense_backward(&grad, &input, weight, need_input_grad)?;
                LayerGrads {
                    input: gx,
                    params: vec![(ParamSlot::Weight, gw), (ParamSlot::Bias, gb)],
                }
            }
            (LayerKind::Dropout { .. }, OpCache::Dropout { mask }) => LayerGrads {
                input: need_input_grad.then(|| apply_mask(&grad, &mask)).transpose()?,
                params: Vec::new(),
            },
            _ => return Err(mismatch()),
        };
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_kinds() -> Vec<(Layer<f64>, Vec<usize>)> {
        vec![
            (Layer::conv2d("c", 2, 3, 1).unwrap(), vec![2, 4, 4, 2]),
            (Layer::maxpool("p"), vec![2, 4, 4, 2]),
            (Layer::batchnorm("b", 3).unwrap(), vec![4, 3]),
            (Layer::flatten("f"), vec![2, 2, 2, 3]),
            (Layer::dense("d", 5, 3, Activation::Relu, 2).unwrap(), vec![2, 5]),
            (Layer::dropout("o", 0.35).unwrap(), vec![3, 6]),
        ]
    }

    #[test]
    fn parameter_counts_follow_shapes() {
        let conv = Layer::<f32>::conv2d("block1_conv1", 3, 64, 0).unwrap();
        assert_eq!(conv.param_count(), 1792);
        let bn = Layer::<f32>::batchnorm("batch_normalization", 512).unwrap();
        assert_eq!(bn.param_count(), 2048);
        assert_eq!(bn.trainable_param_count(), 1024);
        let d = Layer::<f32>::dense("dense", 8192, 512, Activation::Relu, 0).unwrap();
        assert_eq!(d.param_count(), 4_194_816);
        let out = Layer::<f32>::dense("dense_2", 512, 10, Activation::Softmax, 0).unwrap();
        assert_eq!(out.param_count(), 5130);
    }

    #[test]
    fn backward_of_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (mut layer, shape) in all_kinds() {
            let x = Tensor::<f64>::create(&shape, Fill::Uniform { lo: -1.0, hi: 1.0, seed: 5 }).unwrap();
            let (y, cache) = layer.forward_train(x, &mut rng, true).unwrap();
            let grads = layer
                .backward(Tensor::zeros_like(&y), cache.unwrap(), true)
                .unwrap();
            assert!(grads.input.unwrap().data().iter().all(|&v| v == 0.0), "{}", layer.name);
            for (_, g) in grads.params {
                assert!(g.data().iter().all(|&v| v == 0.0), "{}", layer.name);
            }
        }
    }

    #[test]
    fn dropout_inference_is_identity() {
        let layer = Layer::<f32>::dropout("d", 0.35).unwrap();
        let x = Tensor::create(&[4, 8], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 1 }).unwrap();
        assert_eq!(layer.infer(&x).unwrap(), x);
        let mut keep_all = Layer::<f32>::dropout("d", 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(keep_all.forward_train(x.clone(), &mut rng, false).unwrap().0, x);
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pool = Layer::<f64>::maxpool("p");
        let x = Tensor::zeros(&[1, 2, 2, 1]).unwrap();
        let (_, cache) = pool.forward_train(x, &mut rng, true).unwrap();
        let dense = Layer::<f64>::dense("d", 1, 1, Activation::Linear, 0).unwrap();
        let g = Tensor::zeros(&[1, 1]).unwrap();
        assert!(dense.backward(g, cache.unwrap(), true).is_err());
    }

    #[test]
    fn output_shapes() {
        for (layer, shape) in all_kinds() {
            let x = Tensor::<f64>::zeros(&shape).unwrap();
            let y = layer.infer(&x).unwrap();
            assert_eq!(y.shape(), layer.output_shape(&shape).unwrap().as_slice());
        }
    }
}
