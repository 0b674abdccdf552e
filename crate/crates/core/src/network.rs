//! The HCR-Net graph: a VGG16-style feature extractor up to `block4_conv2`
//! followed by a batch-normalised dense classifier head.
//!
//! ```text
//! input [32, 32, 3]
//! block1: conv64 ×2, pool     block2: conv128 ×2, pool
//! block3: conv256 ×3, pool    block4: conv512 ×2
//! BN → flatten → dense512 → BN → dropout(0.35) → dense512 → BN → dropout(0.35)
//! → dense(K, softmax)
//! ```

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, Layer, LayerCache, LayerKind, Mode};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const INPUT_SIDE: usize = 32;
pub const INPUT_CHANNELS: usize = 3;
pub const DROPOUT_RATE: f64 = 0.35;
pub const DENSE_UNITS: usize = 512;
/// Last layer initialised from the pretrained backbone and frozen in phase 1.
pub const FROZEN_BOUNDARY: &str = "block4_conv2";

/// Convolution layers taken from the pretrained backbone, with their
/// input and output channel counts.
pub const BACKBONE_CONVS: [(&str, usize, usize); 9] = [
    ("block1_conv1", 3, 64),
    ("block1_conv2", 64, 64),
    ("block2_conv1", 64, 128),
    ("block2_conv2", 128, 128),
    ("block3_conv1", 128, 256),
    ("block3_conv2", 256, 256),
    ("block3_conv3", 256, 256),
    ("block4_conv1", 256, 512),
    ("block4_conv2", 512, 512),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Backbone frozen, head trained.
    One,
    /// Everything trained.
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

/// Parameter gradients keyed by `"<layer>.<slot>"`.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub entries: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Mutable view of one parameter tensor, handed to the optimiser.
pub struct ParamMut<'a> {
    pub name: String,
    pub value: &'a mut Tensor,
    /// Whether the optimiser may touch this tensor right now.
    pub trainable: bool,
}

/// One row of the layer/parameter listing.
#[derive(Debug, Clone, Serialize)]
pub struct LayerSummary {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

/// Per-layer caches from a training forward pass. Layers below the lowest
/// trainable layer hold `None`.
pub type Caches = Vec<Option<LayerCache>>;

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    num_classes: usize,
    phase: Phase,
}

/// Build the network with freshly initialised weights, in phase 1.
pub fn build_hcrnet(num_classes: usize, seed: u64) -> Result<Network> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let mut layers = Vec::with_capacity(21);
    let mut stream = 0u64;
    let mut next_seed = || {
        stream += 1;
        derive_seed(seed, stream)
    };
    for (i, &(name, cin, cout)) in BACKBONE_CONVS.iter().enumerate() {
        layers.push(Layer::conv2d(name, cin, cout, next_seed())?);
        // Pools close blocks 1-3: after conv indices 1, 3 and 6.
        let pool = match i {
            1 => Some("block1_pool"),
            3 => Some("block2_pool"),
            6 => Some("block3_pool"),
            _ => None,
        };
        if let Some(pool) = pool {
            layers.push(Layer::maxpool(pool));
        }
    }
    let flat = 4 * 4 * 512;
    layers.push(Layer::batchnorm("batch_normalization", 512)?);
    layers.push(Layer::flatten("flatten"));
    layers.push(Layer::dense("dense", flat, DENSE_UNITS, Activation::Relu, next_seed())?);
    layers.push(Layer::batchnorm("batch_normalization_1", DENSE_UNITS)?);
    layers.push(Layer::dropout("dropout", DROPOUT_RATE)?);
    layers.push(Layer::dense("dense_1", DENSE_UNITS, DENSE_UNITS, Activation::Relu, next_seed())?);
    layers.push(Layer::batchnorm("batch_normalization_2", DENSE_UNITS)?);
    layers.push(Layer::dropout("dropout_1", DROPOUT_RATE)?);
    layers.push(Layer::dense("dense_2", DENSE_UNITS, num_classes, Activation::Softmax, next_seed())?);

    let mut net = Network {
        layers,
        num_classes,
        phase: Phase::One,
    };
    net.set_phase(Phase::One);
    Ok(net)
}

impl Network {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    fn boundary_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.name == FROZEN_BOUNDARY)
            .expect("graph contains the frozen boundary layer")
    }

    /// Set trainable flags for a phase. Weights are untouched.
    pub fn set_phase(&mut self, phase: Phase) {
        let boundary = self.boundary_index();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.trainable = i > boundary || phase == Phase::Two;
        }
        self.phase = phase;
    }

    pub fn trainable_flags(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.trainable).collect()
    }

    pub fn param_count(&self) -> ParamCount {
        let total = self.layers.iter().map(Layer::param_count).sum();
        let trainable = self.layers.iter().map(Layer::trainable_param_count).sum();
        ParamCount {
            total,
            trainable,
            non_trainable: total - trainable,
        }
    }

    /// Layer/shape/parameter listing for a batch of size one.
    pub fn summary(&self) -> Result<Vec<LayerSummary>> {
        let mut shape = vec![1, INPUT_SIDE, INPUT_SIDE, INPUT_CHANNELS];
        self.layers
            .iter()
            .map(|l| {
                shape = l.output_shape(&shape)?;
                Ok(LayerSummary {
                    name: l.name.clone(),
                    kind: l.kind.type_name(),
                    output_shape: shape[1..].to_vec(),
                    params: l.param_count(),
                })
            })
            .collect()
    }

    /// Number of leading layers whose output is a fixed function of the
    /// input under the current flags: frozen, free of BatchNorm and dropout.
    /// Their activations can be computed once and reused across epochs.
    pub fn frozen_prefix(&self) -> usize {
        self.layers
            .iter()
            .take_while(|l| {
                let deterministic = matches!(
                    l.kind,
                    LayerKind::Conv2d { .. } | LayerKind::MaxPool2d | LayerKind::Flatten
                );
                deterministic && !(l.trainable && l.has_learnable_params())
            })
            .count()
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        match batch.shape() {
            [_, INPUT_SIDE, INPUT_SIDE, INPUT_CHANNELS] => Ok(()),
            s => Err(Error::mismatch(
                "network input",
                &[0, INPUT_SIDE, INPUT_SIDE, INPUT_CHANNELS],
                s,
            )),
        }
    }

    /// Inference through `range` of the layer list.
    pub fn infer_range(&self, x: &Tensor, range: Range<usize>) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers[range] {
            h = layer.infer(&h)?;
            h.ensure_finite(&layer.name)?;
        }
        Ok(h)
    }

    /// Class probabilities in inference mode.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        self.infer_range(batch, 0..self.layers.len())
    }

    /// Full forward pass. In train mode BatchNorm statistics are updated and
    /// caches are returned for [`Network::backward`].
    pub fn forward(&mut self, batch: &Tensor, mode: Mode, seed: u64) -> Result<(Tensor, Option<Caches>)> {
        self.check_input(batch)?;
        self.forward_from(0, batch.clone(), mode, seed)
    }

    /// Forward pass starting at layer `start`, whose input is `x`.
    pub fn forward_from(
        &mut self,
        start: usize,
        x: Tensor,
        mode: Mode,
        seed: u64,
    ) -> Result<(Tensor, Option<Caches>)> {
        if mode == Mode::Infer {
            return Ok((self.infer_range(&x, start..self.layers.len())?, None));
        }
        let first_learning = self.first_learning_layer(start);
        let mut caches: Caches = vec![None; self.layers.len()];
        let mut h = x;
        for i in start..self.layers.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let layer = &mut self.layers[i];
            let keep = i >= first_learning;
            let (y, cache) = layer.forward_train(h, &mut rng, keep)?;
            y.ensure_finite(&layer.name)?;
            caches[i] = cache;
            h = y;
        }
        Ok((h, Some(caches)))
    }

    fn first_learning_layer(&self, start: usize) -> usize {
        (start..self.layers.len())
            .find(|&i| self.layers[i].trainable && self.layers[i].has_learnable_params())
            .unwrap_or(self.layers.len())
    }

    /// Backpropagate the gradient w.r.t. the output logits. Only trainable
    /// learnable tensors receive gradients.
    pub fn backward(&self, caches: Caches, grad_logits: Tensor) -> Result<Gradients> {
        if caches.len() != self.layers.len() {
            return Err(Error::InvalidArgument(
                "caches do not belong to this network".into(),
            ));
        }
        let first_learning = self.first_learning_layer(0);
        let mut grads = Gradients::default();
        let mut grad = grad_logits;
        for (i, cache) in caches.into_iter().enumerate().rev() {
            if i < first_learning {
                break;
            }
            let layer = &self.layers[i];
            let cache = cache.ok_or_else(|| {
                Error::InvalidArgument(format!("missing forward cache for {}", layer.name))
            })?;
            let need_input = i > first_learning;
            let out = layer.backward(grad, cache, need_input)?;
            if layer.trainable {
                for (slot, g) in out.params {
                    grads.entries.insert(format!("{}.{}", layer.name, slot.as_str()), g);
                }
            }
            match out.input {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(grads)
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.infer(batch)?))
    }

    /// Every parameter tensor, named `"<layer>.<slot>"`.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.parameters()
                    .into_iter()
                    .map(move |(slot, t)| (format!("{}.{}", l.name, slot.as_str()), t))
            })
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let name = l.name.clone();
                let trainable = l.trainable;
                l.parameters_mut().into_iter().map(move |(slot, value)| ParamMut {
                    name: format!("{name}.{}", slot.as_str()),
                    value,
                    trainable: trainable && slot.is_learnable(),
                })
            })
            .collect()
    }
}

/// Row-wise argmax of a `[N, K]` tensor, lowest index on ties.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let k = *probs.shape().last().expect("rank >= 1");
    probs
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
