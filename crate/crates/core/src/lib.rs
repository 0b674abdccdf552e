//! HCR-Net: a script-independent handwritten character recognition network.
//!
//! The crate covers the full pipeline from raw data to evaluated models:
//!
//! - [`tensor`]: dense `f32`/`f64` tensors and the GEMM-backed kernel.
//! - [`layers`]: convolution, pooling, batch normalisation, dense, dropout and
//!   activations with hand-written backward passes.
//! - [`network`]: the HCR-Net graph, phase-dependent freezing, inference.
//! - [`optim`]: cross-entropy, RMSprop and staircase learning-rate schedules.
//! - [`augment`]: random affine augmentation of training images.
//! - [`data`]: IDX archives, image directories and pen-stroke logs.
//! - [`weights`]: the `HCRW` weight archive, checkpoints and pretrained import.
//! - [`trainer`]: two-phase training, metrics and misclassification analysis.

pub mod augment;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use network::{build_hcrnet, Network, ParamCount, Phase};
pub use tensor::{Element, Fill, Tensor};
