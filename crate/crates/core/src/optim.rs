//! Loss, RMSprop updates and staircase learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, ParamMut, Phase};
use crate::tensor::{Element, Tensor};

/// Probabilities are clamped to this before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Mean categorical cross-entropy over the batch, and its gradient w.r.t. the
/// softmax logits: `(probs - one_hot) / N`.
pub fn cross_entropy<E: Element>(probs: &Tensor<E>, labels: &[usize]) -> Result<(f64, Tensor<E>)> {
    let (n, k) = match probs.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::mismatch("cross entropy", &[labels.len(), 0], s)),
    };
    if labels.len() != n {
        return Err(Error::mismatch("cross entropy labels", &[n], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let scale = E::from_f64_lossy(1.0 / n as f64);
    let mut loss = 0.0f64;
    let mut grad = probs.data().to_vec();
    for (i, &label) in labels.iter().enumerate() {
        loss -= probs.data()[i * k + label].as_f64().max(LOG_CLAMP).ln();
        grad[i * k + label] = grad[i * k + label] - E::one();
    }
    grad.iter_mut().for_each(|g| *g = *g * scale);
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmspropConfig {
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        RmspropConfig {
            rho: 0.9,
            epsilon: 1e-7,
        }
    }
}

/// One RMSprop update of a single tensor.
pub fn rmsprop_update<E: Element>(
    param: &mut Tensor<E>,
    grad: &Tensor<E>,
    acc: &mut Tensor<E>,
    lr: f64,
    cfg: RmspropConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != acc.shape() {
        return Err(Error::mismatch("rmsprop", param.shape(), grad.shape()));
    }
    let rho = E::from_f64_lossy(cfg.rho);
    let one_minus_rho = E::from_f64_lossy(1.0 - cfg.rho);
    let eps = E::from_f64_lossy(cfg.epsilon);
    let lr = E::from_f64_lossy(lr);
    for ((p, &g), a) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(acc.data_mut())
    {
        *a = rho * *a + one_minus_rho * g * g;
        *p = *p - lr * g / (a.sqrt() + eps);
    }
    Ok(())
}

/// Accumulators of squared gradients, one per trainable tensor, created
/// lazily at zero.
#[derive(Debug, Clone, Default)]
pub struct RmspropState {
    pub config: RmspropConfig,
    accumulators: BTreeMap<String, Tensor>,
}

impl RmspropState {
    pub fn new(config: RmspropConfig) -> Self {
        RmspropState {
            config,
            accumulators: BTreeMap::new(),
        }
    }

    pub fn accumulator(&self, name: &str) -> Option<&Tensor> {
        self.accumulators.get(name)
    }

    /// Apply `grads` to every parameter flagged trainable. Non-trainable
    /// tensors are never written, even when a gradient is supplied.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = ParamMut<'a>>,
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        for p in params {
            if !p.trainable {
                continue;
            }
            let Some(grad) = grads.get(&p.name) else {
                continue;
            };
            let acc = self
                .accumulators
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros_like(p.value));
            rmsprop_update(p.value, grad, acc, lr, self.config)?;
            p.value.ensure_finite(&p.name)?;
        }
        Ok(())
    }
}

/// Epoch-indexed piecewise-constant learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseSchedule {
    breakpoints: Vec<(usize, f64)>,
    total_epochs: usize,
}

impl StaircaseSchedule {
    pub fn new(breakpoints: Vec<(usize, f64)>, total_epochs: usize) -> Result<Self> {
        let invalid = |why: &str| Err(Error::InvalidArgument(format!("schedule: {why}")));
        if total_epochs == 0 {
            return invalid("total epochs must be positive");
        }
        match breakpoints.first() {
            Some((0, _)) => {}
            _ => return invalid("first breakpoint must start at epoch 0"),
        }
        if breakpoints.windows(2).any(|w| w[0].0 >= w[1].0) {
            return invalid("breakpoints must be strictly increasing");
        }
        if breakpoints.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return invalid("learning rates must be positive");
        }
        Ok(StaircaseSchedule {
            breakpoints,
            total_epochs,
        })
    }

    pub fn constant(lr: f64, total_epochs: usize) -> Result<Self> {
        Self::new(vec![(0, lr)], total_epochs)
    }

    pub fn breakpoints(&self) -> &[(usize, f64)] {
        &self.breakpoints
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    /// Rate of the last breakpoint starting at or before `epoch`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        Ok(self
            .breakpoints
            .iter()
            .rev()
            .find(|(start, _)| *start <= epoch)
            .map(|&(_, lr)| lr)
            .expect("first breakpoint is at epoch 0"))
    }
}

pub const PHASE1_WARMUP_LR: f64 = 1e-4;
pub const PHASE1_LR: f64 = 5e-5;
pub const PHASE2_WARMUP_LR: f64 = 1e-7;
pub const PHASE2_LR: f64 = 5e-6;
pub const PHASE2_FINAL_LR: f64 = 1e-6;
/// Length of the phase-1 high-rate stretch and of both phase-2 end segments.
pub const SCHEDULE_SEGMENT: usize = 5;

/// The standard schedule for a phase. Phase 1: 1e-4 for five epochs, then
/// 5e-5. Phase 2: 1e-7 for five epochs, 5e-6 in the middle, 1e-6 for the
/// last five.
pub fn default_schedule(phase: Phase, total_epochs: usize) -> Result<StaircaseSchedule> {
    match phase {
        Phase::One => {
            let mut points = vec![(0, PHASE1_WARMUP_LR)];
            if total_epochs > SCHEDULE_SEGMENT {
                points.push((SCHEDULE_SEGMENT, PHASE1_LR));
            }
            StaircaseSchedule::new(points, total_epochs)
        }
        Phase::Two => {
            if total_epochs < 2 * SCHEDULE_SEGMENT + 1 {
                return Err(Error::InvalidArgument(format!(
                    "phase 2 schedule needs at least {} epochs, got {total_epochs}",
                    2 * SCHEDULE_SEGMENT + 1
                )));
            }
            StaircaseSchedule::new(
                vec![
                    (0, PHASE2_WARMUP_LR),
                    (SCHEDULE_SEGMENT, PHASE2_LR),
                    (total_epochs - SCHEDULE_SEGMENT, PHASE2_FINAL_LR),
                ],
                total_epochs,
            )
        }
    }
}
