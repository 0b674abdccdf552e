//! Two-phase training, evaluation, multi-run experiments and
//! misclassification analysis.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentConfig};
use crate::data::{save_png, LabeledDataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::{evaluate_predictions, ClassMetrics, ConfusionMatrix, Evaluation};
use crate::network::{argmax_rows, build_hcrnet, Network, Phase};
use crate::optim::{cross_entropy, default_schedule, RmspropConfig, RmspropState, StaircaseSchedule};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::weights::{init_from_pretrained, WeightArchive};

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_EPOCHS: (usize, usize) = (30, 20);
pub const AUGMENTED_EPOCHS: (usize, usize) = (10, 50);
/// Samples per inference chunk during evaluation.
const EVAL_CHUNK: usize = 256;
/// Largest cached trunk activation (in floats) before falling back to
/// recomputing the frozen layers every batch.
const FEATURE_CACHE_LIMIT: usize = 1 << 28;

// Seed streams hanging off the plan seed.
const STREAM_SHUFFLE: u64 = 1 << 32;
const STREAM_STEP: u64 = 2 << 32;
const STREAM_AUGMENT: u64 = 3 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub augmentation: AugmentConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Replaces the standard phase-1 schedule when set.
    pub schedule_phase1: Option<StaircaseSchedule>,
    /// Replaces the standard phase-2 schedule when set.
    pub schedule_phase2: Option<StaircaseSchedule>,
    pub rmsprop: RmspropConfig,
}

impl PhasePlan {
    /// Standard plan: 30/20 epochs, or 10/50 when augmentation is enabled.
    pub fn new(augmentation: AugmentConfig, seed: u64) -> Self {
        let (epochs_phase1, epochs_phase2) = if augmentation.enabled {
            AUGMENTED_EPOCHS
        } else {
            DEFAULT_EPOCHS
        };
        PhasePlan {
            epochs_phase1,
            epochs_phase2,
            augmentation,
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
            schedule_phase1: None,
            schedule_phase2: None,
            rmsprop: RmspropConfig::default(),
        }
    }

    /// Schedule for one phase, checked against that phase's epoch count.
    pub fn schedule(&self, phase: Phase) -> Result<StaircaseSchedule> {
        let (custom, epochs) = match phase {
            Phase::One => (&self.schedule_phase1, self.epochs_phase1),
            Phase::Two => (&self.schedule_phase2, self.epochs_phase2),
        };
        match custom {
            Some(s) if s.total_epochs() != epochs => Err(Error::InvalidArgument(format!(
                "{phase:?} schedule covers {} epochs but the plan has {epochs}",
                s.total_epochs()
            ))),
            Some(s) => Ok(s.clone()),
            None => default_schedule(phase, epochs),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        self.augmentation.validate()?;
        if self.epochs_phase1 > 0 {
            self.schedule(Phase::One)?;
        }
        if self.epochs_phase2 > 0 {
            self.schedule(Phase::Two)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based across both phases.
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Test accuracy of the final model; the headline number.
    pub accuracy_last_epoch: f64,
    /// Highest per-epoch test accuracy seen; reported alongside, never instead.
    pub accuracy_best: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

/// One RMSprop step on a batch. `start` is the first layer to run; when it
/// is non-zero `batch` holds that layer's input (cached trunk features).
pub fn train_step_from(
    net: &mut Network,
    opt: &mut RmspropState,
    start: usize,
    batch: Tensor,
    labels: &[usize],
    lr: f64,
    seed: u64,
) -> Result<StepOutcome> {
    let (probs, caches) = net.forward_from(start, batch, Mode::Train, seed)?;
    let (loss, grad) = cross_entropy(&probs, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    let correct = argmax_rows(&probs)
        .iter()
        .zip(labels)
        .filter(|(p, t)| p == t)
        .count();
    let grads = net.backward(caches.expect("train mode returns caches"), grad)?;
    opt.step(net.parameters_mut(), &grads, lr)?;
    Ok(StepOutcome { loss, correct })
}

/// One RMSprop step on a `[N, 32, 32, 3]` batch.
pub fn train_step(
    net: &mut Network,
    opt: &mut RmspropState,
    batch: &Tensor,
    labels: &[usize],
    lr: f64,
    seed: u64,
) -> Result<StepOutcome> {
    if !matches!(batch.shape(), [_, 32, 32, 3]) {
        return Err(Error::mismatch("training batch", &[0, 32, 32, 3], batch.shape()));
    }
    train_step_from(net, opt, 0, batch.clone(), labels, lr, seed)
}

/// Inputs to the first non-cached layer: either raw images or trunk
/// activations computed once.
struct Inputs {
    start: usize,
    data: Vec<f32>,
    sample_shape: Vec<usize>,
}

impl Inputs {
    fn raw(d: &LabeledDataset) -> Self {
        Inputs {
            start: 0,
            data: d.images().iter().flat_map(|t| t.data().iter().copied()).collect(),
            sample_shape: vec![32, 32, 3],
        }
    }

    fn prepare(net: &Network, d: &LabeledDataset, prefix: usize) -> Result<Self> {
        let out_shape = net
            .layers()
            .iter()
            .take(prefix)
            .try_fold(vec![1, 32, 32, 3], |s, l| l.output_shape(&s))?;
        let per: usize = out_shape[1..].iter().product();
        if prefix == 0 || per * d.len() > FEATURE_CACHE_LIMIT {
            return Ok(Self::raw(d));
        }
        let mut data = Vec::with_capacity(per * d.len());
        let all: Vec<usize> = (0..d.len()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let (x, _) = d.batch(chunk)?;
            data.extend_from_slice(net.infer_range(&x, 0..prefix)?.data());
        }
        Ok(Inputs {
            start: prefix,
            data,
            sample_shape: out_shape[1..].to_vec(),
        })
    }

    fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let per: usize = self.sample_shape.iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data)
    }

    fn len(&self) -> usize {
        self.data.len() / self.sample_shape.iter().product::<usize>()
    }

    /// Inference-mode class probabilities for every sample, row-major `[N, K]`.
    fn probabilities(&self, net: &Network) -> Result<Vec<f32>> {
        let all: Vec<usize> = (0..self.len()).collect();
        let mut out = Vec::with_capacity(all.len() * net.num_classes());
        for chunk in all.chunks(EVAL_CHUNK) {
            let x = self.gather(chunk)?;
            out.extend_from_slice(net.infer_range(&x, self.start..net.layers().len())?.data());
        }
        Ok(out)
    }
}

fn check_dataset(net: &Network, d: &LabeledDataset, what: &str) -> Result<()> {
    if d.is_empty() {
        return Err(Error::Dataset(format!("{what} set is empty")));
    }
    if d.num_classes() != net.num_classes() {
        return Err(Error::Dataset(format!(
            "{what} set has {} classes but the network has {}",
            d.num_classes(),
            net.num_classes()
        )));
    }
    Ok(())
}

fn predictions(probs: &[f32], k: usize) -> Vec<usize> {
    probs
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

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    correct as f64 / truth.len() as f64
}

/// Inference-mode class probabilities `[N, K]` for a whole dataset.
pub fn predict_probabilities(net: &Network, d: &LabeledDataset) -> Result<Tensor> {
    let probs = Inputs::raw(d).probabilities(net)?;
    Tensor::new(vec![d.len(), net.num_classes()], probs)
}

/// Metrics of the network on a labelled set, inference mode.
pub fn evaluate(net: &Network, test: &LabeledDataset) -> Result<Evaluation> {
    check_dataset(net, test, "test")?;
    let probs = predict_probabilities(net, test)?;
    evaluate_predictions(test.labels(), &argmax_rows(&probs), net.num_classes())
}

/// Run both phases of `plan` and return the final-epoch metrics. The model
/// in `net` is the final-epoch model, not the best-epoch one.
pub fn train(net: &mut Network, train_set: &LabeledDataset, test_set: &LabeledDataset, plan: &PhasePlan) -> Result<MetricsReport> {
    train_with_observer(net, train_set, test_set, plan, &mut |_| {})
}

/// [`train`], calling `observer` after every epoch.
pub fn train_with_observer(
    net: &mut Network,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    plan: &PhasePlan,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<MetricsReport> {
    plan.validate()?;
    check_dataset(net, train_set, "training")?;
    check_dataset(net, test_set, "test")?;
    let k = net.num_classes();
    let mut history = Vec::new();
    let mut global_epoch = 0usize;

    for (phase, epochs) in [(Phase::One, plan.epochs_phase1), (Phase::Two, plan.epochs_phase2)] {
        if epochs == 0 {
            continue;
        }
        net.set_phase(phase);
        let schedule = plan.schedule(phase)?;
        let mut opt = RmspropState::new(plan.rmsprop);
        // Frozen leading layers are a fixed map of the input unless the
        // input itself changes every epoch.
        let prefix = if plan.augmentation.enabled { 0 } else { net.frozen_prefix() };
        let train_inputs = Inputs::prepare(net, train_set, prefix)?;
        let test_inputs = Inputs::prepare(net, test_set, prefix)?;

        for phase_epoch in 0..epochs {
            let lr = schedule.lr_at(phase_epoch)?;
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, STREAM_SHUFFLE + global_epoch as u64));
            order.shuffle(&mut rng);
            let step_base = derive_seed(plan.seed, STREAM_STEP + global_epoch as u64);
            let augment_base = derive_seed(plan.seed, STREAM_AUGMENT + global_epoch as u64);

            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for (b, chunk) in order.chunks(plan.batch_size).enumerate() {
                let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels()[i]).collect();
                let mut x = train_inputs.gather(chunk)?;
                if plan.augmentation.enabled {
                    x = augment_batch(&x, &plan.augmentation, derive_seed(augment_base, b as u64))?;
                }
                let out = train_step_from(
                    net,
                    &mut opt,
                    train_inputs.start,
                    x,
                    &labels,
                    lr,
                    derive_seed(step_base, b as u64),
                )?;
                loss_sum += out.loss * chunk.len() as f64;
                correct += out.correct;
            }

            let test_pred = predictions(&test_inputs.probabilities(net)?, k);
            global_epoch += 1;
            let record = EpochRecord {
                epoch: global_epoch,
                phase: if phase == Phase::One { 1 } else { 2 },
                lr,
                train_loss: loss_sum / train_set.len() as f64,
                train_acc: correct as f64 / train_set.len() as f64,
                test_acc: accuracy(&test_pred, test_set.labels()),
            };
            observer(&record);
            history.push(record);
        }
    }

    let final_eval = evaluate(net, test_set)?;
    let accuracy_best = history
        .iter()
        .map(|r| r.test_acc)
        .fold(final_eval.accuracy, f64::max);
    Ok(MetricsReport {
        accuracy_last_epoch: final_eval.accuracy,
        accuracy_best,
        macro_precision: final_eval.macro_precision,
        macro_recall: final_eval.macro_recall,
        macro_f1: final_eval.macro_f1,
        per_class: final_eval.per_class,
        confusion: final_eval.confusion,
        history,
    })
}

/// How per-run seeds are chosen in [`run_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunSeeds {
    /// Run `r` uses `derive_seed(master, r)` for both initialisation and plan.
    Derived(u64),
    /// Every run uses the same seed.
    Fixed(u64),
}

impl RunSeeds {
    pub fn seed_for(self, run: usize) -> u64 {
        match self {
            RunSeeds::Derived(master) => derive_seed(master, run as u64),
            RunSeeds::Fixed(seed) => seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Spread { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochBand {
    pub epoch: usize,
    pub train_loss: Spread,
    pub train_acc: Spread,
    pub test_acc: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<MetricsReport>,
    pub accuracy_last_epoch: Spread,
    pub accuracy_best: Spread,
    pub macro_precision: Spread,
    pub macro_recall: Spread,
    pub macro_f1: Spread,
    pub epochs: Vec<EpochBand>,
}

/// Train `runs` fresh networks and aggregate their metrics.
pub fn run_experiment(
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    plan: &PhasePlan,
    runs: usize,
    seeds: RunSeeds,
    pretrained: Option<&WeightArchive>,
) -> Result<ExperimentReport> {
    if runs == 0 {
        return Err(Error::InvalidArgument("need at least one run".into()));
    }
    let mut reports = Vec::with_capacity(runs);
    let mut used = Vec::with_capacity(runs);
    for r in 0..runs {
        let seed = seeds.seed_for(r);
        let mut net = build_hcrnet(train_set.num_classes(), seed)?;
        if let Some(archive) = pretrained {
            init_from_pretrained(&mut net, archive)?;
        }
        let run_plan = PhasePlan { seed, ..plan.clone() };
        reports.push(train(&mut net, train_set, test_set, &run_plan)?);
        used.push(seed);
    }
    let spread = |f: fn(&MetricsReport) -> f64| Spread::of(&reports.iter().map(f).collect::<Vec<_>>());
    let epochs = (0..reports[0].history.len())
        .map(|e| {
            let field = |f: fn(&EpochRecord) -> f64| {
                Spread::of(&reports.iter().map(|r| f(&r.history[e])).collect::<Vec<_>>())
            };
            EpochBand {
                epoch: e + 1,
                train_loss: field(|h| h.train_loss),
                train_acc: field(|h| h.train_acc),
                test_acc: field(|h| h.test_acc),
            }
        })
        .collect();
    Ok(ExperimentReport {
        seeds: used,
        accuracy_last_epoch: spread(|r| r.accuracy_last_epoch),
        accuracy_best: spread(|r| r.accuracy_best),
        macro_precision: spread(|r| r.macro_precision),
        macro_recall: spread(|r| r.macro_recall),
        macro_f1: spread(|r| r.macro_f1),
        runs: reports,
        epochs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Misclassified {
    pub index: usize,
    pub true_class: usize,
    pub predicted_class: usize,
    pub probability: f32,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MisclassificationReport {
    pub evaluation: Evaluation,
    pub misclassified: Vec<Misclassified>,
}

/// Write `confusion.csv`, then one PNG per misclassified test sample under
/// `misclassified/` (named `<true>_as_<pred>_<index>.png` with class
/// indices) and `misclassified/index.csv`.
pub fn misclassification_report(net: &Network, test: &LabeledDataset, out_dir: impl AsRef<Path>) -> Result<MisclassificationReport> {
    check_dataset(net, test, "test")?;
    let out_dir = out_dir.as_ref();
    let k = net.num_classes();
    let probs = predict_probabilities(net, test)?;
    let pred = argmax_rows(&probs);
    let evaluation = evaluate_predictions(test.labels(), &pred, k)?;

    let image_dir = out_dir.join("misclassified");
    fs::create_dir_all(&image_dir)?;
    write_confusion_csv(out_dir.join("confusion.csv"), &evaluation.confusion, test.class_names())?;

    let mut misclassified = Vec::new();
    for (i, (&t, &p)) in test.labels().iter().zip(&pred).enumerate() {
        if t == p {
            continue;
        }
        let file = image_dir.join(format!("{t}_as_{p}_{i}.png"));
        save_png(&test.images()[i], &file)?;
        misclassified.push(Misclassified {
            index: i,
            true_class: t,
            predicted_class: p,
            probability: probs.data()[i * k + p],
            file,
        });
    }
    let mut w = csv::Writer::from_path(image_dir.join("index.csv"))?;
    w.write_record(["index", "true", "predicted", "probability", "file"])?;
    for m in &misclassified {
        let name = m.file.file_name().unwrap_or_default().to_string_lossy();
        w.write_record([
            m.index.to_string(),
            test.class_names()[m.true_class].clone(),
            test.class_names()[m.predicted_class].clone(),
            m.probability.to_string(),
            name.into_owned(),
        ])?;
    }
    w.flush()?;
    Ok(MisclassificationReport {
        evaluation,
        misclassified,
    })
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "phase", "lr", "train_loss", "train_acc", "test_acc"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.phase.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.train_acc.to_string(),
            r.test_acc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rows are true classes, columns predicted classes; the first column holds
/// the true class name.
pub fn write_confusion_csv(path: impl AsRef<Path>, confusion: &ConfusionMatrix, class_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(class_names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in class_names.iter().zip(confusion.counts()) {
        let mut record = vec![name.clone()];
        record.extend(row.iter().map(u64::to_string));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
