//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use hcrnet::augment::{apply_affine, augment_batch, sample_affine, AffineTransform, AugmentConfig};
use hcrnet::data::{load_idx, LabeledDataset};
use hcrnet::layers::{dropout_mask, Activation, Layer, ParamSlot};
use hcrnet::metrics::evaluate_predictions;
use hcrnet::network::{build_hcrnet, Phase};
use hcrnet::optim::{cross_entropy, default_schedule, RmspropConfig, RmspropState, StaircaseSchedule};
use hcrnet::trainer::{train, train_step, write_confusion_csv, write_history_csv, PhasePlan};
use hcrnet::weights::{load_checkpoint, save_checkpoint, WeightArchive};
use hcrnet::{Fill, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn digits_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/digits")
}

fn load_digits(split: &str) -> LabeledDataset {
    let dir = digits_dir();
    load_idx(
        dir.join(format!("{split}-images-idx3-ubyte.gz")),
        dir.join(format!("{split}-labels-idx1-ubyte.gz")),
    )
    .expect("bundled digit subset loads")
}

// ---------------------------------------------------------------------------
// Parameter accounting

fn parameter_accounting() -> Outcome {
    let expected: [(&str, usize); 21] = [
        ("block1_conv1", 1792),
        ("block1_conv2", 36928),
        ("block1_pool", 0),
        ("block2_conv1", 73856),
        ("block2_conv2", 147584),
        ("block2_pool", 0),
        ("block3_conv1", 295168),
        ("block3_conv2", 590080),
        ("block3_conv3", 590080),
        ("block3_pool", 0),
        ("block4_conv1", 1180160),
        ("block4_conv2", 2359808),
        ("batch_normalization", 2048),
        ("flatten", 0),
        ("dense", 4194816),
        ("batch_normalization_1", 2048),
        ("dropout", 0),
        ("dense_1", 262656),
        ("batch_normalization_2", 2048),
        ("dropout_1", 0),
        ("dense_2", 5130),
    ];
    let mut net = build_hcrnet(10, 0).map_err(|e| e.to_string())?;
    let layers = net.layers();
    ensure(layers.len() == expected.len(), format!("{} layers", layers.len()))?;
    for (layer, (name, count)) in layers.iter().zip(expected) {
        ensure(
            layer.name == name && layer.param_count() == count,
            format!("{} has {} params, expected {name} with {count}", layer.name, layer.param_count()),
        )?;
    }
    let p1 = net.param_count();
    net.set_phase(Phase::Two);
    let p2 = net.param_count();
    ensure(p1.total == 9_744_202, format!("total {}", p1.total))?;
    ensure(p1.trainable == 4_465_674, format!("phase1 trainable {}", p1.trainable))?;
    ensure(
        p2.trainable == 9_741_130 && p2.non_trainable == 3_072,
        format!("phase2 trainable {} non-trainable {}", p2.trainable, p2.non_trainable),
    )?;
    Ok(format!("total {} / phase1 {} / phase2 {}+{}", p1.total, p1.trainable, p2.trainable, p2.non_trainable))
}

// ---------------------------------------------------------------------------
// Gradient checks on the f64 path

const FD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;
/// Denominator floor so that near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

enum Head {
    /// Loss = sum(r * y).
    Projection(Tensor<f64>),
    /// Mean cross-entropy over softmax outputs.
    CrossEntropy(Vec<usize>),
}

impl Head {
    fn loss(&self, y: &Tensor<f64>) -> f64 {
        match self {
            Head::Projection(r) => r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum(),
            Head::CrossEntropy(labels) => cross_entropy(y, labels).unwrap().0,
        }
    }

    fn grad(&self, y: &Tensor<f64>) -> Tensor<f64> {
        match self {
            Head::Projection(r) => r.clone(),
            Head::CrossEntropy(labels) => cross_entropy(y, labels).unwrap().1,
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn forward(layer: &Layer<f64>, x: &Tensor<f64>, mask_seed: u64, keep: bool) -> (Layer<f64>, Tensor<f64>, Option<hcrnet::layers::LayerCache<f64>>) {
    let mut l = layer.clone();
    // Same seed every call, so dropout draws the same mask.
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (y, cache) = l.forward_train(x.clone(), &mut rng, keep).unwrap();
    (l, y, cache)
}

/// Largest relative error between analytic and central-difference gradients
/// over the input and every learnable parameter.
fn grad_check(layer: &Layer<f64>, x: &Tensor<f64>, head: &Head, mask_seed: u64) -> f64 {
    let loss = |l: &Layer<f64>, x: &Tensor<f64>| head.loss(&forward(l, x, mask_seed, false).1);
    let (after, y, cache) = forward(layer, x, mask_seed, true);
    let grads = after.backward(head.grad(&y), cache.unwrap(), true).unwrap();
    let mut worst: f64 = 0.0;

    let gx = grads.input.expect("input gradient requested");
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += FD_EPS;
        xm.data_mut()[i] -= FD_EPS;
        let num = (loss(layer, &xp) - loss(layer, &xm)) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(gx.data()[i], num));
    }
    for (slot, g) in &grads.params {
        let len = g.len();
        for i in 0..len {
            let perturbed = |delta: f64| {
                let mut l = layer.clone();
                for (s, t) in l.parameters_mut() {
                    if s == *slot {
                        t.data_mut()[i] += delta;
                    }
                }
                loss(&l, x)
            };
            let num = (perturbed(FD_EPS) - perturbed(-FD_EPS)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(g.data()[i], num));
        }
    }
    worst
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Fill::Uniform { lo, hi, seed }).unwrap()
}

fn randomize_params(layer: &mut Layer<f64>, seed: u64) {
    for (k, (slot, t)) in layer.parameters_mut().into_iter().enumerate() {
        if slot.is_learnable() {
            let (lo, hi) = if slot == ParamSlot::Gamma { (0.5, 1.5) } else { (-0.5, 0.5) };
            *t = uniform(t.shape(), lo, hi, seed.wrapping_add(k as u64 * 7919));
        }
    }
}

/// Redraw the input until no ReLU pre-activation lies within 1e-3 of the
/// kink, where finite differences are meaningless.
fn away_from_kink(layer: &Layer<f64>, shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut linear = layer.clone();
    linear.activation = Activation::Linear;
    (0..1000)
        .map(|k| uniform(shape, -1.0, 1.0, seed.wrapping_mul(1000).wrapping_add(k)))
        .find(|x| linear.infer(x).unwrap().data().iter().all(|v| v.abs() > 1e-3))
        .expect("an input away from the ReLU kink")
}

fn gradient_checks() -> Outcome {
    let mut report = Vec::new();
    let mut failed = Vec::new();
    let kinds = ["conv2d", "maxpool", "batchnorm-train", "dense", "dropout", "relu", "softmax+ce"];
    for kind in kinds {
        let mut worst: f64 = 0.0;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 5);
            let n = rng.gen_range(2..=4);
            let h = 2 * rng.gen_range(1..=3);
            let w = 2 * rng.gen_range(1..=3);
            let c = rng.gen_range(1..=3);
            let err = match kind {
                "conv2d" => {
                    let mut l = Layer::<f64>::conv2d("c", c, rng.gen_range(1..=3), seed).unwrap();
                    l.activation = Activation::Linear;
                    randomize_params(&mut l, seed);
                    let x = uniform(&[n, h, w, c], -1.0, 1.0, seed);
                    let y_shape = l.output_shape(x.shape()).unwrap();
                    grad_check(&l, &x, &Head::Projection(uniform(&y_shape, -1.0, 1.0, seed + 99)), 0)
                }
                "maxpool" => {
                    let l = Layer::<f64>::maxpool("p");
                    // Distinct, well-separated values keep the argmax stable
                    // under the finite-difference perturbation.
                    let len = n * h * w * c;
                    let mut values: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
                    use rand::seq::SliceRandom;
                    values.shuffle(&mut rng);
                    let x = Tensor::new(vec![n, h, w, c], values).unwrap();
                    let y_shape = l.output_shape(x.shape()).unwrap();
                    grad_check(&l, &x, &Head::Projection(uniform(&y_shape, -1.0, 1.0, seed)), 0)
                }
                "batchnorm-train" => {
                    let mut l = Layer::<f64>::batchnorm("bn", c).unwrap();
                    randomize_params(&mut l, seed);
                    let shape = if seed % 2 == 0 { vec![n, h, w, c] } else { vec![n + 1, c] };
                    let x = uniform(&shape, -2.0, 2.0, seed);
                    grad_check(&l, &x, &Head::Projection(uniform(&shape, -1.0, 1.0, seed + 99)), 0)
                }
                "dense" => {
                    let d = rng.gen_range(1..=12);
                    let mut l = Layer::<f64>::dense("d", d, rng.gen_range(1..=5), Activation::Linear, seed).unwrap();
                    randomize_params(&mut l, seed);
                    let x = uniform(&[n, d], -1.0, 1.0, seed);
                    let y_shape = l.output_shape(x.shape()).unwrap();
                    grad_check(&l, &x, &Head::Projection(uniform(&y_shape, -1.0, 1.0, seed + 99)), 0)
                }
                "dropout" => {
                    let l = Layer::<f64>::dropout("drop", 0.35).unwrap();
                    let x = uniform(&[n, h, w, c], -1.0, 1.0, seed);
                    grad_check(&l, &x, &Head::Projection(uniform(x.shape(), -1.0, 1.0, seed + 99)), seed)
                }
                "relu" => {
                    // ReLU is fused into conv and dense layers; check both.
                    let mut conv = Layer::<f64>::conv2d("c", c, 2, seed).unwrap();
                    randomize_params(&mut conv, seed);
                    let x = away_from_kink(&conv, &[n, h, w, c], seed);
                    let y_shape = conv.output_shape(x.shape()).unwrap();
                    let a = grad_check(&conv, &x, &Head::Projection(uniform(&y_shape, -1.0, 1.0, seed + 99)), 0);
                    let mut dense = Layer::<f64>::dense("d", 6, 4, Activation::Relu, seed).unwrap();
                    randomize_params(&mut dense, seed);
                    let x = away_from_kink(&dense, &[n, 6], seed);
                    let b = grad_check(&dense, &x, &Head::Projection(uniform(&[n, 4], -1.0, 1.0, seed + 99)), 0);
                    a.max(b)
                }
                "softmax+ce" => {
                    let k = rng.gen_range(2..=5);
                    let d = rng.gen_range(1..=8);
                    let mut l = Layer::<f64>::dense("out", d, k, Activation::Softmax, seed).unwrap();
                    randomize_params(&mut l, seed);
                    let x = uniform(&[n, d], -1.0, 1.0, seed);
                    let labels = (0..n).map(|_| rng.gen_range(0..k)).collect();
                    grad_check(&l, &x, &Head::CrossEntropy(labels), 0)
                }
                _ => unreachable!(),
            };
            worst = worst.max(err);
        }
        if worst > GRAD_TOL || !worst.is_finite() {
            failed.push(kind);
        }
        report.push(format!("{kind} {worst:.1e}"));
    }
    let summary = format!("max rel err: {}", report.join(", "));
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{} exceed {GRAD_TOL:e}; {summary}", failed.join(", ")))
    }
}

// ---------------------------------------------------------------------------
// Freeze invariant

fn block_bits(net: &hcrnet::Network) -> Vec<(String, Vec<u32>)> {
    net.named_parameters()
        .into_iter()
        .filter(|(n, _)| n.starts_with("block"))
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn freeze_invariant() -> Outcome {
    let mut net = build_hcrnet(10, 3).map_err(|e| e.to_string())?;
    let before = block_bits(&net);
    ensure(before.len() == 18, format!("{} block tensors", before.len()))?;
    let head_before = net.layer("dense_2").unwrap().parameters()[0].1.clone();
    let mut opt = RmspropState::new(RmspropConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for step in 0..50u64 {
        let x = Tensor::create(&[4, 32, 32, 3], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 100 + step }).unwrap();
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..10)).collect();
        train_step(&mut net, &mut opt, &x, &labels, 1e-4, step).map_err(|e| e.to_string())?;
    }
    ensure(block_bits(&net) == before, "a frozen tensor changed during phase 1")?;
    ensure(
        net.layer("dense_2").unwrap().parameters()[0].1 != &head_before,
        "head did not train in phase 1",
    )?;

    net.set_phase(Phase::Two);
    let mut opt = RmspropState::new(RmspropConfig::default());
    for step in 0..3u64 {
        let x = Tensor::create(&[4, 32, 32, 3], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 900 + step }).unwrap();
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..10)).collect();
        train_step(&mut net, &mut opt, &x, &labels, 5e-6, step).map_err(|e| e.to_string())?;
    }
    let after = block_bits(&net);
    let unchanged: Vec<&str> = before
        .iter()
        .zip(&after)
        .filter(|(a, b)| a.1 == b.1)
        .map(|(a, _)| a.0.as_str())
        .collect();
    ensure(unchanged.is_empty(), format!("phase 2 left {unchanged:?} unchanged"))?;
    Ok("50 phase-1 steps: 18 block tensors bit-identical; 3 phase-2 steps: all 18 changed".into())
}

// ---------------------------------------------------------------------------
// Overfit smoke

fn two_class_subset(d: &LabeledDataset, per_class: usize) -> LabeledDataset {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2 {
        for (img, &l) in d.images().iter().zip(d.labels()) {
            if l == class && labels.iter().filter(|&&x| x == class).count() < per_class {
                images.push(img.clone());
                labels.push(class);
            }
        }
    }
    LabeledDataset::new(images, labels, vec!["0".into(), "1".into()]).unwrap()
}

fn overfit_smoke() -> Outcome {
    let toy = two_class_subset(&load_digits("train"), 8);
    let mut net = build_hcrnet(2, 5).map_err(|e| e.to_string())?;
    let mut plan = PhasePlan::new(AugmentConfig::default(), 5);
    plan.epochs_phase1 = 300;
    plan.epochs_phase2 = 0;
    plan.batch_size = 16;
    plan.schedule_phase1 = Some(StaircaseSchedule::constant(1e-4, 300).unwrap());
    let report = train(&mut net, &toy, &toy, &plan).map_err(|e| e.to_string())?;
    // One full-batch step per epoch; accuracy is measured in inference mode.
    match report.history.iter().find(|r| r.test_acc == 1.0) {
        Some(r) => Ok(format!("16 samples at 100% train accuracy after {} steps", r.epoch)),
        None => Err(format!(
            "best train accuracy {:.3} after 300 steps",
            report.accuracy_best
        )),
    }
}

// ---------------------------------------------------------------------------
// Desk-scale digit run

fn desk_scale_digits() -> Outcome {
    let train_set = load_digits("train");
    let test_set = load_digits("test");
    ensure(
        train_set.len() == 2000 && test_set.len() == 1000,
        format!("subset sizes {}/{}", train_set.len(), test_set.len()),
    )?;
    let start = Instant::now();
    let mut net = build_hcrnet(10, 1).map_err(|e| e.to_string())?;
    let mut plan = PhasePlan::new(AugmentConfig::default(), 1);
    plan.epochs_phase1 = 10;
    plan.epochs_phase2 = 0;
    let report = train(&mut net, &train_set, &test_set, &plan).map_err(|e| e.to_string())?;
    let acc = report.accuracy_last_epoch;
    let msg = format!(
        "test accuracy {:.2}% (best {:.2}%) in {:.0}s",
        100.0 * acc,
        100.0 * report.accuracy_best,
        start.elapsed().as_secs_f64()
    );
    ensure(acc >= 0.90, msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------------------
// Schedules

fn schedule_conformance() -> Outcome {
    let p1 = default_schedule(Phase::One, 30).map_err(|e| e.to_string())?;
    for e in 0..30 {
        let want = if e < 5 { 1e-4 } else { 5e-5 };
        ensure(p1.lr_at(e).unwrap() == want, format!("phase1 epoch {e}"))?;
    }
    for total in [11usize, 20, 50] {
        let p2 = default_schedule(Phase::Two, total).map_err(|e| e.to_string())?;
        for e in 0..total {
            let want = if e < 5 {
                1e-7
            } else if e < total - 5 {
                5e-6
            } else {
                1e-6
            };
            ensure(p2.lr_at(e).unwrap() == want, format!("phase2 total {total} epoch {e}"))?;
        }
    }
    Ok("phase1 1e-4 -> 5e-5 at 5; phase2 1e-7 -> 5e-6 at 5 -> 1e-6 at total-5".into())
}

// ---------------------------------------------------------------------------
// Augmentation

fn augmentation_properties() -> Outcome {
    let digits = load_digits("train");
    let zero = AugmentConfig {
        rotation_deg: 0.0,
        shift_frac: 0.0,
        shear: 0.0,
        zoom_frac: 0.0,
        enabled: true,
    };
    let (batch, _) = digits.batch(&(0..64).collect::<Vec<_>>()).unwrap();
    ensure(augment_batch(&batch, &zero, 3).unwrap() == batch, "zero-magnitude batch changed")?;
    let noise = Tensor::create(&[32, 32, 3], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 2 }).unwrap();
    ensure(
        apply_affine(&noise, &AffineTransform::identity()).unwrap() == noise,
        "identity changed an image",
    )?;

    for shear in [0.05, 0.5] {
        let cfg = AugmentConfig {
            shear,
            ..AugmentConfig::enabled()
        };
        for seed in 0..10_000u64 {
            let t = sample_affine(&cfg, seed);
            let m = t.matrix;
            ensure(
                t.determinant() > 0.0 && m[0][0] > 0.0 && m[1][1] > 0.0,
                format!("reflection-like matrix {m:?} (shear {shear})"),
            )?;
        }
        for seed in 0..20u64 {
            let out = apply_affine(&noise, &sample_affine(&cfg, seed)).unwrap();
            ensure(
                out.data().iter().all(|v| (0.0..=1.0).contains(v)),
                "augmented value outside [0, 1]",
            )?;
        }
    }

    let (batch, _) = digits.batch(&(0..1000).collect::<Vec<_>>()).unwrap();
    let aug = augment_batch(&batch, &AugmentConfig::enabled(), 42).unwrap();
    ensure(aug.data().iter().all(|v| (0.0..=1.0).contains(v)), "batch value outside [0, 1]")?;
    let mean = |t: &Tensor| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
    let shift = (mean(&aug) - mean(&batch)).abs();
    ensure(shift < 0.05, format!("mean intensity shift {shift:.4}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mask: Vec<f64> = dropout_mask(100_000, 0.35, &mut rng).unwrap();
    let dropped = mask.iter().filter(|&&m| m == 0.0).count() as f64 / mask.len() as f64;
    ensure((dropped - 0.35).abs() <= 0.01, format!("dropout fraction {dropped:.4}"))?;
    Ok(format!("identity exact; 20k matrices det>0; mean shift {shift:.1e}; drop fraction {dropped:.4}"))
}

// ---------------------------------------------------------------------------
// Formats

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut archive = WeightArchive::new();
    let t = Tensor::<f32>::create(&[3, 3, 3, 64], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 1 }).unwrap();
    archive.push_tensor("block1_conv1.weight", &t).unwrap();
    let path = dir.path().join("a.hcrw");
    archive.write(&path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).unwrap();
    let back = WeightArchive::read(&path).map_err(|e| e.to_string())?;
    ensure(back.to_bytes() == bytes && back == archive, "archive round trip differs")?;
    ensure(
        WeightArchive::from_bytes(&WeightArchive::new().to_bytes()).unwrap().is_empty(),
        "empty archive",
    )?;
    let mut bad = bytes.clone();
    bad[1] = b'X';
    ensure(WeightArchive::from_bytes(&bad).is_err(), "corrupted magic accepted")?;
    ensure(WeightArchive::from_bytes(&bytes[..bytes.len() - 3]).is_err(), "truncation accepted")?;

    let net = build_hcrnet(10, 4).unwrap();
    let ckpt = save_checkpoint(&net).unwrap();
    ensure(ckpt.len() == 36, format!("{} checkpoint entries", ckpt.len()))?;
    let ckpt_path = dir.path().join("c.hcrw");
    ckpt.write(&ckpt_path).unwrap();
    let mut other = build_hcrnet(10, 5).unwrap();
    load_checkpoint(&mut other, &WeightArchive::read(&ckpt_path).unwrap()).map_err(|e| e.to_string())?;
    let x = Tensor::create(&[3, 32, 32, 3], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 6 }).unwrap();
    let (a, b) = (net.infer(&x).unwrap(), other.infer(&x).unwrap());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a) == bits(&b), "inference differs after checkpoint round trip")?;
    let mut five = build_hcrnet(5, 1).unwrap();
    ensure(load_checkpoint(&mut five, &ckpt).is_err(), "class-count mismatch accepted")?;

    // Hand-made IDX pair: two 28×28 images.
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28];
    let mut first = vec![0u8; 784];
    first[0] = 255;
    img.extend_from_slice(&first);
    img.extend_from_slice(&[0u8; 784]);
    let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 2];
    std::fs::write(dir.path().join("i"), &img).unwrap();
    std::fs::write(dir.path().join("l"), &lab).unwrap();
    let d = load_idx(dir.path().join("i"), dir.path().join("l")).map_err(|e| e.to_string())?;
    ensure(d.labels() == [7, 2], format!("labels {:?}", d.labels()))?;
    let px = d.images()[0].data();
    ensure(px[(2 * 32 + 2) * 3] == 1.0 && px.iter().filter(|&&v| v != 0.0).count() == 3, "IDX pixel placement")?;
    ensure(d.images()[1].data().iter().all(|&v| v == 0.0), "zero image")?;
    Ok("archive/checkpoint bit-exact; bad magic and truncation rejected; IDX fixture parsed".into())
}

// ---------------------------------------------------------------------------
// Metrics

fn metrics_oracle() -> Outcome {
    let e = evaluate_predictions(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).map_err(|e| e.to_string())?;
    ensure((e.accuracy - 0.75).abs() <= 1e-6, format!("accuracy {}", e.accuracy))?;
    ensure((e.macro_f1 - 0.733_333_3).abs() <= 1e-6, format!("macro-F1 {}", e.macro_f1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let k = rng.gen_range(2..8);
        let n = rng.gen_range(1..300);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let e = evaluate_predictions(&truth, &pred, k).unwrap();
        let cm = &e.confusion;
        for t in 0..k {
            for p in 0..k {
                let count = truth.iter().zip(&pred).filter(|&(&a, &b)| a == t && b == p).count() as u64;
                ensure(cm.counts()[t][p] == count, "cell differs from counting oracle")?;
            }
            let support = truth.iter().filter(|&&a| a == t).count() as u64;
            ensure(cm.row_sum(t) == support, "row sum differs from class count")?;
            let predicted = pred.iter().filter(|&&a| a == t).count() as u64;
            ensure(cm.column_sum(t) == predicted, "column sum differs from prediction count")?;
        }
        ensure(cm.total() == n as u64, "total differs from sample count")?;
        let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        ensure(e.accuracy == correct as f64 / n as f64, "accuracy differs from trace/total")?;
    }
    Ok(format!("fixture accuracy 0.75, macro-F1 {:.6}; 200 random confusion matrices match", 0.733_333_3))
}

// ---------------------------------------------------------------------------
// Determinism

fn run_once(dir: &Path, train_set: &LabeledDataset, test_set: &LabeledDataset) -> Result<Vec<Vec<u8>>, String> {
    let mut net = build_hcrnet(10, 21).map_err(|e| e.to_string())?;
    let mut plan = PhasePlan::new(AugmentConfig::enabled(), 21);
    plan.epochs_phase1 = 2;
    plan.epochs_phase2 = 1;
    plan.batch_size = 16;
    plan.schedule_phase2 = Some(StaircaseSchedule::constant(5e-6, 1).unwrap());
    let report = train(&mut net, train_set, test_set, &plan).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(dir).unwrap();
    write_history_csv(dir.join("history.csv"), &report.history).map_err(|e| e.to_string())?;
    write_confusion_csv(dir.join("confusion.csv"), &report.confusion, test_set.class_names())
        .map_err(|e| e.to_string())?;
    save_checkpoint(&net).unwrap().write(dir.join("model.hcrw")).unwrap();
    Ok(["history.csv", "confusion.csv", "model.hcrw"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect())
}

fn determinism() -> Outcome {
    let train_set = load_digits("train").take_per_class(6).unwrap();
    let test_set = load_digits("test").take_per_class(3).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let a = pool.install(|| run_once(&dir.path().join("a"), &train_set, &test_set))?;
    let b = pool.install(|| run_once(&dir.path().join("b"), &train_set, &test_set))?;
    for (name, (x, y)) in ["history.csv", "confusion.csv", "model.hcrw"].iter().zip(a.iter().zip(&b)) {
        ensure(x == y, format!("{name} differs between runs"))?;
    }
    Ok("history.csv, confusion.csv and model.hcrw byte-identical across two runs".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("parameter accounting", parameter_accounting),
        ("gradient correctness", gradient_checks),
        ("freeze invariant", freeze_invariant),
        ("overfit smoke", overfit_smoke),
        ("desk-scale digit run", desk_scale_digits),
        ("schedule conformance", schedule_conformance),
        ("augmentation properties", augmentation_properties),
        ("format round-trips", format_round_trips),
        ("metrics oracle", metrics_oracle),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
