use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hcrnet::augment::{contact_sheet, preview_variants, AugmentConfig};
use hcrnet::data::{
    load_idx, load_image_dir, load_image_file, load_stroke_dir, save_png, split_dataset, LabeledDataset,
};
use hcrnet::optim::StaircaseSchedule;
use hcrnet::trainer::{
    misclassification_report, run_experiment, train_with_observer, write_confusion_csv, write_history_csv,
    EpochRecord, MetricsReport, PhasePlan, RunSeeds,
};
use hcrnet::weights::{init_from_pretrained, load_checkpoint, save_checkpoint, WeightArchive, FORMAT_VERSION};
use hcrnet::{build_hcrnet, network, Network, Phase};
use serde_json::json;

#[derive(Parser)]
#[command(name = "hcrnet", version, about = "Train and analyse HCR-Net character recognisers")]
struct Cli {
    /// Worker threads for the numeric kernels; 1 gives bit-reproducible runs.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase training; writes model.hcrw, history.csv, confusion.csv and summary.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled dataset.
    Evaluate(EvalArgs),
    /// Write the confusion matrix and every misclassified sample.
    Analyze(EvalArgs),
    /// Write a contact sheet of augmented variants of one image; tile 00 is the source.
    PreviewAugment(PreviewArgs),
    /// Print the layer / output shape / parameter listing.
    ExportInfo(InfoArgs),
}

#[derive(Args, Clone, Default)]
struct SourceArgs {
    /// IDX image file (optionally gzip-compressed).
    #[arg(long, requires = "idx_labels")]
    idx_images: Option<PathBuf>,
    /// IDX label file paired with --idx-images.
    #[arg(long, requires = "idx_images")]
    idx_labels: Option<PathBuf>,
    /// Directory with one sub-directory of images per class.
    #[arg(long)]
    images_dir: Option<PathBuf>,
    /// Directory of JSON stroke samples.
    #[arg(long)]
    strokes_dir: Option<PathBuf>,
    /// Keep white-background images as they are.
    #[arg(long)]
    no_auto_invert: bool,
    /// Expected number of classes.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct TestSourceArgs {
    #[arg(long, requires = "test_idx_labels")]
    test_idx_images: Option<PathBuf>,
    #[arg(long, requires = "test_idx_images")]
    test_idx_labels: Option<PathBuf>,
    #[arg(long)]
    test_images_dir: Option<PathBuf>,
    #[arg(long)]
    test_strokes_dir: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct AugmentArgs {
    /// Maximum rotation in degrees.
    #[arg(long, default_value_t = 10.0)]
    rotation: f64,
    /// Maximum shift as a fraction of the image side.
    #[arg(long, default_value_t = 0.05)]
    shift: f64,
    /// Maximum shear intensity.
    #[arg(long, default_value_t = 0.05)]
    shear: f64,
    /// Maximum zoom deviation from 1.
    #[arg(long, default_value_t = 0.05)]
    zoom: f64,
}

impl AugmentArgs {
    fn config(&self, enabled: bool) -> AugmentConfig {
        AugmentConfig {
            rotation_deg: self.rotation,
            shift_frac: self.shift,
            shear: self.shear,
            zoom_frac: self.zoom,
            enabled,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    test: TestSourceArgs,
    /// Training fraction when no test source is given.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Phase-1 epochs [default: 30, or 10 with --augment].
    #[arg(long)]
    epochs1: Option<usize>,
    /// Phase-2 epochs [default: 20, or 50 with --augment].
    #[arg(long)]
    epochs2: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Seed for weight initialisation, shuffling, dropout and augmentation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Augment training images.
    #[arg(long)]
    augment: bool,
    #[command(flatten)]
    magnitudes: AugmentArgs,
    /// Constant phase-1 learning rate instead of the standard schedule.
    #[arg(long)]
    lr1: Option<f64>,
    /// Constant phase-2 learning rate instead of the standard schedule.
    #[arg(long)]
    lr2: Option<f64>,
    /// HCRW archive with pretrained backbone convolutions.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Independent runs; more than one writes experiment.json instead of a model.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Resolve the configuration and write summary.json without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PreviewArgs {
    /// Image file to augment.
    #[arg(long)]
    image: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    /// Sample index when the image comes from a dataset source.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 8)]
    variants: usize,
    #[arg(long, default_value_t = 3)]
    columns: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    magnitudes: AugmentArgs,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

enum CliError {
    Usage(String),
    Core(hcrnet::Error),
}

impl From<hcrnet::Error> for CliError {
    fn from(e: hcrnet::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(hcrnet::Error::InvalidArgument(_)) => 1,
            CliError::Core(hcrnet::Error::NonFinite(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_source(s: &SourceArgs) -> CliResult<Option<LabeledDataset>> {
    let given = [s.idx_images.is_some(), s.images_dir.is_some(), s.strokes_dir.is_some()];
    let d = match (&s.idx_images, &s.idx_labels, &s.images_dir, &s.strokes_dir) {
        _ if given.iter().filter(|&&g| g).count() > 1 => {
            return Err(CliError::Usage("give exactly one dataset source".into()))
        }
        (Some(images), Some(labels), _, _) => load_idx(images, labels)?,
        (_, _, Some(dir), _) => load_image_dir(dir, !s.no_auto_invert)?,
        (_, _, _, Some(dir)) => load_stroke_dir(dir)?,
        _ => return Ok(None),
    };
    if let Some(k) = s.classes {
        if d.num_classes() != k {
            return Err(hcrnet::Error::Dataset(format!(
                "expected {k} classes, the dataset has {}",
                d.num_classes()
            ))
            .into());
        }
    }
    Ok(Some(d))
}

fn require_source(s: &SourceArgs) -> CliResult<LabeledDataset> {
    load_source(s)?.ok_or_else(|| {
        CliError::Usage("a dataset source is required: --idx-images/--idx-labels, --images-dir or --strokes-dir".into())
    })
}

fn test_source(t: &TestSourceArgs, base: &SourceArgs) -> CliResult<Option<LabeledDataset>> {
    load_source(&SourceArgs {
        idx_images: t.test_idx_images.clone(),
        idx_labels: t.test_idx_labels.clone(),
        images_dir: t.test_images_dir.clone(),
        strokes_dir: t.test_strokes_dir.clone(),
        no_auto_invert: base.no_auto_invert,
        classes: base.classes,
    })
}

fn print_metrics(label: &str, accuracy: f64, precision: f64, recall: f64, f1: f64) {
    println!("{label}");
    println!("  accuracy         {accuracy:.4}");
    println!("  macro precision  {precision:.4}");
    println!("  macro recall     {recall:.4}");
    println!("  macro F1         {f1:.4}");
}

fn plan_from(args: &TrainArgs) -> CliResult<PhasePlan> {
    let mut plan = PhasePlan::new(args.magnitudes.config(args.augment), args.seed);
    if let Some(e) = args.epochs1 {
        plan.epochs_phase1 = e;
    }
    if let Some(e) = args.epochs2 {
        plan.epochs_phase2 = e;
    }
    plan.batch_size = args.batch_size;
    if let Some(lr) = args.lr1 {
        plan.schedule_phase1 = Some(StaircaseSchedule::constant(lr, plan.epochs_phase1)?);
    }
    if let Some(lr) = args.lr2 {
        plan.schedule_phase2 = Some(StaircaseSchedule::constant(lr, plan.epochs_phase2)?);
    }
    plan.validate()?;
    Ok(plan)
}

fn cmd_train(args: &TrainArgs, workers: usize) -> CliResult<()> {
    if args.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let plan = plan_from(args)?;
    let data = require_source(&args.source)?;
    let (train_set, test_set) = match test_source(&args.test, &args.source)? {
        Some(test) => {
            if test.class_names() != data.class_names() {
                return Err(hcrnet::Error::Dataset("test classes differ from training classes".into()).into());
            }
            (data, test)
        }
        None => split_dataset(&data, args.split, args.split_seed)?,
    };
    let pretrained = args.pretrained.as_ref().map(WeightArchive::read).transpose()?;
    fs::create_dir_all(&args.out_dir)?;
    println!(
        "training on {} samples, testing on {} ({} classes)",
        train_set.len(),
        test_set.len(),
        train_set.num_classes()
    );

    let mut summary = json!({
        "format_version": FORMAT_VERSION,
        "plan": plan,
        "dropout_rate": network::DROPOUT_RATE,
        "init_seed": args.seed,
        "split": if args.test.test_idx_images.is_some() || args.test.test_images_dir.is_some() || args.test.test_strokes_dir.is_some() {
            json!(null)
        } else {
            json!({ "ratio": args.split, "seed": args.split_seed })
        },
        "schedules": {
            "phase1": plan.schedule(Phase::One).ok(),
            "phase2": plan.schedule(Phase::Two).ok(),
        },
        "pretrained": args.pretrained,
        "workers": workers,
        "runs": args.runs,
        "class_names": train_set.class_names(),
        "train_samples": train_set.len(),
        "test_samples": test_set.len(),
    });

    if args.dry_run {
        println!("dry run: configuration written to {}", args.out_dir.join("summary.json").display());
    } else if args.runs > 1 {
        let exp = run_experiment(
            &train_set,
            &test_set,
            &plan,
            args.runs,
            RunSeeds::Derived(args.seed),
            pretrained.as_ref(),
        )?;
        print_metrics(
            &format!("mean over {} runs (last epoch)", args.runs),
            exp.accuracy_last_epoch.mean,
            exp.macro_precision.mean,
            exp.macro_recall.mean,
            exp.macro_f1.mean,
        );
        println!("  accuracy std     {:.4}", exp.accuracy_last_epoch.std);
        summary["run_seeds"] = json!(exp.seeds);
        fs::write(args.out_dir.join("experiment.json"), to_json(&exp)?)?;
    } else {
        let mut net = build_hcrnet(train_set.num_classes(), args.seed)?;
        if let Some(archive) = &pretrained {
            init_from_pretrained(&mut net, archive)?;
        }
        let mut progress = |r: &EpochRecord| {
            println!(
                "epoch {:>3} (phase {}) lr {:.0e}  loss {:.4}  train acc {:.4}  test acc {:.4}",
                r.epoch, r.phase, r.lr, r.train_loss, r.train_acc, r.test_acc
            );
        };
        let report = train_with_observer(&mut net, &train_set, &test_set, &plan, &mut progress)?;
        save_checkpoint(&net)?.write(args.out_dir.join("model.hcrw"))?;
        write_history_csv(args.out_dir.join("history.csv"), &report.history)?;
        write_confusion_csv(args.out_dir.join("confusion.csv"), &report.confusion, test_set.class_names())?;
        print_report(&report);
        summary["metrics"] = json!({
            "accuracy_last_epoch": report.accuracy_last_epoch,
            "accuracy_best": report.accuracy_best,
            "macro_precision": report.macro_precision,
            "macro_recall": report.macro_recall,
            "macro_f1": report.macro_f1,
        });
    }
    fs::write(args.out_dir.join("summary.json"), to_json(&summary)?)?;
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Core(e.into()))
}

fn print_report(r: &MetricsReport) {
    print_metrics(
        "test metrics (last epoch)",
        r.accuracy_last_epoch,
        r.macro_precision,
        r.macro_recall,
        r.macro_f1,
    );
    println!("  best accuracy    {:.4}", r.accuracy_best);
}

/// Build a network shaped for the checkpoint (class count read from the
/// output layer) and load it.
fn load_model(path: &Path) -> CliResult<Network> {
    let archive = WeightArchive::read(path)?;
    let classes = archive
        .get("dense_2.weight")
        .and_then(|e| e.shape.get(1).copied())
        .ok_or_else(|| hcrnet::Error::MissingEntry("dense_2.weight".into()))?;
    let mut net = build_hcrnet(classes, 0)?;
    load_checkpoint(&mut net, &archive)?;
    Ok(net)
}

fn cmd_evaluate(args: &EvalArgs) -> CliResult<()> {
    let data = require_source(&args.source)?;
    let net = load_model(&args.checkpoint)?;
    let eval = hcrnet::trainer::evaluate(&net, &data)?;
    fs::create_dir_all(&args.out_dir)?;
    write_confusion_csv(args.out_dir.join("confusion.csv"), &eval.confusion, data.class_names())?;
    print_metrics(
        &format!("evaluation on {} samples", data.len()),
        eval.accuracy,
        eval.macro_precision,
        eval.macro_recall,
        eval.macro_f1,
    );
    Ok(())
}

fn cmd_analyze(args: &EvalArgs) -> CliResult<()> {
    let data = require_source(&args.source)?;
    let net = load_model(&args.checkpoint)?;
    fs::create_dir_all(&args.out_dir)?;
    let report = misclassification_report(&net, &data, &args.out_dir)?;
    println!(
        "{} of {} samples misclassified; accuracy {:.4}",
        report.misclassified.len(),
        data.len(),
        report.evaluation.accuracy
    );
    Ok(())
}

fn cmd_preview(args: &PreviewArgs) -> CliResult<()> {
    let img = match &args.image {
        Some(path) => load_image_file(path, !args.source.no_auto_invert)?,
        None => {
            let data = require_source(&args.source)?;
            data.images()
                .get(args.index)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("--index {} out of range", args.index)))?
        }
    };
    let tiles = preview_variants(&img, &args.magnitudes.config(true), args.variants, args.seed)?;
    let tile_dir = args.out_dir.join("augment_preview");
    fs::create_dir_all(&tile_dir)?;
    for (k, tile) in tiles.iter().enumerate() {
        save_png(tile, tile_dir.join(format!("{k:02}.png")))?;
    }
    let path = args.out_dir.join("augment_preview.png");
    save_png(&contact_sheet(&tiles, args.columns)?, &path)?;
    println!("wrote {} variants to {}", args.variants, path.display());
    Ok(())
}

fn cmd_info(args: &InfoArgs) -> CliResult<()> {
    let mut net = build_hcrnet(args.classes, 0)?;
    let rows = net.summary()?;
    let phase1 = net.param_count();
    net.set_phase(Phase::Two);
    let phase2 = net.param_count();
    if args.json {
        let out = json!({
            "layers": rows,
            "total_params": phase1.total,
            "phase1_trainable": phase1.trainable,
            "phase2_trainable": phase2.trainable,
            "non_trainable": phase2.non_trainable,
        });
        println!("{}", to_json(&out)?);
        return Ok(());
    }
    println!("{:<44}{:<22}{:>10}", "Layer (type)", "Output Shape", "Param #");
    println!("{}", "=".repeat(76));
    for r in rows {
        let shape = r
            .output_shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        println!("{:<44}{:<22}{:>10}", format!("{} ({})", r.name, r.kind), format!("(None, {shape})"), r.params);
    }
    println!("{}", "=".repeat(76));
    println!("Total params: {}", phase1.total);
    println!("Trainable params (phase 1): {}", phase1.trainable);
    println!("Trainable params (phase 2): {}", phase2.trainable);
    println!("Non-trainable params (phase 2): {}", phase2.non_trainable);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.workers),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::PreviewAugment(a) => cmd_preview(a),
        Command::ExportInfo(a) => cmd_info(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_) | CliError::Core(hcrnet::Error::Io(_))) {
                eprintln!("run with --help for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
