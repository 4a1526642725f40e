//! `msyolo`: train, evaluate, detect, profile, inspect datasets, generate
//! synthetic corpora and run the ablation.
//!
//! Exit codes: 0 on success, 1 for invalid input, 2 for runtime failures.
//! Errors are printed to stderr as one line: `error[<kind>]: <message>`.

mod images;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msyolo::config::Document;
use msyolo::data::{
    dataset_stats, default_classes, filter_categories, load_annotations, merge_splits, random_split,
    synth_dataset, write_synth, AnnotationSet, Dataset, Split, SplitAssignment, SynthConfig,
    DEFAULT_SPLIT_FRACTIONS,
};
use msyolo::flops::model_cost;
use msyolo::metrics::PredictionRecord;
use msyolo::model::{builtin, load_checkpoint, write_checkpoint, Checkpoint, ModelConfig, BUILTIN_CONFIGS};
use msyolo::train::{ablate, detect, evaluate, train_with, EvalConfig, ExperimentConfig, LogRecord};
use msyolo::{Error, Result};
use serde::Serialize;

use manifest::Run;

#[derive(Parser, Debug)]
#[command(name = "msyolo", version, about = "Lightweight infrared object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write `last.ckpt` plus a JSON-lines log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run a checkpoint on image files.
    Detect(DetectArgs),
    /// Profile MACs, FLOPs and parameters layer by layer.
    Flops(FlopsArgs),
    /// Per-split picture and instance counts of an annotation set.
    Stats(StatsArgs),
    /// Generate a synthetic thermal corpus.
    Synth(SynthArgs),
    /// Train and evaluate the four backbone x loss combinations.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Built-in config name or path to a config file.
    #[arg(long, default_value = "msyolo-small")]
    config: String,
    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for weights, data order and synthetic data.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory, annotation file, or `synth`.
    #[arg(long, default_value = "synth")]
    dataset: String,
    /// Number of images when `--dataset synth`.
    #[arg(long, default_value_t = 20)]
    synth_images: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Dataset evaluated after each epoch; defaults to none.
    #[arg(long)]
    val: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Seed for `--dataset synth`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 160)]
    imgsz: usize,
    #[arg(long, default_value_t = 0.001)]
    conf: f32,
    #[arg(long, default_value_t = 0.45)]
    iou: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image files (pgm, f32, png, jpeg, tiff).
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long, default_value_t = 160)]
    imgsz: usize,
    #[arg(long, default_value_t = 0.25)]
    conf: f32,
    #[arg(long, default_value_t = 0.45)]
    iou: f64,
    /// Also write each image with its boxes drawn, as PGM.
    #[arg(long)]
    overlay: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Square input size.
    #[arg(long, default_value_t = 640)]
    imgsz: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// One annotation file holding every image; splits come from
    /// `--splits` or a seeded 70/23/7 split.
    #[arg(long, conflicts_with_all = ["train", "test", "val"])]
    annotations: Option<PathBuf>,
    /// JSON file `{"train": [ids], "test": [ids], "validation": [ids]}`.
    #[arg(long, requires = "annotations")]
    splits: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Comma-separated class names; defaults to the nine thermal classes
    /// when all are present, otherwise every category.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Comma-separated class frequencies summing to 1; uniform by default.
    #[arg(long, value_delimiter = ',')]
    freq: Option<Vec<f64>>,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Baseline (CSP backbone) model config; defaults to the built-in
    /// counterpart of `--config`.
    #[arg(long)]
    baseline: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluation dataset; defaults to the training dataset.
    #[arg(long)]
    eval_dataset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli.command, &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

/// Collapses whitespace and drops the variant prefix already carried by the
/// `error[kind]` tag.
fn one_line(s: &str) -> String {
    let s = ["configuration error: ", "usage error: ", "validation error: ", "invalid state: "]
        .iter()
        .find_map(|p| s.strip_prefix(p))
        .unwrap_or(s);
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(command: Command, argv: &[String]) -> Result<ExitCode> {
    match command {
        Command::Train(a) => cmd_train(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Detect(a) => cmd_detect(a, argv),
        Command::Flops(a) => cmd_flops(a, argv),
        Command::Stats(a) => cmd_stats(a, argv),
        Command::Synth(a) => cmd_synth(a, argv),
        Command::Ablate(a) => cmd_ablate(a, argv),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e {
        CmdError::Partial => Ok(ExitCode::from(2)),
        CmdError::Fatal(e) => Err(e),
    })
}

enum CmdError {
    /// Some inputs failed and were reported; the rest succeeded.
    Partial,
    Fatal(Error),
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Fatal(e)
    }
}

type CmdResult = std::result::Result<(), CmdError>;

/// Config text and the file it came from, if any.
fn config_source(name: &str) -> Result<(String, Option<PathBuf>)> {
    let path = Path::new(name);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        return Ok((text, Some(path.to_path_buf())));
    }
    let stem = name.strip_suffix(".cfg").unwrap_or(name);
    match builtin(stem) {
        Some(text) => Ok((text.to_string(), None)),
        None => {
            let names: Vec<&str> = BUILTIN_CONFIGS.iter().map(|(n, _)| *n).collect();
            Err(Error::Usage(format!(
                "config `{name}` is neither a file nor a built-in ({})",
                names.join(", ")
            )))
        }
    }
}

fn load_config(args: &ConfigArgs, run: &mut Run) -> Result<ExperimentConfig> {
    let (text, path) = config_source(&args.config)?;
    if let Some(p) = &path {
        run.input(p)?;
    }
    let label = path.clone().unwrap_or_else(|| PathBuf::from(format!("<builtin {}>", args.config)));
    let mut doc = Document::parse(&text, label)?;
    for o in &args.overrides {
        doc.set(o)?;
    }
    if let Some(seed) = args.seed {
        doc.set(&format!("train.seed={seed}"))?;
    }
    let cfg = ExperimentConfig::from_document(&doc)?;
    run.seed = Some(cfg.train.seed);
    run.config = Some(cfg.render());
    Ok(cfg)
}

fn open_dataset(spec: &str, synth_images: usize, seed: u64, num_classes: usize, imgsz: usize, run: &mut Run) -> Result<Dataset> {
    if spec == "synth" {
        let data = synth_dataset(&SynthConfig::new(seed, synth_images, num_classes))?;
        return Dataset::from_synth(&data, imgsz);
    }
    let path = Path::new(spec);
    let file = if path.is_dir() { path.join("annotations.json") } else { path.to_path_buf() };
    run.input(&file)?;
    Dataset::open(path, imgsz, None, images::read_any)
}

fn cmd_train(a: TrainArgs, argv: &[String]) -> CmdResult {
    let mut run = Run::new("train", a.out, argv);
    let cfg = load_config(&a.config, &mut run)?;
    let (m, s, seed) = (cfg.model.num_classes, cfg.data.imgsz, cfg.train.seed);
    let ds = open_dataset(&a.data.dataset, a.data.synth_images, seed, m, s, &mut run)?;
    let val = match &a.val {
        Some(v) => Some(open_dataset(v, a.data.synth_images, seed, m, s, &mut run)?),
        None => None,
    };
    let mut log_lines = String::new();
    let result = train_with(&cfg, &ds, val.as_ref(), &mut |r| {
        log_lines.push_str(&(serde_json::to_string(r).expect("log records serialise") + "\n"));
        match r {
            LogRecord::Step { step, loss, .. } if step % 10 == 0 => eprintln!("step {step} loss {loss:.4}"),
            LogRecord::Epoch { epoch, map50, .. } => eprintln!("epoch {epoch} mAP50 {map50:.4}"),
            _ => {}
        }
    });
    run.write("config.cfg", cfg.render().as_bytes())?;
    run.write("train_log.jsonl", log_lines.as_bytes())?;
    match result {
        Ok(out) => {
            run.write("last.ckpt", &write_checkpoint(&out.checkpoint))?;
            let dir = run.out.clone();
            run.finish()?;
            println!("wrote {}", dir.join("last.ckpt").display());
            Ok(())
        }
        Err(Error::Diverged { step, reason, last_good }) => {
            let ckpt = Checkpoint {
                model: *last_good,
                slide: Default::default(),
                step: step as u64,
            };
            run.write("last_good.ckpt", &write_checkpoint(&ckpt))?;
            run.finish()?;
            Err(Error::Diverged {
                step,
                reason,
                last_good: Box::new(ckpt.model),
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(a: EvalArgs, argv: &[String]) -> CmdResult {
    let mut run = Run::new("eval", a.out, argv);
    run.input(&a.checkpoint)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.model;
    let ds = open_dataset(&a.data.dataset, a.data.synth_images, a.seed, model.num_classes(), a.imgsz, &mut run)?;
    let cfg = EvalConfig {
        conf: a.conf,
        iou: a.iou,
        ..EvalConfig::default()
    };
    run.seed = Some(a.seed);
    run.config = Some(model.config.render());
    let out = evaluate(&model, &ds, &cfg)?;
    let table = out.report.to_table();
    print!("{table}");
    let mut preds = String::new();
    for (i, dets) in out.detections.iter().enumerate() {
        let tf = ds.transform(i);
        for d in dets {
            let mut src = *d;
            src.bbox = tf.inverse(&d.bbox);
            let rec = PredictionRecord::new(ds.image_id(i), &src);
            preds.push_str(&(serde_json::to_string(&rec).expect("record serialises") + "\n"));
        }
    }
    run.write("report.txt", table.as_bytes())?;
    run.write(
        "report.json",
        (serde_json::to_string_pretty(&out.report).expect("report serialises") + "\n").as_bytes(),
    )?;
    run.write("predictions.jsonl", preds.as_bytes())?;
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct FileDetection<'a> {
    file: &'a str,
    #[serde(flatten)]
    detection: msyolo::model::Detection,
}

fn cmd_detect(a: DetectArgs, argv: &[String]) -> CmdResult {
    let mut run = Run::new("detect", a.out, argv);
    run.input(&a.checkpoint)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    run.config = Some(ckpt.model.config.render());
    if a.imgsz == 0 || !a.imgsz.is_multiple_of(32) {
        return Err(Error::Usage(format!(
            "--imgsz {} is not divisible by 32; try {}",
            a.imgsz,
            a.imgsz.div_ceil(32).max(1) * 32
        ))
        .into());
    }
    let cfg = EvalConfig {
        conf: a.conf,
        iou: a.iou,
        ..EvalConfig::default()
    };
    let mut lines = String::new();
    let mut failed = 0;
    for path in &a.images {
        let result = images::read_any(path).and_then(|img| {
            let dets = detect(&ckpt.model, &img, a.imgsz, &cfg)?;
            Ok((img, dets))
        });
        let (img, dets) = match result {
            Ok(v) => v,
            Err(e) => {
                eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
                failed += 1;
                continue;
            }
        };
        run.input(path)?;
        let file = path.display().to_string();
        for d in &dets {
            let rec = FileDetection { file: &file, detection: *d };
            lines.push_str(&(serde_json::to_string(&rec).expect("record serialises") + "\n"));
        }
        if a.overlay {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let drawn = images::draw_boxes(&img, &dets);
            run.write(&format!("overlay/{stem}.pgm"), &msyolo::data::encode_pgm(&drawn))?;
        }
        println!("{file}: {} detections", dets.len());
    }
    run.write("detections.jsonl", lines.as_bytes())?;
    run.finish()?;
    if failed > 0 {
        eprintln!("error[io]: {failed} of {} images failed", a.images.len());
        return Err(CmdError::Partial);
    }
    Ok(())
}

fn cmd_flops(a: FlopsArgs, argv: &[String]) -> CmdResult {
    let mut run = Run::new("flops", a.out, argv);
    let cfg = load_config(&a.config, &mut run)?;
    if a.imgsz == 0 || !a.imgsz.is_multiple_of(32) {
        return Err(Error::Usage(format!(
            "--imgsz {} is not divisible by 32; try {}",
            a.imgsz,
            a.imgsz.div_ceil(32).max(1) * 32
        ))
        .into());
    }
    let model = msyolo::model::build_msyolo(&cfg.model, cfg.train.seed)?;
    let report = model_cost(&model, a.imgsz, a.imgsz)?;
    let table = report.to_table();
    print!("{table}");
    run.write("flops.txt", table.as_bytes())?;
    run.write(
        "flops.json",
        (serde_json::to_string_pretty(&report).expect("report serialises") + "\n").as_bytes(),
    )?;
    run.finish()?;
    Ok(())
}

fn cmd_stats(a: StatsArgs, argv: &[String]) -> CmdResult {
    let mut run = Run::new("stats", a.out, argv);
    run.seed = Some(a.seed);
    let classes = a.classes.as_deref();
    let load = |p: &Path, run: &mut Run| -> Result<AnnotationSet> {
        run.input(p)?;
        let raw = load_annotations(p, None)?;
        let names = classes.map(<[String]>::to_vec).unwrap_or_else(|| default_classes(&raw.categories));
        let (set, counts) = filter_categories(&raw, &names)?;
        println!(
            "{}: kept {} instances in {} images ({} with instances), removed {}",
            p.display(),
            counts.instances,
            counts.images,
            counts.images_with_instances,
            counts.removed_instances
        );
        Ok(set)
    };
    let (set, splits) = if let Some(path) = &a.annotations {
        let set = load(path, &mut run)?;
        let splits = match &a.splits {
            Some(sp) => {
                run.input(sp)?;
                let text = std::fs::read_to_string(sp).map_err(|e| Error::Io {
                    path: sp.clone(),
                    source: e,
                })?;
                serde_json::from_str::<SplitAssignment>(&text).map_err(|e| Error::Parse {
                    path: sp.clone(),
                    line: e.line(),
                    column: e.column(),
                    message: e.to_string(),
                })?
            }
            None => random_split(&set, a.seed, DEFAULT_SPLIT_FRACTIONS),
        };
        (set, splits)
    } else {
        let mut parts = Vec::new();
        for (split, p) in [(Split::Train, &a.train), (Split::Test, &a.test), (Split::Validation, &a.val)] {
            if let Some(p) = p {
                parts.push((split, load(p, &mut run)?));
            }
        }
        if parts.is_empty() {
            return Err(Error::Usage("stats needs --annotations or at least one of --train/--test/--val".into()).into());
        }
        merge_splits(&parts)?
    };
    let stats = dataset_stats(&set, &splits)?;
    let total: usize = stats.rows.iter().map(|r| r.pictures).sum();
    println!("all splits: {total} pictures, {} instances", stats.total_instances);
    let table = stats.to_table();
    print!("{table}");
    run.write("stats.txt", table.as_bytes())?;
    run.write(
        "stats.json",
        (serde_json::to_string_pretty(&stats).expect("stats serialise") + "\n").as_bytes(),
    )?;
    run.finish()?;
    Ok(())
}

fn cmd_synth(a: SynthArgs, argv: &[String]) -> CmdResult {
    let mut run = Run::new("synth", a.out, argv);
    run.seed = Some(a.seed);
    let mut cfg = SynthConfig::new(a.seed, a.images, a.classes);
    cfg.width = a.width;
    cfg.height = a.height;
    if let Some(f) = a.freq {
        cfg.class_frequencies = f;
    }
    let data = synth_dataset(&cfg)?;
    let files = write_synth(&run.out, &data)?;
    for f in &files {
        run.record(f)?;
    }
    run.config = Some(serde_json::to_string(&cfg).expect("config serialises"));
    let dir = run.out.clone();
    run.finish()?;
    println!(
        "wrote {} images, {} instances to {}",
        data.images.len(),
        data.annotations.instances.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs, argv: &[String]) -> CmdResult {
    let mut run = Run::new("ablate", a.out, argv);
    let cfg = load_config(&a.config, &mut run)?;
    let baseline_name = match &a.baseline {
        Some(b) => b.clone(),
        None => {
            let stem = a.config.config.trim_end_matches(".cfg");
            let stem = Path::new(stem).file_name().and_then(|s| s.to_str()).unwrap_or(stem);
            match stem.strip_prefix("msyolo-") {
                Some(size) => format!("yolov8-{size}"),
                None => return Err(Error::Usage("--baseline is required for custom configs".into()).into()),
            }
        }
    };
    let (text, path) = config_source(&baseline_name)?;
    if let Some(p) = &path {
        run.input(p)?;
    }
    let baseline = ModelConfig::parse(&text)?;
    if baseline.num_classes != cfg.model.num_classes {
        return Err(Error::Validation(format!(
            "baseline has {} classes, model has {}",
            baseline.num_classes, cfg.model.num_classes
        ))
        .into());
    }
    let (m, s, seed) = (cfg.model.num_classes, cfg.data.imgsz, cfg.train.seed);
    let train_set = open_dataset(&a.data.dataset, a.data.synth_images, seed, m, s, &mut run)?;
    let eval_set = match &a.eval_dataset {
        Some(e) => open_dataset(e, a.data.synth_images, seed, m, s, &mut run)?,
        None => train_set.clone(),
    };
    let table = ablate(&train_set, &eval_set, &cfg, &baseline)?;
    let text = table.to_table();
    print!("{text}");
    run.write("ablation.txt", text.as_bytes())?;
    run.write(
        "ablation.json",
        (serde_json::to_string_pretty(&table).expect("table serialises") + "\n").as_bytes(),
    )?;
    run.finish()?;
    Ok(())
}
