mod config;
mod provenance;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use signfusion::dataset::{generate_synthetic, load_dataset, LabelTable, SynthConfig, SynthMode, MANIFEST_FILE};
use signfusion::evaluation::{ablate, evaluate_model, format_report, EvaluationReport};
use signfusion::features::{derive_hand_features, flatten_frame, read_frames_csv, unflatten_frame, write_frames_csv};
use signfusion::network::{load_checkpoint, save_checkpoint, Architecture, FusionModel, TrainConfig};
use signfusion::pipeline::{train_and_evaluate, PreparedSplit};
use signfusion::preprocess::MinMaxScaler;
use signfusion::Error;

use config::{parse_override, RunConfig};
use provenance::{file_hash, write_manifest, RunRecord};

const CHECKPOINT: &str = "checkpoint.model";
const SCALER: &str = "scaler.json";
const HISTORY: &str = "history.csv";
const REPORT_TEXT: &str = "report.txt";
const REPORT_JSON: &str = "report.json";
const CONFUSION: &str = "confusion.csv";
const METRICS: &str = "metrics.csv";
const ABLATION: &str = "ablation.csv";

#[derive(Parser)]
#[command(
    name = "signfusion",
    version,
    about = "Train and evaluate a motion + image sign-gesture classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with a known class structure.
    Synth(SynthArgs),
    /// Validate a frames CSV and re-derive its angle features.
    Extract(ExtractArgs),
    /// Fit the scaler and model on the training split.
    Train(RunArgs),
    /// Score a checkpoint on the held-out test split.
    Evaluate(EvaluateArgs),
    /// Train leap-only, image-only and fusion models on one split.
    Ablate(RunArgs),
    /// Re-render an existing report JSON as text.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 18)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value = "joint", value_parser = parse_mode)]
    mode: SynthMode,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    image_side: usize,
    #[arg(long)]
    leap_noise: Option<f64>,
    #[arg(long)]
    image_noise: Option<f64>,
    /// Only write the representative frame's image per repetition.
    #[arg(long)]
    representative_only: bool,
}

fn parse_mode(s: &str) -> Result<SynthMode, String> {
    match s {
        "joint" => Ok(SynthMode::Joint),
        "split_signal" => Ok(SynthMode::SplitSignal),
        other => Err(format!("unknown mode `{other}` (expected joint or split_signal)")),
    }
}

#[derive(Args)]
struct ExtractArgs {
    /// Raw frames CSV.
    #[arg(long)]
    input: PathBuf,
    /// Where to write the re-derived CSV; omit to only validate.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Flat JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    corpus_root: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Override any config key, e.g. `--set l2_lambda=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.corpus_root {
            overrides.push(("corpus_root".to_string(), Value::from(p.to_string_lossy().into_owned())));
        }
        if let Some(p) = &self.output_dir {
            overrides.push(("output_dir".to_string(), Value::from(p.to_string_lossy().into_owned())));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".to_string(), Value::from(s)));
        }
        if let Some(e) = self.epochs {
            overrides.push(("epochs".to_string(), Value::from(e)));
        }
        for raw in &self.set {
            overrides.push(parse_override(raw)?);
        }
        RunConfig::load(&self.config, &overrides)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to `checkpoint.model` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A `report.json` written by `evaluate`.
    #[arg(long)]
    input: PathBuf,
    /// Also write `report.txt` into this directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Extract(a) => cmd_extract(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        classes: a.classes,
        repetitions: a.reps,
        mode: a.mode,
        seed: a.seed,
        image_side: a.image_side,
        leap_noise: a.leap_noise.unwrap_or(defaults.leap_noise),
        image_noise: a.image_noise.unwrap_or(defaults.image_noise),
        all_frame_images: !a.representative_only,
        ..defaults
    };
    let (labels, samples) = generate_synthetic(&a.out, &cfg)?;
    println!(
        "{} signs x {} repetitions = {} repetition directories in {}",
        labels.len(),
        cfg.repetitions,
        samples.len(),
        a.out.display()
    );
    println!("manifest sha256 {}", file_hash(&a.out.join(MANIFEST_FILE))?);
    Ok(())
}

fn cmd_extract(a: &ExtractArgs) -> Result<()> {
    let file = fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let mut rows = read_frames_csv(file, &a.input)?;
    let mut changed = 0usize;
    for row in &mut rows {
        let (left, right) = unflatten_frame(row.vector.values())?;
        let derived = flatten_frame(&derive_hand_features(&left), &derive_hand_features(&right));
        // NaN-aware: a missing value that stays missing is not a change.
        let differs = row
            .vector
            .values()
            .iter()
            .zip(derived.values())
            .any(|(x, y)| x.to_bits() != y.to_bits());
        changed += usize::from(differs);
        row.vector = derived;
    }
    println!(
        "{}: {} frames valid, {} with re-derived angles",
        a.input.display(),
        rows.len(),
        changed
    );
    if let Some(out) = &a.output {
        let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
        write_frames_csv(std::io::BufWriter::new(file), &rows).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn prepare_output(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating output_dir {}", cfg.output_dir.display()))?;
    Ok(&cfg.output_dir)
}

fn load_corpus(cfg: &RunConfig) -> Result<(LabelTable, Vec<signfusion::dataset::GestureSample>)> {
    load_dataset(&cfg.corpus_root, &cfg.load_options())
        .with_context(|| format!("loading corpus {}", cfg.corpus_root.display()))
}

fn run_record(cfg: &RunConfig, config_path: &Path) -> Result<RunRecord> {
    let mut record = RunRecord::new(serde_json::to_value(cfg)?);
    record.input_file("config", config_path)?;
    record.input_tree("corpus", &cfg.corpus_root)?;
    Ok(record)
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = a.load()?;
    let out = prepare_output(&cfg)?;
    let (labels, samples) = load_corpus(&cfg)?;
    let train_cfg = cfg.train_config();
    let arch = Architecture::new(labels.len(), cfg.image_side);

    let split = PreparedSplit::new(&samples, &labels, &cfg.split_spec())?;
    let run = train_and_evaluate(&split, &labels, &train_cfg, &arch).context("training failed")?;

    split.scaler.save(&out.join(SCALER))?;
    save_checkpoint(
        &out.join(CHECKPOINT),
        &run.model,
        &labels,
        &split.scaler,
        SCALER,
        &train_cfg,
    )?;
    let history_path = out.join(HISTORY);
    let mut w = std::io::BufWriter::new(fs::File::create(&history_path)?);
    run.history.write_csv(&mut w)?;
    std::io::Write::flush(&mut w)?;

    let mut record = run_record(&cfg, &a.config)?;
    for name in [CHECKPOINT, SCALER, HISTORY] {
        record.output(out, name)?;
    }
    write_manifest(out, "train", record)?;

    let last = run.history.last().context("empty training history")?;
    println!(
        "trained {} epochs on {} samples: train_acc {:.4} val_acc {:.4} test_accuracy {}",
        run.history.len(),
        split.train.len(),
        last.train_accuracy,
        last.val_accuracy,
        run.report.accuracy
    );
    Ok(())
}

fn write_report(cfg: &RunConfig, out: &Path, report: &EvaluationReport, record: &mut RunRecord) -> Result<()> {
    if cfg.wants("text") {
        fs::write(out.join(REPORT_TEXT), format_report(report))?;
        record.output(out, REPORT_TEXT)?;
    }
    if cfg.wants("json") {
        fs::write(out.join(REPORT_JSON), serde_json::to_string_pretty(report)? + "\n")?;
        record.output(out, REPORT_JSON)?;
    }
    if cfg.wants("csv") {
        report
            .confusion
            .write_csv(fs::File::create(out.join(CONFUSION))?, &report.labels)?;
        report.write_metrics_csv(fs::File::create(out.join(METRICS))?)?;
        record.output(out, CONFUSION)?;
        record.output(out, METRICS)?;
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut cfg = a.run.load()?;
    let out = prepare_output(&cfg)?.to_path_buf();
    let ck_path = a.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT));
    let ck = load_checkpoint(&ck_path).with_context(|| format!("loading checkpoint {}", ck_path.display()))?;
    // The model fixes the image size it was trained at.
    cfg.image_side = ck.header.architecture.image_side;

    let (labels, samples) = load_corpus(&cfg)?;
    if labels != ck.header.labels {
        return Err(Error::LabelTableMismatch(format!(
            "checkpoint has {} labels, corpus {} has {}",
            ck.header.labels.len(),
            cfg.corpus_root.display(),
            labels.len()
        ))
        .into());
    }
    let split = PreparedSplit::with_scaler(&samples, &labels, &cfg.split_spec(), ck.header.scaler.clone())?;
    let report = evaluate_model(&ck.model, &split, &labels)?;

    let mut record = run_record(&cfg, &a.run.config)?;
    record.input_file("checkpoint", &ck_path)?;
    write_report(&cfg, &out, &report, &mut record)?;
    write_manifest(&out, "evaluate", record)?;
    print!("{}", format_report(&report));
    Ok(())
}

fn save_modality_checkpoint(
    out: &Path,
    model: &FusionModel,
    labels: &LabelTable,
    scaler: &MinMaxScaler,
    cfg: &TrainConfig,
) -> Result<String> {
    let name = format!("checkpoint_{}.model", model.modality);
    save_checkpoint(&out.join(&name), model, labels, scaler, SCALER, cfg)?;
    Ok(name)
}

fn cmd_ablate(a: &RunArgs) -> Result<()> {
    let cfg = a.load()?;
    let out = prepare_output(&cfg)?;
    let (labels, samples) = load_corpus(&cfg)?;
    let train_cfg = cfg.train_config();
    let arch = Architecture::new(labels.len(), cfg.image_side);
    let result = ablate(&samples, &labels, &cfg.split_spec(), &train_cfg, &arch)?;

    let mut record = run_record(&cfg, &a.config)?;
    result.write_csv(fs::File::create(out.join(ABLATION))?)?;
    record.output(out, ABLATION)?;
    result.scaler.save(&out.join(SCALER))?;
    record.output(out, SCALER)?;
    for run in &result.runs {
        let name = save_modality_checkpoint(out, &run.model, &labels, &result.scaler, &train_cfg)?;
        record.output(out, &name)?;
        println!("{:<10} test accuracy {:.4}", run.modality.as_str(), run.accuracy);
    }
    write_manifest(out, "ablate", record)?;
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report: EvaluationReport =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    if report.per_class.len() != report.labels.len() {
        bail!(
            "{}: {} label names for {} classes",
            a.input.display(),
            report.labels.len(),
            report.per_class.len()
        );
    }
    let rendered = format_report(&report);
    if let Some(dir) = &a.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(REPORT_TEXT), &rendered)?;
    }
    print!("{rendered}");
    Ok(())
}
