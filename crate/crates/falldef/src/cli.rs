//! Command-line entry point: `prepare`, `train`, `eval`, `serve`, `replay`,
//! and `sweep`.
//!
//! Configuration precedence is flags over environment variables over
//! defaults, and the defaults reproduce the reference training setup
//! (learning rate 1e-4, batch 128, 40-sample windows, 25-point fall
//! threshold), so a bare `train` run needs no tuning flags.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training
//! divergence, 4 I/O failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    balance_downsample, compute_norm_stats, count_labels, load_windows, make_windows_all,
    parse_csv, save_manifest, save_windows, split_validation, CsvColumn, CsvSchema, DataError,
    DatasetManifest, Label, NormStats, Segment, SplitCounts, WindowConfig,
    DATASET_FORMAT_VERSION,
};
use crate::dgru::{load_model, save_model, DgruModel, ModelConfig, ModelError};
use crate::edge::{replay, run_server, EdgeError, ReplayConfig, ServeConfig};
use crate::metrics::{evaluate_model, save_report, EvalReport, MetricsError};
use crate::numerics::Rng;
use crate::training::{
    evaluate_split, save_epoch_log, train_with_eval_hook, Optimizer, TrainConfig, TrainError,
    TrainReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Edge(#[from] EdgeError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Map every error to the documented exit codes. Flag and config
    /// mistakes are usage errors; malformed or inconsistent inputs are data
    /// errors; non-finite training is divergence; the filesystem and network
    /// are I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Data(e) => data_exit(e),
            CliError::Model(e) => model_exit(e),
            CliError::Train(e) => train_exit(e),
            CliError::Metrics(e) => metrics_exit(e),
            CliError::Edge(e) => edge_exit(e),
        }
    }
}

fn data_exit(e: &DataError) -> i32 {
    match e {
        DataError::Io { .. } => EXIT_IO,
        DataError::Schema { .. } | DataError::WindowConfig { .. } | DataError::InvalidFraction { .. } => {
            EXIT_USAGE
        }
        _ => EXIT_DATA,
    }
}

fn model_exit(e: &ModelError) -> i32 {
    match e {
        ModelError::Io { .. } => EXIT_IO,
        ModelError::Config { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn train_exit(e: &TrainError) -> i32 {
    match e {
        TrainError::Config { .. } => EXIT_USAGE,
        TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. } => EXIT_DIVERGED,
        TrainError::Io { .. } => EXIT_IO,
        TrainError::Model(inner) => model_exit(inner),
        _ => EXIT_DATA,
    }
}

fn metrics_exit(e: &MetricsError) -> i32 {
    match e {
        MetricsError::Io { .. } => EXIT_IO,
        MetricsError::Model(inner) => model_exit(inner),
        _ => EXIT_DATA,
    }
}

fn edge_exit(e: &EdgeError) -> i32 {
    match e {
        EdgeError::Config { .. } => EXIT_USAGE,
        EdgeError::Io { .. } => EXIT_IO,
        EdgeError::Model(inner) => model_exit(inner),
        _ => EXIT_DATA,
    }
}

fn io_ctx(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

// ---------------------------------------------------------------------------
// Argument structures
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "falldef",
    version,
    about = "Accelerometer fall detection: data preparation, GRU training, evaluation, and a streaming alert service"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest CSV recordings into windowed, balanced, split artifacts
    Prepare(PrepareArgs),
    /// Train the classifier on prepared artifacts
    Train(TrainArgs),
    /// Evaluate a trained model on a prepared split
    Eval(EvalArgs),
    /// Run the streaming inference service
    Serve(ServeArgs),
    /// Stream a recording to a running service and summarize the alerts
    Replay(ReplayArgs),
    /// Train over a config grid and report the best row by validation loss
    Sweep(SweepArgs),
}

/// How to read the input CSV flavor. Columns accept a header name or a
/// zero-based index; pure digits mean an index.
#[derive(Debug, Args, Clone)]
pub struct SchemaArgs {
    /// Field delimiter (single character; "tab" or "\t" for tab)
    #[arg(long, default_value = ",")]
    pub delimiter: String,
    /// The files have no header row (column references must be indices)
    #[arg(long)]
    pub no_header: bool,
    /// Time column (seconds); "none" if the data has no clock
    #[arg(long, default_value = "t")]
    pub col_t: String,
    #[arg(long, default_value = "ax")]
    pub col_ax: String,
    #[arg(long, default_value = "ay")]
    pub col_ay: String,
    #[arg(long, default_value = "az")]
    pub col_az: String,
    /// Point-label column; "none" for unlabeled recordings
    #[arg(long, default_value = "label")]
    pub col_label: String,
    /// Column whose value change starts a new segment; "none" for single-segment files
    #[arg(long, default_value = "none")]
    pub col_segment: String,
    /// Token(s) in the label column meaning fall (repeatable)
    #[arg(long, default_value = "1")]
    pub fall_token: Vec<String>,
    /// Token(s) in the label column meaning non-fall (repeatable)
    #[arg(long, default_value = "0")]
    pub non_fall_token: Vec<String>,
}

fn parse_column(spec: &str) -> Option<CsvColumn> {
    if spec.eq_ignore_ascii_case("none") {
        return None;
    }
    if !spec.is_empty() && spec.bytes().all(|b| b.is_ascii_digit()) {
        // Leading zeros and huge values parse or fail loudly below.
        if let Ok(i) = spec.parse::<usize>() {
            return Some(CsvColumn::Index(i));
        }
    }
    Some(CsvColumn::Name(spec.to_string()))
}

impl SchemaArgs {
    pub fn to_schema(&self) -> Result<CsvSchema, CliError> {
        let delimiter = match self.delimiter.as_str() {
            "tab" | "\\t" | "\t" => b'\t',
            s if s.len() == 1 && s.is_ascii() => s.as_bytes()[0],
            other => {
                return Err(CliError::Usage(format!(
                    "--delimiter must be one ASCII character (or \"tab\"), got {other:?}"
                )))
            }
        };
        let required = |spec: &str, flag: &str| -> Result<CsvColumn, CliError> {
            parse_column(spec).ok_or_else(|| {
                CliError::Usage(format!("{flag} cannot be \"none\": the axis columns are required"))
            })
        };
        let mut label_tokens: Vec<(String, Label)> = Vec::new();
        for token in &self.non_fall_token {
            label_tokens.push((token.clone(), Label::NonFall));
        }
        for token in &self.fall_token {
            label_tokens.push((token.clone(), Label::Fall));
        }
        let schema = CsvSchema {
            delimiter,
            has_header: !self.no_header,
            t: parse_column(&self.col_t),
            ax: required(&self.col_ax, "--col-ax")?,
            ay: required(&self.col_ay, "--col-ay")?,
            az: required(&self.col_az, "--col-az")?,
            label: parse_column(&self.col_label),
            segment: parse_column(&self.col_segment),
            label_tokens,
        };
        schema.validate()?;
        Ok(schema)
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Training recording(s), repeatable
    #[arg(long = "train", required = true, value_name = "CSV")]
    pub train_files: Vec<PathBuf>,
    /// Held-out test recording(s), repeatable
    #[arg(long = "test", value_name = "CSV")]
    pub test_files: Vec<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long, short, default_value = "prepared")]
    pub out_dir: PathBuf,
    /// Samples per window
    #[arg(long, default_value_t = 40)]
    pub window: usize,
    /// Fall-labeled points required to label a window as a fall
    #[arg(long, default_value_t = 25)]
    pub fall_threshold: usize,
    /// Window start step
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Fraction of training windows held out for validation
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    pub validation_fraction: f64,
    /// Keep the natural class imbalance instead of downsampling
    #[arg(long)]
    pub no_balance: bool,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory produced by `prepare` (train.fdw and val.fdw)
    #[arg(long, default_value = "prepared")]
    pub data: PathBuf,
    /// Output directory for model.json, epochs.csv, train-manifest.json
    #[arg(long, short, default_value = "run")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1e-4, allow_negative_numbers = true)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Global L2 gradient-norm cap
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    pub clip: f64,
    #[arg(long, default_value = "adam")]
    pub optimizer: Optimizer,
    /// GRU hidden state width
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    /// Stacked GRU layers
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Output head hidden width
    #[arg(long, default_value_t = 256)]
    pub head_dim: usize,
    /// Skip input standardization
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// A window artifact (e.g. prepared/test.fdw)
    #[arg(long)]
    pub data: PathBuf,
    /// Where the JSON report goes
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "FALLDEF_MODEL")]
    pub model: PathBuf,
    #[arg(long, env = "FALLDEF_BIND", default_value = "127.0.0.1:7787")]
    pub bind: String,
    /// Alert when p_fall reaches this probability
    #[arg(long, env = "FALLDEF_THRESHOLD", default_value_t = 0.5, allow_negative_numbers = true)]
    pub threshold: f64,
    /// Minimum event-time seconds between alerts on one connection
    #[arg(long, env = "FALLDEF_COOLDOWN", default_value_t = 10.0, allow_negative_numbers = true)]
    pub cooldown: f64,
    /// Classify once per this many samples once the buffer is warm
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// POST each alert to this URL
    #[arg(long, env = "FALLDEF_WEBHOOK")]
    pub webhook: Option<String>,
    #[arg(long, default_value = "falldef-alerts.log")]
    pub alert_log: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Recording to stream
    #[arg(long)]
    pub file: PathBuf,
    /// Address of a running `serve`
    #[arg(long, default_value = "127.0.0.1:7787")]
    pub addr: String,
    /// Native sampling rate used when the file has no time column
    #[arg(long, default_value_t = crate::edge::DEFAULT_RATE_HZ, allow_negative_numbers = true)]
    pub rate_hz: f64,
    /// Pacing multiplier (2.0 = twice as fast as recorded)
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub speedup: f64,
    /// Send as fast as the socket allows
    #[arg(long)]
    pub no_pacing: bool,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Directory produced by `prepare`
    #[arg(long, default_value = "prepared")]
    pub data: PathBuf,
    /// Summary table destination
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
    /// Learning rates to try (comma-separated)
    #[arg(long, value_delimiter = ',', default_value = "0.0001", allow_negative_numbers = true)]
    pub lr: Vec<f64>,
    /// Hidden widths to try
    #[arg(long, value_delimiter = ',', default_value = "256")]
    pub hidden: Vec<usize>,
    /// Batch sizes to try
    #[arg(long, value_delimiter = ',', default_value = "128")]
    pub batch: Vec<usize>,
    /// Patience values to try
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub patience: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Output head width; 0 means "same as hidden"
    #[arg(long, default_value_t = 0)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value = "adam")]
    pub optimizer: Optimizer,
    #[arg(long)]
    pub no_normalize: bool,
    /// Base seed; row k trains with seed base+k
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parse argv and run. Returns the process exit code; `main` should pass it
/// to `std::process::exit`.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let requested = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if requested { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Prepare(args) => run_prepare(&args),
        Command::Train(args) => run_train(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Serve(args) => run_serve(&args),
        Command::Replay(args) => run_replay(&args),
        Command::Sweep(args) => run_sweep(&args),
    }
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

fn read_segments(files: &[PathBuf], schema: &CsvSchema) -> Result<Vec<Segment>, CliError> {
    let mut segments = Vec::new();
    for path in files {
        let file = std::fs::File::open(path)
            .map_err(|e| CliError::Data(DataError::Io {
                path: path.display().to_string(),
                source: e,
            }))?;
        let source_id = path.display().to_string();
        segments.extend(parse_csv(file, &source_id, schema)?);
    }
    Ok(segments)
}

fn run_prepare(args: &PrepareArgs) -> Result<(), CliError> {
    let schema = args.schema.to_schema()?;
    let window_cfg = WindowConfig {
        window_size: args.window,
        fall_point_threshold: args.fall_threshold,
        stride: args.stride,
    };
    window_cfg.validate()?;

    let train_segments = read_segments(&args.train_files, &schema)?;
    let train_windows = make_windows_all(&train_segments, &window_cfg)?;
    let (fall, non_fall) = count_labels(&train_windows);
    println!(
        "ingested {} training segment(s): {} windows ({fall} fall, {non_fall} non-fall)",
        train_segments.len(),
        train_windows.len()
    );

    let mut rng = Rng::new(args.seed);
    let balanced = if args.no_balance {
        train_windows
    } else {
        let b = balance_downsample(train_windows, &mut rng)?;
        let (bf, bn) = count_labels(&b);
        println!("balanced by downsampling: {bf} fall, {bn} non-fall");
        b
    };
    let (train_split, val_split) = split_validation(balanced, args.validation_fraction, &mut rng)?;
    println!(
        "split: {} train, {} validation",
        train_split.len(),
        val_split.len()
    );

    std::fs::create_dir_all(&args.out_dir)
        .map_err(io_ctx(format!("create {}", args.out_dir.display())))?;
    save_windows(&args.out_dir.join("train.fdw"), &train_split, args.window)?;
    save_windows(&args.out_dir.join("val.fdw"), &val_split, args.window)?;

    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), SplitCounts::of(&train_split));
    splits.insert("validation".to_string(), SplitCounts::of(&val_split));

    if !args.test_files.is_empty() {
        let test_segments = read_segments(&args.test_files, &schema)?;
        let test_windows = make_windows_all(&test_segments, &window_cfg)?;
        let (tf, tn) = count_labels(&test_windows);
        println!("test split: {} windows ({tf} fall, {tn} non-fall)", test_windows.len());
        save_windows(&args.out_dir.join("test.fdw"), &test_windows, args.window)?;
        splits.insert("test".to_string(), SplitCounts::of(&test_windows));
    }

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        window: window_cfg,
        seed: args.seed,
        validation_fraction: args.validation_fraction,
        balanced: !args.no_balance,
        train_sources: args.train_files.iter().map(|p| p.display().to_string()).collect(),
        test_sources: args.test_files.iter().map(|p| p.display().to_string()).collect(),
        splits,
    };
    let manifest_path = args.out_dir.join("manifest.json");
    save_manifest(&manifest_path, &manifest)?;
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Sidecar written next to the model: the full resolved configuration plus
/// the training outcome. Deliberately timestamp-free so reruns are
/// byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainManifest {
    pub format_version: u32,
    pub data_dir: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub normalize: bool,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub stopped_early: bool,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
}

pub const TRAIN_MANIFEST_VERSION: u32 = 1;

fn load_split(dir: &Path, name: &str) -> Result<crate::dataset::WindowSet, CliError> {
    Ok(load_windows(&dir.join(name))?)
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let train_cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch,
        max_epochs: args.max_epochs,
        patience: args.patience,
        grad_clip_norm: args.clip,
        optimizer: args.optimizer,
        seed: args.seed,
    };
    train_cfg.validate()?;

    let train_set = load_split(&args.data, "train.fdw")?;
    let val_set = load_split(&args.data, "val.fdw")?;
    if train_set.window_size != val_set.window_size {
        return Err(CliError::Data(DataError::Artifact {
            path: args.data.display().to_string(),
            reason: format!(
                "train.fdw windows have {} samples but val.fdw has {}",
                train_set.window_size, val_set.window_size
            ),
        }));
    }
    let model_cfg = ModelConfig {
        hidden_dim: args.hidden,
        num_layers: args.layers,
        head_dim: args.head_dim,
        window_size: train_set.window_size,
    };
    let norm = if args.no_normalize {
        NormStats::identity()
    } else {
        compute_norm_stats(&train_set.instances)?
    };
    let mut model = DgruModel::new(&model_cfg, &mut Rng::new(args.seed))?;
    model.norm = norm;

    println!(
        "training on {} windows (validating on {}), hidden {} x {} layer(s)",
        train_set.instances.len(),
        val_set.instances.len(),
        args.hidden,
        args.layers
    );
    let mut epoch = 0usize;
    let (best_model, report) = train_with_eval_hook(
        model,
        &train_set.instances,
        &val_set.instances,
        &train_cfg,
        |m, v| {
            let scored = evaluate_split(m, v)?;
            epoch += 1;
            log::info!(
                "epoch {epoch}: val_loss {:.6}, val_accuracy {:.4}",
                scored.0,
                scored.1
            );
            Ok(scored)
        },
    )?;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(io_ctx(format!("create {}", args.out_dir.display())))?;
    save_model(&best_model, &args.out_dir.join("model.json"))?;
    save_epoch_log(&args.out_dir.join("epochs.csv"), &report.records)?;
    write_train_manifest(&args.out_dir.join("train-manifest.json"), args, &model_cfg, &train_cfg, &report)?;

    let best = report
        .records
        .iter()
        .find(|r| r.epoch == report.best_epoch)
        .copied();
    match best {
        Some(r) => println!(
            "stopped after epoch {} ({}); best epoch {} with val_loss {:.6}, val_accuracy {:.4}",
            report.stopped_epoch,
            if report.stopped_early { "early stop" } else { "epoch limit" },
            report.best_epoch,
            r.val_loss,
            r.val_accuracy
        ),
        None => println!("no completed epochs"),
    }
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn write_train_manifest(
    path: &Path,
    args: &TrainArgs,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    report: &TrainReport,
) -> Result<(), CliError> {
    let best = report.records.iter().find(|r| r.epoch == report.best_epoch);
    let manifest = TrainManifest {
        format_version: TRAIN_MANIFEST_VERSION,
        data_dir: args.data.display().to_string(),
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        normalize: !args.no_normalize,
        best_epoch: report.best_epoch,
        stopped_epoch: report.stopped_epoch,
        stopped_early: report.stopped_early,
        best_val_loss: best.map(|r| r.val_loss).unwrap_or(f64::NAN),
        best_val_accuracy: best.map(|r| r.val_accuracy).unwrap_or(f64::NAN),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| {
        CliError::Usage(format!("cannot serialize train manifest: {e}"))
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_ctx(format!("write {}", path.display())))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Render the report the way it is printed after `eval`.
pub fn format_report(report: &EvalReport) -> String {
    let c = &report.confusion;
    let mut out = String::new();
    out.push_str(&format!(
        "instances: {} ({} fall, {} non-fall)\n",
        c.total(),
        c.fall_support(),
        c.non_fall_support()
    ));
    out.push_str(&format!(
        "confusion: tp {} / fp {} / tn {} / fn {}\n",
        c.true_pos, c.false_pos, c.true_neg, c.false_neg
    ));
    out.push_str(&format!("accuracy:  {:.4}\n", report.accuracy));
    out.push_str("               precision   recall       f1  support\n");
    for (name, m) in [("fall", &report.fall), ("non_fall", &report.non_fall)] {
        out.push_str(&format!(
            "{name:<12} {:>11.4} {:>8.4} {:>8.4} {:>8}\n",
            m.precision, m.recall, m.f1, m.support
        ));
    }
    out.push_str(&format!(
        "{:<12} {:>11.4} {:>8.4} {:>8.4} {:>8}",
        "weighted",
        report.weighted.precision,
        report.weighted.recall,
        report.weighted.f1,
        c.total()
    ));
    out
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let windows = load_windows(&args.data)?;
    if windows.window_size != model.window_size {
        return Err(CliError::Data(DataError::Artifact {
            path: args.data.display().to_string(),
            reason: format!(
                "windows have {} samples but the model expects {}",
                windows.window_size, model.window_size
            ),
        }));
    }
    let report = evaluate_model(&model, &windows.instances)?;
    save_report(&args.report, &report)?;
    println!("{}", format_report(&report));
    println!("wrote {}", args.report.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// serve / replay
// ---------------------------------------------------------------------------

fn run_serve(args: &ServeArgs) -> Result<(), CliError> {
    let cfg = ServeConfig {
        bind_addr: args.bind.clone(),
        model_path: args.model.clone(),
        alert_threshold: args.threshold,
        cooldown_seconds: args.cooldown,
        stride: args.stride,
        webhook_url: args.webhook.clone(),
        webhook_attempts: 3,
        webhook_backoff: Duration::from_millis(500),
        alert_log_path: args.alert_log.clone(),
    };
    let server = run_server(&cfg)?;
    println!("listening on {}", server.local_addr());
    println!(
        "threshold {}, cooldown {}s, stride {}, alerts -> {}{}",
        cfg.alert_threshold,
        cfg.cooldown_seconds,
        cfg.stride,
        cfg.alert_log_path.display(),
        match &cfg.webhook_url {
            Some(url) => format!(", webhook {url}"),
            None => String::new(),
        }
    );
    // Serve until the process is killed.
    loop {
        std::thread::park();
    }
}

fn run_replay(args: &ReplayArgs) -> Result<(), CliError> {
    let schema = args.schema.to_schema()?;
    let file = std::fs::File::open(&args.file).map_err(|e| {
        CliError::Data(DataError::Io {
            path: args.file.display().to_string(),
            source: e,
        })
    })?;
    let segments = parse_csv(file, &args.file.display().to_string(), &schema)?;
    let cfg = ReplayConfig {
        addr: args.addr.clone(),
        rate_hz: args.rate_hz,
        speedup: if args.no_pacing { f64::INFINITY } else { args.speedup },
    };
    let summary = replay(&segments, &cfg)?;
    println!("{summary}");
    for (i, alert) in summary.alerts.iter().enumerate() {
        println!(
            "alert {}: p_fall {:.4}, window t [{:.3}, {:.3}]",
            i + 1,
            alert.p_fall,
            alert.window_start_t,
            alert.window_end_t
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct SweepRow {
    row: usize,
    learning_rate: f64,
    hidden: usize,
    batch: usize,
    patience: usize,
    seed: u64,
    best_epoch: usize,
    stopped_epoch: usize,
    best_val_loss: f64,
    best_val_accuracy: f64,
}

fn run_sweep(args: &SweepArgs) -> Result<(), CliError> {
    if args.lr.is_empty() || args.hidden.is_empty() || args.batch.is_empty() || args.patience.is_empty()
    {
        return Err(CliError::Usage(
            "sweep needs at least one value for each of --lr, --hidden, --batch, --patience".into(),
        ));
    }
    let train_set = load_split(&args.data, "train.fdw")?;
    let val_set = load_split(&args.data, "val.fdw")?;
    let norm = if args.no_normalize {
        NormStats::identity()
    } else {
        compute_norm_stats(&train_set.instances)?
    };

    let total = args.lr.len() * args.hidden.len() * args.batch.len() * args.patience.len();
    let mut rows: Vec<SweepRow> = Vec::with_capacity(total);
    let mut row_idx = 0usize;
    for &lr in &args.lr {
        for &hidden in &args.hidden {
            for &batch in &args.batch {
                for &patience in &args.patience {
                    let seed = args.seed.wrapping_add(row_idx as u64);
                    let train_cfg = TrainConfig {
                        learning_rate: lr,
                        batch_size: batch,
                        max_epochs: args.max_epochs,
                        patience,
                        grad_clip_norm: args.clip,
                        optimizer: args.optimizer,
                        seed,
                    };
                    train_cfg.validate()?;
                    let model_cfg = ModelConfig {
                        hidden_dim: hidden,
                        num_layers: args.layers,
                        head_dim: if args.head_dim == 0 { hidden } else { args.head_dim },
                        window_size: train_set.window_size,
                    };
                    let mut model = DgruModel::new(&model_cfg, &mut Rng::new(seed))?;
                    model.norm = norm.clone();
                    log::info!(
                        "sweep row {}/{total}: lr {lr}, hidden {hidden}, batch {batch}, patience {patience}",
                        row_idx + 1
                    );
                    let (_, report) = crate::training::train(
                        model,
                        &train_set.instances,
                        &val_set.instances,
                        &train_cfg,
                    )?;
                    let best = report
                        .records
                        .iter()
                        .find(|r| r.epoch == report.best_epoch)
                        .copied();
                    rows.push(SweepRow {
                        row: row_idx,
                        learning_rate: lr,
                        hidden,
                        batch,
                        patience,
                        seed,
                        best_epoch: report.best_epoch,
                        stopped_epoch: report.stopped_epoch,
                        best_val_loss: best.map(|r| r.val_loss).unwrap_or(f64::NAN),
                        best_val_accuracy: best.map(|r| r.val_accuracy).unwrap_or(f64::NAN),
                    });
                    row_idx += 1;
                }
            }
        }
    }

    // Best row: smallest validation loss, first wins ties.
    let mut selected = 0usize;
    for (i, row) in rows.iter().enumerate() {
        if row.best_val_loss < rows[selected].best_val_loss {
            selected = i;
        }
    }

    let mut csv = String::from(
        "row,learning_rate,hidden,batch,patience,seed,best_epoch,stopped_epoch,best_val_loss,best_val_accuracy,selected\n",
    );
    for (i, r) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.row,
            r.learning_rate,
            r.hidden,
            r.batch,
            r.patience,
            r.seed,
            r.best_epoch,
            r.stopped_epoch,
            r.best_val_loss,
            r.best_val_accuracy,
            u8::from(i == selected)
        ));
    }
    std::fs::write(&args.out, csv).map_err(io_ctx(format!("write {}", args.out.display())))?;

    let best = &rows[selected];
    println!(
        "{} configurations swept; best row {}: lr {}, hidden {}, batch {}, patience {} -> val_loss {:.6} (accuracy {:.4}) at epoch {}",
        rows.len(),
        best.row,
        best.learning_rate,
        best.hidden,
        best.batch,
        best.patience,
        best.best_val_loss,
        best.best_val_accuracy,
        best.best_epoch
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_parse_as_names_indices_or_none() {
        assert_eq!(parse_column("ax"), Some(CsvColumn::Name("ax".into())));
        assert_eq!(parse_column("3"), Some(CsvColumn::Index(3)));
        assert_eq!(parse_column("0"), Some(CsvColumn::Index(0)));
        assert_eq!(parse_column("none"), None);
        assert_eq!(parse_column("NONE"), None);
        // Mixed alphanumerics are names.
        assert_eq!(parse_column("x2"), Some(CsvColumn::Name("x2".into())));
    }

    #[test]
    fn schema_args_build_a_valid_schema() {
        let args = SchemaArgs {
            delimiter: ";".into(),
            no_header: false,
            col_t: "time".into(),
            col_ax: "x".into(),
            col_ay: "y".into(),
            col_az: "z".into(),
            col_label: "none".into(),
            col_segment: "subject".into(),
            fall_token: vec!["1".into()],
            non_fall_token: vec!["0".into()],
        };
        let schema = args.to_schema().unwrap();
        assert_eq!(schema.delimiter, b';');
        assert!(schema.label.is_none());
        assert_eq!(schema.segment, Some(CsvColumn::Name("subject".into())));

        let mut tab = args.clone();
        tab.delimiter = "tab".into();
        assert_eq!(tab.to_schema().unwrap().delimiter, b'\t');

        let mut bad = args.clone();
        bad.delimiter = "<>".into();
        assert!(matches!(bad.to_schema(), Err(CliError::Usage(_))));

        let mut no_ax = args.clone();
        no_ax.col_ax = "none".into();
        assert!(matches!(no_ax.to_schema(), Err(CliError::Usage(_))));

        // Duplicate axis columns are caught by schema validation.
        let mut dup = args;
        dup.col_ay = "x".into();
        assert!(matches!(dup.to_schema(), Err(CliError::Data(_))));
    }

    #[test]
    fn exit_codes_match_the_documented_table() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
        assert_eq!(
            CliError::Train(TrainError::Config { reason: "lr".into() }).exit_code(),
            EXIT_USAGE
        );
        assert_eq!(
            CliError::Data(DataError::Csv {
                source_id: "f".into(),
                line: 3,
                msg: "bad".into()
            })
            .exit_code(),
            EXIT_DATA
        );
        assert_eq!(
            CliError::Data(DataError::Io {
                path: "f".into(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "gone")
            })
            .exit_code(),
            EXIT_IO
        );
        assert_eq!(
            CliError::Train(TrainError::NonFiniteGradient { param: "w".into() }).exit_code(),
            EXIT_DIVERGED
        );
        assert_eq!(
            CliError::Train(TrainError::Diverged {
                context: "training",
                epoch: 1,
                report: TrainReport {
                    records: vec![],
                    best_epoch: 0,
                    stopped_epoch: 1,
                    stopped_early: false
                }
            })
            .exit_code(),
            EXIT_DIVERGED
        );
        assert_eq!(
            CliError::Edge(EdgeError::Config { reason: "x".into() }).exit_code(),
            EXIT_USAGE
        );
        assert_eq!(
            CliError::Model(ModelError::UnsupportedVersion {
                path: "m".into(),
                found: 9,
                expected: 1
            })
            .exit_code(),
            EXIT_DATA
        );
    }

    #[test]
    fn spec_example_flags_parse() {
        // The documented training invocation shape.
        let cli = Cli::try_parse_from([
            "falldef", "train", "--data", "d/", "--lr", "0.0001", "--batch", "128",
        ])
        .unwrap();
        match cli.command {
            Command::Train(args) => {
                assert_eq!(args.lr, 1e-4);
                assert_eq!(args.batch, 128);
                assert_eq!(args.max_epochs, 100); // defaults fill the rest
                assert_eq!(args.patience, 10);
                assert_eq!(args.hidden, 256);
            }
            other => panic!("parsed {other:?}"),
        }

        // No arguments: usage error.
        assert!(Cli::try_parse_from(["falldef"]).is_err());
        // Unknown flags are rejected.
        assert!(Cli::try_parse_from(["falldef", "train", "--frobnicate"]).is_err());
    }

    #[test]
    fn negative_learning_rate_is_a_usage_error() {
        let cli = Cli::try_parse_from(["falldef", "train", "--lr", "-1"]).unwrap();
        match cli.command {
            Command::Train(args) => {
                let code = run_train(&args).unwrap_err().exit_code();
                assert_eq!(code, EXIT_USAGE);
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn sweep_value_lists_split_on_commas() {
        let cli = Cli::try_parse_from([
            "falldef", "sweep", "--lr", "0.001,0.0001", "--hidden", "8,16", "--batch", "4",
        ])
        .unwrap();
        match cli.command {
            Command::Sweep(args) => {
                assert_eq!(args.lr, vec![0.001, 0.0001]);
                assert_eq!(args.hidden, vec![8, 16]);
                assert_eq!(args.batch, vec![4]);
                assert_eq!(args.patience, vec![10]);
            }
            other => panic!("parsed {other:?}"),
        }
    }
}
