//! The `spot` command line: dataset synthesis, walk dumps, training,
//! evaluation, the four-arm ablation, and rolled-out forecasts.
//!
//! Exit codes: 0 success, 2 usage/config, 3 data, 4 numeric failure.

use std::path::{Path, PathBuf};

use chrono::Duration;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_synthetic, load_dataset, normalize, save_dataset, split_622, write_metrics_csv,
    DataError, StgDataset,
};
use crate::graph::{generate_walks, GraphError, WalkSet};
use crate::model::{checkpoint, ModelConfig, ModelError, ScanKind, SpoTModel};
use crate::numerics::NumericsError;
use crate::trainer::{
    self, default_grid, evaluate, split_anchors, train, TrainConfig, TrainerError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::Io(_) | NumericsError::Malformed(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig(_) => CliError::Usage(e.to_string()),
            ModelError::WalksetMismatch { .. } | ModelError::Checkpoint(_) => {
                CliError::Data(e.to_string())
            }
            ModelError::Numerics(inner) => inner.into(),
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Data(inner) => inner.into(),
            TrainerError::Model(inner) => inner.into(),
            TrainerError::Io(inner) => CliError::Data(inner.to_string()),
            TrainerError::NoWindows => CliError::Data(e.to_string()),
            TrainerError::Numerics(inner) => inner.into(),
            TrainerError::MissingGrad(_)
            | TrainerError::NonFinite { .. }
            | TrainerError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "spot", version, about = "Spatio-temporal graph forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic ring-graph dataset.
    Synth(SynthArgs),
    /// Generate walk sequences for a dataset and dump them to CSV.
    Walks(WalksArgs),
    /// Train a model and write a checkpoint plus history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalArgs),
    /// Train all four scan-kind arms and compare.
    Ablate(TrainArgs),
    /// Averaged rolling forecast over a split, written as CSV.
    Forecast(ForecastArgs),
    /// Hyperparameter grid search over the standard 16 points.
    Grid(TrainArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of graph nodes.
    #[arg(long, default_value_t = 10)]
    pub nodes: usize,
    /// Number of time steps.
    #[arg(long, default_value_t = 2880)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct WalksArgs {
    /// Dataset directory (reads edges.csv).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Dataset directory (signals.csv, edges.csv, meta.json).
    #[arg(long)]
    pub data: PathBuf,
    /// JSON config file with "model" and "train" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory written by `spot train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Walk seed; must match the training run for like-for-like numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ForecastArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output forecast CSV (time,node,truth,pred).
    #[arg(long)]
    pub out: PathBuf,
}

/// Command-line overrides applied on top of the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lr_decay_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// mamba or transformer.
    #[arg(long)]
    pub walk_scan: Option<String>,
    /// mamba or transformer.
    #[arg(long)]
    pub temporal_scan: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_scan_kind(s: &str) -> Result<ScanKind, CliError> {
    match s {
        "mamba" => Ok(ScanKind::Mamba),
        "transformer" => Ok(ScanKind::Transformer),
        other => Err(CliError::Usage(format!(
            "scan kind must be 'mamba' or 'transformer', got {other:?}"
        ))),
    }
}

/// Load the config file (or defaults) and apply flag overrides.
pub fn resolve_config(
    config_path: Option<&Path>,
    ov: &Overrides,
) -> Result<AppConfig, CliError> {
    let mut cfg = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        }
        None => AppConfig::default(),
    };
    if let Some(v) = ov.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = ov.m {
        cfg.model.m = v;
    }
    if let Some(v) = ov.k {
        cfg.model.k = v;
    }
    if let Some(v) = ov.d {
        cfg.model.d = v;
    }
    if let Some(v) = ov.n_layers {
        cfg.model.n_layers = v;
    }
    if let Some(v) = ov.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = ov.weight_decay {
        cfg.train.weight_decay = v;
    }
    if let Some(v) = ov.lr_decay_rate {
        cfg.train.lr_decay_rate = v;
    }
    if let Some(v) = ov.max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = ov.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = ov.patience {
        cfg.train.patience = v;
    }
    if let Some(s) = &ov.walk_scan {
        cfg.model.walk_scan_kind = parse_scan_kind(s)?;
    }
    if let Some(s) = &ov.temporal_scan {
        cfg.model.temporal_scan_kind = parse_scan_kind(s)?;
    }
    cfg.model.validate().map_err(CliError::from)?;
    Ok(cfg)
}

/// SHA-256 over the three dataset files, in fixed order.
pub fn dataset_fingerprint(dir: &Path) -> Result<String, CliError> {
    let mut hasher = Sha256::new();
    for name in ["signals.csv", "edges.csv", "meta.json"] {
        let bytes = std::fs::read(dir.join(name))
            .map_err(|e| CliError::Data(format!("{}/{name}: {e}", dir.display())))?;
        hasher.update(&bytes);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub started: String,
    pub finished: String,
    pub dataset_fingerprint: String,
    pub config: AppConfig,
}

fn now_string() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    started: String,
    fingerprint: String,
    config: &AppConfig,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command: command.to_string(),
        started,
        finished: now_string(),
        dataset_fingerprint: fingerprint,
        config: config.clone(),
    };
    std::fs::write(
        out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    Ok(())
}

fn load_normalized(dir: &Path) -> Result<StgDataset, CliError> {
    let mut ds = load_dataset(
        &dir.join("signals.csv"),
        &dir.join("edges.csv"),
        &dir.join("meta.json"),
    )?;
    let (train_range, _, _) = split_622(ds.tau());
    normalize(&mut ds, &train_range)?;
    Ok(ds)
}

fn steps_per_day_config(cfg: &mut AppConfig, ds: &StgDataset) {
    cfg.model.steps_per_day = ds.steps_per_day();
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    if args.nodes < 3 {
        return Err(CliError::Usage("need at least 3 nodes for a ring".into()));
    }
    let ds = generate_synthetic(args.nodes, args.steps, args.seed);
    save_dataset(&ds, &args.out)?;
    println!(
        "wrote synthetic dataset: {} nodes, {} steps -> {}",
        args.nodes,
        args.steps,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_walks(args: &WalksArgs) -> Result<(), CliError> {
    let graph = crate::graph::Graph::load_edge_csv(&args.data.join("edges.csv"), None)?;
    let walks = generate_walks(&graph, args.k, args.m, args.seed);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    walks.dump_csv(&args.out)?;
    println!(
        "wrote {} walks of length {} -> {}",
        3 * args.m * graph.n_nodes(),
        args.k,
        args.out.display()
    );
    Ok(())
}

/// The shared train pipeline; `arm_dir` is the run directory for one
/// configuration. Returns the trained model, its walks, and best val MAE.
fn train_pipeline(
    ds: &StgDataset,
    cfg: &AppConfig,
    out_dir: &Path,
) -> Result<(SpoTModel, WalkSet, trainer::TrainResult), CliError> {
    std::fs::create_dir_all(out_dir)?;
    let (train_a, val_a, _) = split_anchors(ds, cfg.model.t_in, cfg.model.t_out);
    let walkset = generate_walks(&ds.graph, cfg.model.k, cfg.model.m, cfg.train.seed);
    let mut model = SpoTModel::new(cfg.model.clone(), ds.n_nodes(), cfg.train.seed)?;
    let result = train(
        &mut model,
        ds,
        &walkset,
        &train_a,
        &val_a,
        &cfg.train,
        Some(&out_dir.join("history.csv")),
    )?;
    checkpoint::save(&model, &out_dir.join("checkpoint"))?;
    Ok((model, walkset, result))
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let started = now_string();
    let mut cfg = resolve_config(args.config.as_deref(), &args.overrides)?;
    let ds = load_normalized(&args.data)?;
    steps_per_day_config(&mut cfg, &ds);
    let fingerprint = dataset_fingerprint(&args.data)?;
    let (_, _, result) = train_pipeline(&ds, &cfg, &args.out)?;
    write_manifest(&args.out, "train", started, fingerprint, &cfg)?;
    println!(
        "trained {} epochs; best val MAE {} at epoch {}",
        result.epochs_run, result.best_val_mae, result.best_epoch
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let ds = load_normalized(&args.data)?;
    let model = checkpoint::load(&args.checkpoint)?;
    let walkset = generate_walks(&ds.graph, model.cfg.k, model.cfg.m, args.seed);
    let (train_a, val_a, test_a) = split_anchors(&ds, model.cfg.t_in, model.cfg.t_out);
    let anchors = match args.split.as_str() {
        "train" => train_a,
        "val" => val_a,
        "test" => test_a,
        other => {
            return Err(CliError::Usage(format!(
                "split must be train, val, or test, got {other:?}"
            )))
        }
    };
    let report = evaluate(&model, &ds, &walkset, &anchors)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_metrics_csv(&args.out, &report.csv_rows())?;
    println!(
        "{} split: model MAE {} RMSE {} MAPE {} | naive MAE {}",
        args.split, report.avg.mae, report.avg.rmse, report.avg.mape, report.naive_avg.mae
    );
    Ok(())
}

/// The four (walk, temporal) scan-kind combinations.
pub const ABLATION_ARMS: [(ScanKind, ScanKind); 4] = [
    (ScanKind::Mamba, ScanKind::Mamba),
    (ScanKind::Mamba, ScanKind::Transformer),
    (ScanKind::Transformer, ScanKind::Mamba),
    (ScanKind::Transformer, ScanKind::Transformer),
];

pub fn cmd_ablate(args: &TrainArgs) -> Result<(), CliError> {
    let started = now_string();
    let base = resolve_config(args.config.as_deref(), &args.overrides)?;
    let ds = load_normalized(&args.data)?;
    let fingerprint = dataset_fingerprint(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    let (_, _, test_a) = split_anchors(&ds, base.model.t_in, base.model.t_out);
    let mut rows = Vec::new();
    for (walk_kind, temporal_kind) in ABLATION_ARMS {
        let mut cfg = base.clone();
        cfg.model.walk_scan_kind = walk_kind;
        cfg.model.temporal_scan_kind = temporal_kind;
        steps_per_day_config(&mut cfg, &ds);
        let arm = format!("{walk_kind}_{temporal_kind}");
        let arm_dir = args.out.join(&arm);
        let (model, walkset, result) = train_pipeline(&ds, &cfg, &arm_dir)?;
        let report = evaluate(&model, &ds, &walkset, &test_a)?;
        println!(
            "arm {arm}: val MAE {} | test MAE {} RMSE {} MAPE {}",
            result.best_val_mae, report.avg.mae, report.avg.rmse, report.avg.mape
        );
        rows.push((
            arm.clone(),
            result.best_val_mae,
            report.avg.mae,
            report.avg.rmse,
            report.avg.mape,
        ));
    }
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(args.out.join("ablation.csv"))?);
    writeln!(f, "arm,val_mae,test_mae,test_rmse,test_mape")?;
    for (arm, val_mae, mae, rmse, mape) in &rows {
        writeln!(f, "{arm},{val_mae},{mae},{rmse},{mape}")?;
    }
    f.flush()?;
    write_manifest(&args.out, "ablate", started, fingerprint, &base)?;
    Ok(())
}

pub fn cmd_grid(args: &TrainArgs) -> Result<(), CliError> {
    let started = now_string();
    let mut cfg = resolve_config(args.config.as_deref(), &args.overrides)?;
    let ds = load_normalized(&args.data)?;
    steps_per_day_config(&mut cfg, &ds);
    let fingerprint = dataset_fingerprint(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    let (train_r, val_r, _) = split_622(ds.tau());
    let outcomes = trainer::grid_search(
        &cfg.model,
        &ds,
        &cfg.train,
        &default_grid(),
        &train_r,
        &val_r,
        Some(&args.out.join("leaderboard.csv")),
    )?;
    let best = &outcomes[0];
    println!(
        "best point: m={} lr={} wd={} decay={} -> val MAE {}",
        best.point.m,
        best.point.lr,
        best.point.weight_decay,
        best.point.lr_decay_rate,
        best.best_val_mae
    );
    write_manifest(&args.out, "grid", started, fingerprint, &cfg)?;
    Ok(())
}

pub fn cmd_forecast(args: &ForecastArgs) -> Result<(), CliError> {
    let ds = load_normalized(&args.data)?;
    let model = checkpoint::load(&args.checkpoint)?;
    let walkset = generate_walks(&ds.graph, model.cfg.k, model.cfg.m, args.seed);
    let (train_a, val_a, test_a) = split_anchors(&ds, model.cfg.t_in, model.cfg.t_out);
    let anchors = match args.split.as_str() {
        "train" => train_a,
        "val" => val_a,
        "test" => test_a,
        other => {
            return Err(CliError::Usage(format!(
                "split must be train, val, or test, got {other:?}"
            )))
        }
    };
    if anchors.is_empty() {
        return Err(CliError::Data("split has no forecast windows".into()));
    }
    let n = ds.n_nodes();
    let t_out = model.cfg.t_out;
    // overlapping windows: average every prediction made for each step
    let mut sums: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    let mut counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for &anchor in &anchors {
        let win = crate::data::extract_window(&ds, anchor, model.cfg.t_in, t_out)?;
        let pred = model.predict(&walkset, &win.inputs, &win.tod_idx, &win.dow_idx)?;
        for h in 0..t_out {
            let t_abs = anchor + 1 + h;
            let entry = sums.entry(t_abs).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                entry[i] += ds.denormalize(pred.data[(h * n + i) * model.cfg.d_out], 0)?;
            }
            *counts.entry(t_abs).or_insert(0) += 1;
        }
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    writeln!(f, "time,node,truth,pred")?;
    for (&t_abs, sum) in &sums {
        let count = counts[&t_abs] as f64;
        let time = ds.start_time + Duration::minutes(ds.interval_minutes as i64 * t_abs as i64);
        let time = time.format("%Y-%m-%dT%H:%M:%S");
        for (i, s) in sum.iter().enumerate() {
            let truth = ds.value(t_abs, i, 0);
            writeln!(f, "{time},{i},{truth},{}", s / count)?;
        }
    }
    f.flush()?;
    println!("wrote {} forecast steps -> {}", sums.len(), args.out.display());
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Walks(a) => cmd_walks(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Grid(a) => cmd_grid(a),
    }
}

/// Parse `args` (including argv[0]) and run; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // keep clap's help/version on stdout with success status
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}
