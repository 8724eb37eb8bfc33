//! Command-line entry point.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{forward, AttentionMode, ModelParams, Pruning};
use crate::bench::flop_report;
use crate::decay::DecayFamily;
use crate::grid::{load_dataset, Bag, Split};
use crate::heatmap::{anchor_head_maps, export_heatmap};
use crate::synth::write_dataset;
use crate::train::{evaluate, fit, model_gradcheck, Metrics, TrainError};

pub use config::{ConfigError, RunConfig};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const COST_FILE: &str = "cost.csv";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Init(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "psamil",
    version,
    about = "Probabilistic spatial attention MIL on tile grids"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic clustered-vs-scattered dataset.
    Synth(Common),
    /// Fit a model; writes checkpoint, trace and resolved config.
    Train(Common),
    /// Report metrics of a checkpoint on a split.
    Eval(Common),
    /// Scored pairs, FLOPs and wall time of pruned vs dense attention.
    Bench(Common),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(Common),
    /// Instance-score and per-head attention maps of one bag.
    Heatmap(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub decay: Option<DecayFamily>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub kmax: Option<f64>,
    #[arg(long)]
    pub baseline: Option<AttentionMode>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained model file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Split used by eval and heatmap.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Bag id for heatmap.
    #[arg(long)]
    pub bag: Option<String>,
}

impl Common {
    /// File config, then `--set` overrides, then named flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text).map_err(|e| CliError::Config(e.to_string()))?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.decay {
            cfg.decay = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.kmax {
            cfg.kmax = v;
        }
        if let Some(v) = self.baseline {
            cfg.baseline = v;
        }
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("--{flag} is required")))
    }
}

/// Serialized trained model with the attention settings it was trained under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub mode: AttentionMode,
    pub pruning: Pruning,
    pub best_epoch: usize,
    pub params: ModelParams,
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Metrics as a small JSON object.
pub fn metrics_json(m: &Metrics) -> String {
    format!(
        "{{\"auc\": {}, \"accuracy\": {}, \"f1\": {}}}\n",
        m.auc, m.accuracy, m.f1
    )
}

fn synth(args: &Common) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let out = args.out_dir()?;
    let ds = write_dataset(&cfg.synth_spec(), &out).map_err(|e| CliError::Data(e.to_string()))?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    println!(
        "wrote {} train / {} val / {} test bags to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn train(args: &Common) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let data = args.require(&args.data, "data")?;
    let ds = load_dataset(data).map_err(|e| CliError::Data(e.to_string()))?;
    let out = args.out_dir()?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    let tc = cfg.train_config();
    let result = fit(&ds, &tc)?;
    write(&out.join(TRACE_FILE), result.trace.to_csv())?;
    let mut epochs = String::from("epoch,train_loss,val_auc,val_accuracy,val_f1\n");
    for e in &result.epochs {
        epochs.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.val.auc, e.val.accuracy, e.val.f1
        ));
    }
    write(&out.join(EPOCHS_FILE), epochs)?;
    let ckpt = Checkpoint {
        mode: tc.mode,
        pruning: tc.pruning,
        best_epoch: result.best_epoch,
        params: result.params.clone(),
    };
    let json = serde_json::to_string(&ckpt).map_err(|e| CliError::Io(e.to_string()))?;
    write(&out.join(CHECKPOINT_FILE), json)?;
    let best = result.best_val();
    println!(
        "best epoch {} val auc {} accuracy {} f1 {}",
        result.best_epoch, best.auc, best.accuracy, best.f1
    );
    Ok(())
}

fn eval(args: &Common) -> Result<(), CliError> {
    let data = args.require(&args.data, "data")?;
    let ckpt = load_checkpoint(args.require(&args.checkpoint, "checkpoint")?)?;
    let ds = load_dataset(data).map_err(|e| CliError::Data(e.to_string()))?;
    let bags = ds.split(args.split);
    let m = evaluate(&ckpt.params, bags, ckpt.mode, &ckpt.pruning).map_err(|e| CliError::Data(e.to_string()))?;
    let report = metrics_json(&m);
    print!("{report}");
    if args.out.is_some() {
        write(&args.out_dir()?.join(METRICS_FILE), report)?;
    }
    Ok(())
}

fn bench(args: &Common) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let pruning = cfg.pruning();
    let params = match &args.checkpoint {
        Some(path) => load_checkpoint(path)?.params,
        None => {
            let mut shape = cfg.train_config().model.resolve(cfg.embed_dim, 2);
            shape.input_dim = cfg.embed_dim;
            ModelParams::init(&shape, cfg.tau, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
                .map_err(|e| CliError::Config(e.to_string()))?
        }
    };
    let report =
        flop_report(&cfg.bench_sides, &params, &pruning, cfg.seed).map_err(|e| CliError::Numerical(e.to_string()))?;
    print!("{}", report.to_table());
    if args.out.is_some() {
        let out = args.out_dir()?;
        write(&out.join(COST_FILE), report.to_csv())?;
        write(&out.join(CONFIG_FILE), cfg.to_text())?;
    }
    Ok(())
}

fn gradcheck(args: &Common) -> Result<(), CliError> {
    let seed = args.resolve()?.seed;
    let report = model_gradcheck(seed);
    println!(
        "checked {} scalars on {} bags: max relative error {:e} (tolerance {:e})",
        report.scalars, report.bags, report.max_rel_error, report.tolerance
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient mismatch at bag {}, scalar {}",
            report.worst.0, report.worst.1
        )))
    }
}

fn find_bag<'a>(bags: &'a [Bag], id: Option<&str>) -> Result<&'a Bag, CliError> {
    match id {
        None => bags.first().ok_or_else(|| CliError::Data("split is empty".into())),
        Some(id) => bags
            .iter()
            .find(|b| b.id() == id)
            .ok_or_else(|| CliError::Data(format!("no bag {id:?} in split"))),
    }
}

fn heatmap(args: &Common) -> Result<(), CliError> {
    let data = args.require(&args.data, "data")?;
    let ckpt = load_checkpoint(args.require(&args.checkpoint, "checkpoint")?)?;
    let ds = load_dataset(data).map_err(|e| CliError::Data(e.to_string()))?;
    let bag = find_bag(ds.split(args.split), args.bag.as_deref())?;
    let out_dir = args.out_dir()?;
    let out = forward(bag, &ckpt.params, ckpt.mode, &ckpt.pruning);
    let heat_err = |e: crate::heatmap::HeatmapError| CliError::Numerical(e.to_string());
    export_heatmap(
        bag,
        out.pool.scores.as_slice().unwrap(),
        out_dir.join(format!("{}_instances.pgm", bag.id())),
    )
    .map_err(heat_err)?;
    let (anchor, maps) = anchor_head_maps(&out);
    for (h, map) in maps.iter().enumerate() {
        export_heatmap(bag, map, out_dir.join(format!("{}_head{h}.pgm", bag.id()))).map_err(heat_err)?;
    }
    println!(
        "bag {} anchor tile ({}, {}): wrote {} maps to {}",
        bag.id(),
        bag.coords()[anchor].row,
        bag.coords()[anchor].col,
        maps.len() + 1,
        out_dir.display()
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Heatmap(a) => heatmap(a),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("psamil: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
