//! Subcommands behind the `textlab` binary.
//!
//! Each command reads its inputs, writes plain files (JSONL, JSON, CSV) and
//! returns a [`CliError`] whose [`CliError::exit_code`] is stable for scripts.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use textlab_core::data::{generate_synthetic, load_jsonl, split, write_jsonl, ClassProfile, DEFAULT_RATIOS};
use textlab_core::harness::{evaluate, train, Checkpoint, TrainConfig};
use textlab_core::losses::{emit_curves, open_unit_grid};
use textlab_core::metrics::matrix_csv;
use textlab_core::numerics::Tensor;
use textlab_core::optim::{adam_step_sizes, bound_schedule, OptimHyper, Optimizer, OptimizerKind};
use textlab_core::Error;

pub const SEED_ENV: &str = "TEXTLAB_SEED";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const CONFUSION_NORMALIZED_FILE: &str = "confusion_normalized.csv";
pub const PARTITION_FILES: [&str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NonFinite(_) => CliError::Numeric(msg),
            Error::InvalidArgument(_) => CliError::Usage(msg),
            _ => CliError::Data(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "textlab", version, about = "Imbalanced text classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled corpus as JSONL
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and per-epoch trace
    Train(TrainArgs),
    /// Score a checkpoint on a JSONL dataset
    Eval(EvalArgs),
    /// Tabulate CE, focal and CEWF losses over a probability grid
    Curves(CurvesArgs),
    /// Trace Adam and AdaBound step sizes on a small quadratic
    OptimDemo(OptimDemoArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Probability that a character comes from the class signature alphabet
    #[arg(long, default_value_t = 0.8)]
    pub q: f64,
    /// JSON array of per-class counts; defaults to the built-in profile
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// JSONL dataset; falls back to the config's `data` key
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    #[arg(long, default_value_t = 99)]
    pub p_points: usize,
    /// Comma-separated focusing parameters
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub gammas: Vec<f64>,
    /// Comma-separated temperatures
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub ts: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimDemoArgs {
    #[arg(long, default_value_t = 10_000)]
    pub steps: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write every n-th step (the last step is always written)
    #[arg(long, default_value_t = 1)]
    pub every: u64,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Curves(a) => cmd_curves(&a),
        Command::OptimDemo(a) => cmd_optim_demo(&a),
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let profile = match &args.profile {
        Some(path) => {
            let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            ClassProfile::from_json(&raw).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => ClassProfile::default(),
    };
    let examples = generate_synthetic(&profile, args.scale, args.q, args.seed)?;
    write_jsonl(&args.out, &examples).map_err(|e| io_err(&args.out, e))?;
    let mut counts = vec![0usize; profile.classes()];
    for ex in &examples {
        counts[ex.label] += 1;
    }
    println!("wrote {} examples to {}", examples.len(), args.out.display());
    for (label, n) in counts.iter().enumerate() {
        println!("class {label}: {n}");
    }
    Ok(())
}

/// The `train` config file: a [`TrainConfig`] plus `data` and `split_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub split_seed: u64,
}

pub fn parse_config(raw: &str, base_dir: &Path) -> CliResult<CliConfig> {
    let schema = |msg: String| CliError::Usage(format!("config: {msg}"));
    let mut value: Value = serde_json::from_str(raw).map_err(|e| schema(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| schema("top level must be an object".into()))?;
    let data = match obj.remove("data") {
        None => None,
        Some(Value::String(s)) => Some(base_dir.join(s)),
        Some(_) => return Err(schema("`data` must be a string".into())),
    };
    let split_seed = match obj.remove("split_seed") {
        None => 0,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| schema("`split_seed` must be a non-negative integer".into()))?,
    };
    let mut train: TrainConfig = serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        train.seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not a non-negative integer")))?;
    }
    train.validate().map_err(|e| schema(e.to_string()))?;
    Ok(CliConfig {
        train,
        data,
        split_seed,
    })
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let raw = fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let config = parse_config(&raw, base)?;
    let data = args
        .data
        .clone()
        .or(config.data.clone())
        .ok_or_else(|| CliError::Usage("no dataset: pass --data or set `data` in the config".into()))?;
    let classes = config.train.classes.unwrap_or(usize::MAX);
    let examples = load_jsonl(&data, classes)?;
    let parts = split(&examples, DEFAULT_RATIOS, config.split_seed)?;

    let (checkpoint, trace) = train(&config.train, &parts)?;
    ensure_dir(&args.out_dir)?;
    let text = serde_json::to_string(&checkpoint.to_json()).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&args.out_dir.join(CHECKPOINT_FILE), &text)?;
    write_file(&args.out_dir.join(TRACE_FILE), &trace.to_csv())?;
    for (name, part) in PARTITION_FILES.iter().zip([&parts.train, &parts.val, &parts.test]) {
        let path = args.out_dir.join(name);
        write_jsonl(&path, part).map_err(|e| io_err(&path, e))?;
    }
    let best = &trace.records[checkpoint.best_epoch - 1];
    println!(
        "trained {} for {} epochs; best epoch {} (val accuracy {:.4})",
        config.train.name,
        trace.records.len(),
        checkpoint.best_epoch,
        best.val_accuracy
    );
    println!("outputs in {}", args.out_dir.display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let examples = load_jsonl(&args.data, checkpoint.classes)?;
    let eval = evaluate(&checkpoint, &examples)?;
    ensure_dir(&args.out_dir)?;
    let metrics = serde_json::to_string_pretty(&eval.report.to_json()).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&args.out_dir.join(METRICS_FILE), &(metrics + "\n"))?;
    write_file(&args.out_dir.join(CONFUSION_FILE), &matrix_csv(&eval.confusion.rows()))?;
    write_file(&args.out_dir.join(CONFUSION_NORMALIZED_FILE), &matrix_csv(&eval.normalized))?;
    let r = &eval.report;
    println!(
        "accuracy {:.4}  wprecision {:.4}  wrecall {:.4}  wf1 {:.4}  ({} examples)",
        r.accuracy,
        r.wprecision,
        r.wrecall,
        r.wf1,
        examples.len()
    );
    Ok(())
}

pub fn curves_csv(p_points: usize, gammas: &[f64], ts: &[f64]) -> CliResult<String> {
    if p_points < 2 {
        return Err(CliError::Usage("--p-points must be at least 2".into()));
    }
    if gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return Err(CliError::Usage("--gammas must be finite and non-negative".into()));
    }
    if ts.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(CliError::Usage("--ts must be finite and non-negative".into()));
    }
    let rows = emit_curves(&open_unit_grid(p_points), gammas, ts).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut out = String::from("p,gamma,t,ce,focal,cewf\n");
    for r in rows {
        out.push_str(&format!("{:e},{:e},{:e},{:e},{:e},{:e}\n", r.p, r.gamma, r.t, r.ce, r.focal, r.cewf));
    }
    Ok(out)
}

pub fn cmd_curves(args: &CurvesArgs) -> CliResult<()> {
    let csv = curves_csv(args.p_points, &args.gammas, &args.ts)?;
    write_file(&args.out, &csv)?;
    println!("wrote {} rows to {}", csv.lines().count() - 1, args.out.display());
    Ok(())
}

/// Fixed quadratic `0.5 * sum_i a_i (x_i - b_i)^2` started from the origin.
const DEMO_CURVATURE: [f64; 2] = [1.0, 0.25];
const DEMO_TARGET: [f64; 2] = [0.5, -0.3];

fn demo_grad(x: &Tensor) -> Tensor {
    let g: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &xi)| DEMO_CURVATURE[i] * (xi - DEMO_TARGET[i]))
        .collect();
    Tensor::from_vec(g).expect("two coordinates")
}

fn mean(t: &Tensor) -> f64 {
    t.sum() / t.len() as f64
}

/// Step sizes are averaged over the two coordinates.
pub fn optim_demo_csv(steps: u64, every: u64) -> CliResult<String> {
    if steps < 1 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    if every < 1 {
        return Err(CliError::Usage("--every must be at least 1".into()));
    }
    let hyper = OptimHyper::default();
    let mut adam = Optimizer::new(OptimizerKind::Adam, hyper);
    let mut adabound = Optimizer::new(OptimizerKind::Adabound, hyper);
    let mut x_adam = Tensor::zeros(&[2]);
    let mut x_bound = Tensor::zeros(&[2]);
    let mut out = String::from("step,lower,upper,adam_step_size,adabound_step_size\n");
    for k in 1..=steps {
        let g = demo_grad(&x_adam);
        adam.step(&mut [&mut x_adam], &[&g])?;
        let g = demo_grad(&x_bound);
        adabound.step(&mut [&mut x_bound], &[&g])?;
        if k % every == 0 || k == steps {
            let (lower, upper) = bound_schedule(k, &hyper)?;
            let adam_size = mean(&adam_step_sizes(&adam.state)[0]);
            let bound_size = mean(&adabound.state.last_step_sizes()[0]);
            out.push_str(&format!("{k},{lower:e},{upper:e},{adam_size:e},{bound_size:e}\n"));
        }
    }
    Ok(out)
}

pub fn cmd_optim_demo(args: &OptimDemoArgs) -> CliResult<()> {
    let csv = optim_demo_csv(args.steps, args.every)?;
    write_file(&args.out, &csv)?;
    println!("wrote {} rows to {}", csv.lines().count() - 1, args.out.display());
    Ok(())
}
