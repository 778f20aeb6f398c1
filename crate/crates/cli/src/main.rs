//! `unihash`: train and evaluate dual-branch hash codes on feature data.

mod commands;
mod config;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use unihash_core::dataset::FileFormat;

#[derive(Parser)]
#[command(
    name = "unihash",
    version,
    about = "Dual-branch hashing: data generation, training, gradient checking, encoding, evaluation, sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled feature dataset
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus an epoch log
    Train(TrainArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Export binary codes for every sample in a dataset
    Encode(EncodeArgs),
    /// Evaluate retrieval over the seen/unseen protocols
    Eval(EvalArgs),
    /// Train/evaluate a grid of hyperparameters
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of classes
    #[arg(long)]
    classes: Option<usize>,
    /// Feature dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Samples per class
    #[arg(long)]
    per_class: Option<usize>,
    /// Gaussian noise level around each class direction
    #[arg(long)]
    spread: Option<f64>,
    /// Base seed for all randomness
    #[arg(long)]
    seed: Option<u64>,
    /// Output format: text or binary
    #[arg(long, default_value = "binary")]
    format: String,
    /// Config file (TOML); flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output feature file
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Input feature file
    #[arg(long)]
    data: PathBuf,
    /// Output directory (checkpoint.uhck, train_log.csv)
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Config file (TOML); flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Center-loss weight
    #[arg(long)]
    lambda1: Option<f64>,
    /// Pairwise-loss weight
    #[arg(long)]
    lambda2: Option<f64>,
    /// Mutual-loss weight
    #[arg(long)]
    lambda3: Option<f64>,
    /// Gate activation: sigmoid_norm or softmax
    #[arg(long)]
    gate_mode: Option<String>,
    /// Give each branch its own expert bank
    #[arg(long)]
    unshared_experts: bool,
    /// Emit raw merged codes instead of tanh-squashed ones
    #[arg(long)]
    no_tanh: bool,
    /// Number of experts m
    #[arg(long)]
    experts: Option<usize>,
    /// Experts selected per branch
    #[arg(long)]
    top_k: Option<usize>,
    /// Code length q
    #[arg(long)]
    code_len: Option<usize>,
    /// Backbone output dimension d
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Affine+ReLU backbone layers (0 = identity)
    #[arg(long)]
    backbone_depth: Option<usize>,
    /// Fraction of classes treated as seen
    #[arg(long)]
    seen_ratio: Option<f64>,
    /// Per-class query holdout fraction
    #[arg(long)]
    query_frac: Option<f64>,
    /// Fraction of the seen database used for training
    #[arg(long)]
    train_frac: Option<f64>,
    /// Center generation: auto, hadamard, or random
    #[arg(long)]
    center_method: Option<String>,
    /// Minimum pairwise center distance for random centers
    #[arg(long)]
    d_floor: Option<usize>,
    /// Detach alternation: per_epoch or per_iteration
    #[arg(long)]
    detach_schedule: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of seeds to check (seeds 1..=N)
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Pass threshold on the max relative error; defaults to max(1e-4, eps)
    #[arg(long)]
    threshold: Option<f64>,
    /// Self-test hook: double one gradient entry so the check must fail
    #[arg(long)]
    corrupt: bool,
}

#[derive(Args)]
struct EncodeArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file to encode
    #[arg(long)]
    data: PathBuf,
    /// Output directory (codes.txt)
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Branch to export: center, pairwise, or both
    #[arg(long, default_value = "both")]
    branch: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file (the split is re-derived from the checkpoint config)
    #[arg(long)]
    data: PathBuf,
    /// Output directory (metrics.json, metrics.csv, pr_curve.csv)
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Retrieval cutoff K for mAP@K
    #[arg(long)]
    k: Option<usize>,
    /// Restrict output to one protocol: seen@seen, seen@all,
    /// unseen@unseen, unseen@all, or all
    #[arg(long, default_value = "all")]
    protocol: String,
    /// Subsample the PR curve to this many radius points
    #[arg(long)]
    pr_points: Option<usize>,
    /// Config file (TOML); flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Input feature file
    #[arg(long)]
    data: PathBuf,
    /// Output directory (sweep.csv)
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Config file (TOML); flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Comma-separated grid, e.g. 0,1,4
    #[arg(long)]
    lambda1: Option<String>,
    /// Comma-separated grid
    #[arg(long)]
    lambda2: Option<String>,
    /// Comma-separated grid
    #[arg(long)]
    lambda3: Option<String>,
    /// Comma-separated grid of expert counts
    #[arg(long)]
    experts: Option<String>,
    /// Comma-separated grid of top-k values
    #[arg(long)]
    top_k: Option<String>,
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(args) => {
            let mut cfg = RunConfig::load(args.config.as_deref())?;
            if let Some(v) = args.classes {
                cfg.data.classes = v;
            }
            if let Some(v) = args.dim {
                cfg.data.dim = v;
            }
            if let Some(v) = args.per_class {
                cfg.data.per_class = v;
            }
            if let Some(v) = args.spread {
                cfg.data.spread = v;
            }
            if let Some(v) = args.seed {
                cfg.seed = Some(v);
            }
            let format = match args.format.as_str() {
                "text" => FileFormat::Text,
                "binary" => FileFormat::Binary,
                other => anyhow::bail!("unknown format '{other}' (expected text|binary)"),
            };
            commands::gen_data(&cfg, format, &args.out)?;
            Ok(0)
        }
        Command::Train(args) => {
            let mut cfg = RunConfig::load(args.config.as_deref())?;
            apply_train_overrides(&mut cfg, &args);
            commands::cmd_train(&cfg, &args.data, &args.out)?;
            Ok(0)
        }
        Command::Gradcheck(args) => {
            if args.seeds == 0 {
                anyhow::bail!("--seeds must be >= 1");
            }
            let threshold = args.threshold.unwrap_or_else(|| args.eps.max(1e-4));
            commands::gradcheck(args.seeds, args.eps, threshold, args.corrupt)
        }
        Command::Encode(args) => {
            commands::encode(&args.checkpoint, &args.data, &args.out, &args.branch)?;
            Ok(0)
        }
        Command::Eval(args) => {
            let cfg = RunConfig::load(args.config.as_deref())?;
            let k = args.k.unwrap_or(cfg.eval.k);
            let pr_points = args.pr_points.or(cfg.eval.pr_points);
            commands::eval(
                &args.checkpoint,
                &args.data,
                &args.out,
                k,
                &args.protocol,
                pr_points,
            )?;
            Ok(0)
        }
        Command::Sweep(args) => {
            let mut cfg = RunConfig::load(args.config.as_deref())?;
            if let Some(v) = args.seed {
                cfg.seed = Some(v);
            }
            if let Some(v) = args.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = args.batch {
                cfg.train.batch_size = v;
            }
            let grids = commands::SweepGrids {
                lambda1: args.lambda1,
                lambda2: args.lambda2,
                lambda3: args.lambda3,
                experts: args.experts,
                top_k: args.top_k,
            };
            commands::sweep(&cfg, &args.data, &args.out, &grids)?;
            Ok(0)
        }
    }
}

fn apply_train_overrides(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(v) = args.seed {
        cfg.seed = Some(v);
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.lambda1 {
        cfg.train.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        cfg.train.lambda2 = v;
    }
    if let Some(v) = args.lambda3 {
        cfg.train.lambda3 = v;
    }
    if let Some(v) = &args.gate_mode {
        cfg.model.gate_mode = v.clone();
    }
    if args.unshared_experts {
        cfg.model.shared_experts = false;
    }
    if args.no_tanh {
        cfg.model.tanh_output = false;
    }
    if let Some(v) = args.experts {
        cfg.model.num_experts = v;
    }
    if let Some(v) = args.top_k {
        cfg.model.top_k = v;
    }
    if let Some(v) = args.code_len {
        cfg.model.code_len = v;
    }
    if let Some(v) = args.feature_dim {
        cfg.model.feature_dim = v;
    }
    if let Some(v) = args.backbone_depth {
        cfg.model.backbone_depth = v;
    }
    if let Some(v) = args.seen_ratio {
        cfg.data.seen_ratio = v;
    }
    if let Some(v) = args.query_frac {
        cfg.data.query_frac = v;
    }
    if let Some(v) = args.train_frac {
        cfg.data.train_frac = v;
    }
    if let Some(v) = &args.center_method {
        cfg.centers.method = Some(v.clone());
    }
    if let Some(v) = args.d_floor {
        cfg.centers.d_floor = Some(v);
    }
    if let Some(v) = &args.detach_schedule {
        cfg.train.detach_schedule = v.clone();
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            commands::exit_code_for(&err)
        }
    };
    std::process::exit(code);
}
