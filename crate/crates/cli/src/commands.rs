//! Command implementations. Every command is deterministic given its
//! flags; all outputs land under the chosen output directory with stable
//! filenames.

use crate::config::{parse_grid, RunConfig};
use anyhow::{anyhow, bail, Context, Result};
use std::path::Path;
use unihash_core::checkpoint;
use unihash_core::dataset::{
    build_eval_protocols, generate_synthetic, load_features, split_seen_unseen, write_features,
    Dataset, FileFormat, ProtocolKind, SplitDataset, SplitOptions,
};
use unihash_core::network::Branch;
use unihash_core::retrieval::{evaluate_protocols, export_codes, MetricsReport};
use unihash_core::training::{run_gradcheck, train, train_log_csv, Checkpoint, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.uhck";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const PR_CURVE_FILE: &str = "pr_curve.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CODES_FILE: &str = "codes.txt";

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
}

pub fn gen_data(cfg: &RunConfig, format: FileFormat, out: &Path) -> Result<()> {
    let ds = generate_synthetic(
        cfg.data.classes,
        cfg.data.dim,
        cfg.data.per_class,
        cfg.data.spread,
        cfg.seed(),
    )?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_out_dir(dir)?;
        }
    }
    write_features(&ds, out, format)?;
    println!(
        "wrote {}: n={} D_in={} C={}",
        out.display(),
        ds.len(),
        ds.feature_dim,
        ds.num_classes
    );
    Ok(())
}

fn load_and_split(ds_path: &Path, config: &TrainConfig) -> Result<(Dataset, SplitDataset)> {
    let ds = load_features(ds_path)?;
    let split = split_seen_unseen(
        &ds,
        config.split.seen_ratio,
        config.seed,
        SplitOptions {
            query_frac: config.split.query_frac,
            train_frac: config.split.train_frac,
        },
    )?;
    Ok((ds, split))
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = load_features(data)?;
    let config = cfg.train_config(ds.feature_dim)?;
    let split = split_seen_unseen(
        &ds,
        config.split.seen_ratio,
        config.seed,
        SplitOptions {
            query_frac: config.split.query_frac,
            train_frac: config.split.train_frac,
        },
    )?;
    ensure_out_dir(out)?;
    let (ckpt, log) = train(&config, &ds, &split)?;
    checkpoint::write(&ckpt, &out.join(CHECKPOINT_FILE))?;
    std::fs::write(out.join(TRAIN_LOG_FILE), train_log_csv(&log))?;
    let first = log.first().expect("at least one epoch");
    let last = log.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} samples: loss {:.6} -> {:.6} (tau2 {:.6})",
        log.len(),
        split.train.len(),
        first.loss,
        last.loss,
        last.tau2
    );
    println!(
        "wrote {} and {}",
        out.join(CHECKPOINT_FILE).display(),
        out.join(TRAIN_LOG_FILE).display()
    );
    Ok(())
}

pub fn gradcheck(seeds: u64, eps: f64, threshold: f64, corrupt: bool) -> Result<i32> {
    let seed_list: Vec<u64> = (1..=seeds).collect();
    let outcome = run_gradcheck(&seed_list, eps, threshold, corrupt)?;
    for combo in &outcome.combos {
        println!(
            "seed {} gate={} detach={}: max rel err {:.3e} ({} checked, {} skipped)",
            combo.seed,
            combo.gate_mode.as_str(),
            combo.detach.as_str(),
            combo.report.max_rel_error,
            combo.report.checked,
            combo.report.skipped
        );
        for (group, err) in &combo.report.per_group {
            println!("    {group}: {err:.3e}");
        }
    }
    println!(
        "gradcheck {}: max rel err {:.3e} vs threshold {:.1e}",
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.max_rel_error,
        threshold
    );
    Ok(i32::from(!outcome.passed))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

pub fn encode(ckpt_path: &Path, data: &Path, out: &Path, branch: &str) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let ds = load_features(data)?;
    let branches: Vec<Branch> = match branch {
        "both" => vec![Branch::Center, Branch::Pairwise],
        other => vec![Branch::parse(other)?],
    };
    ensure_out_dir(out)?;
    let text = export_codes(&ckpt, &ds, &branches)?;
    let path = out.join(CODES_FILE);
    std::fs::write(&path, &text)?;
    println!(
        "wrote {} ({} lines, {} bits per code)",
        path.display(),
        text.lines().count(),
        ckpt.config.model.code_len
    );
    Ok(())
}

pub fn eval(
    ckpt_path: &Path,
    data: &Path,
    out: &Path,
    k: usize,
    protocol: &str,
    pr_points: Option<usize>,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let (ds, split) = load_and_split(data, &ckpt.config)?;
    let protocols = build_eval_protocols(&split)?;
    let mut report = evaluate_protocols(&ckpt, &ds, &protocols, k, pr_points)?;
    if protocol != "all" {
        let kind = ProtocolKind::parse(protocol)?;
        if report.protocol(kind).is_none() {
            eprintln!(
                "warning: protocol {} is absent for this split (no unseen classes)",
                kind.as_str()
            );
        } else {
            report.protocols.retain(|p| p.protocol == kind.as_str());
        }
    }
    ensure_out_dir(out)?;
    write_report(&report, out)?;
    println!("selected branch: {} (tau2 {:.6})", report.selected_branch, report.tau2);
    for p in &report.protocols {
        println!(
            "{}: mAP@{} center {:.4} pairwise {:.4} selected {:.4}",
            p.protocol, report.k, p.map_center, p.map_pairwise, p.map_selected
        );
    }
    Ok(())
}

fn write_report(report: &MetricsReport, out: &Path) -> Result<()> {
    std::fs::write(out.join(METRICS_JSON_FILE), report.to_json())?;
    std::fs::write(out.join(METRICS_CSV_FILE), report.to_csv())?;
    std::fs::write(out.join(PR_CURVE_FILE), report.pr_csv())?;
    println!(
        "wrote {}, {}, {}",
        out.join(METRICS_JSON_FILE).display(),
        out.join(METRICS_CSV_FILE).display(),
        out.join(PR_CURVE_FILE).display()
    );
    Ok(())
}

pub struct SweepGrids {
    pub lambda1: Option<String>,
    pub lambda2: Option<String>,
    pub lambda3: Option<String>,
    pub experts: Option<String>,
    pub top_k: Option<String>,
}

/// Worker-pool size from UNIHASH_THREADS (0 or unset means automatic).
fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var("UNIHASH_THREADS")
        .ok()
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| anyhow!("UNIHASH_THREADS must be an integer, got '{v}'"))
        })
        .transpose()?
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building worker pool")
}

pub fn sweep(cfg: &RunConfig, data: &Path, out: &Path, grids: &SweepGrids) -> Result<()> {
    if grids.lambda1.is_none()
        && grids.lambda2.is_none()
        && grids.lambda3.is_none()
        && grids.experts.is_none()
        && grids.top_k.is_none()
    {
        bail!("sweep needs at least one grid (--lambda1/--lambda2/--lambda3/--experts/--top-k)");
    }
    let l1: Vec<f64> = match &grids.lambda1 {
        Some(raw) => parse_grid(raw, "lambda1")?,
        None => vec![cfg.train.lambda1],
    };
    let l2: Vec<f64> = match &grids.lambda2 {
        Some(raw) => parse_grid(raw, "lambda2")?,
        None => vec![cfg.train.lambda2],
    };
    let l3: Vec<f64> = match &grids.lambda3 {
        Some(raw) => parse_grid(raw, "lambda3")?,
        None => vec![cfg.train.lambda3],
    };
    let ms: Vec<usize> = match &grids.experts {
        Some(raw) => parse_grid(raw, "experts")?,
        None => vec![cfg.model.num_experts],
    };
    let ks: Vec<usize> = match &grids.top_k {
        Some(raw) => parse_grid(raw, "top-k")?,
        None => vec![cfg.model.top_k],
    };

    let ds = load_features(data)?;
    let base = cfg.train_config(ds.feature_dim)?;
    let split = split_seen_unseen(
        &ds,
        base.split.seen_ratio,
        base.seed,
        SplitOptions {
            query_frac: base.split.query_frac,
            train_frac: base.split.train_frac,
        },
    )?;
    let protocols = build_eval_protocols(&split)?;

    let mut points = Vec::new();
    for &a in &l1 {
        for &b in &l2 {
            for &c in &l3 {
                for &m in &ms {
                    for &k in &ks {
                        points.push((a, b, c, m, k));
                    }
                }
            }
        }
    }
    println!("sweeping {} grid points (base seed {})", points.len(), base.seed);

    let eval_k = cfg.eval.k;
    let pr_points = cfg.eval.pr_points;
    let run_point = |&(a, b, c, m, k): &(f64, f64, f64, usize, usize)| -> Result<String> {
        let mut config = base.clone();
        config.weights = unihash_core::objectives::LossWeights::new(a, b, c)?;
        config.model.num_experts = m;
        config.model.top_k = k;
        config.validate()?;
        let (ckpt, _) = train(&config, &ds, &split)?;
        let report = evaluate_protocols(&ckpt, &ds, &protocols, eval_k, pr_points)?;
        let map_of = |kind: ProtocolKind| -> String {
            report
                .protocol(kind)
                .map_or(String::new(), |p| p.map_selected.to_string())
        };
        Ok(format!(
            "{a},{b},{c},{m},{k},{seed},{branch},{ss},{sa},{uu},{ua},{tau2}",
            seed = config.seed,
            branch = report.selected_branch,
            ss = map_of(ProtocolKind::SeenAtSeen),
            sa = map_of(ProtocolKind::SeenAtAll),
            uu = map_of(ProtocolKind::UnseenAtUnseen),
            ua = map_of(ProtocolKind::UnseenAtAll),
            tau2 = report.tau2,
        ))
    };

    // Grid points are independent and individually seeded; run them on the
    // worker pool and keep the output in grid order.
    let pool = thread_pool()?;
    let rows: Vec<Result<String>> = pool.install(|| {
        use rayon::prelude::*;
        points.par_iter().map(run_point).collect()
    });

    let mut csv = String::from(
        "lambda1,lambda2,lambda3,num_experts,top_k,seed,selected_branch,\
         map_seen_seen,map_seen_all,map_unseen_unseen,map_unseen_all,tau2\n",
    );
    for row in rows {
        csv.push_str(&row?);
        csv.push('\n');
    }
    ensure_out_dir(out)?;
    let path = out.join(SWEEP_FILE);
    std::fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Map an error chain onto the documented exit codes: 3 for numeric
/// aborts, 2 for usage/config/data problems.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<unihash_core::Error>() {
        if matches!(core, unihash_core::Error::Numeric(_)) {
            return 3;
        }
    }
    2
}
