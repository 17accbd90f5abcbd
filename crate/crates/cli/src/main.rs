//! `lrea`: generate data, train, evaluate, precompute user states, score,
//! benchmark and gradient-check from one binary.

mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lrea::data::{self, generate, split};
use lrea::gradcheck::{check_objective, desk_instance};
use lrea::model::graph::ObjectiveOptions;
use lrea::serving::{self, bench, latest_sequences, precompute, ScoreRequest, StateStore};
use lrea::training::{evaluate, train_with, write_log};
use lrea::{AttentionKind, Checkpoint, Execution, Scalar};

use config::{required, Overrides, Paths, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "lrea",
    version,
    about = "Low-rank target attention for long behavior sequences"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file of defaults; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset TSV (written by generate, read by the rest).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// State-store directory.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Training log (NDJSON) or bench report (JSON).
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Scoring request: one JSON object per line.
    #[arg(long, global = true)]
    request: Option<PathBuf>,
    /// Long-sequence length; bench accepts a comma-separated list.
    #[arg(long = "L", global = true, value_delimiter = ',')]
    long_len: Vec<usize>,
    #[arg(long = "r", global = true)]
    rank: Option<usize>,
    #[arg(long = "d", global = true)]
    dim: Option<usize>,
    /// lrea or din.
    #[arg(long, global = true, value_parser = parse_kind)]
    kind: Option<AttentionKind>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Training minibatch, or base candidate count for bench.
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Write a synthetic dataset as TSV.
    Generate,
    /// Train on the leading split; writes a checkpoint and an NDJSON log.
    Train,
    /// Print AUC/GAUC of a checkpoint on the held-out split.
    Eval,
    /// Build the per-user state store from a checkpoint.
    Precompute,
    /// Score requests against a store and print probabilities.
    Score,
    /// Time the cached path against DIN over the raw sequence.
    Bench,
    /// Finite-difference check of the full training objective.
    Gradcheck,
}

fn parse_kind(s: &str) -> std::result::Result<AttentionKind, String> {
    match s {
        "lrea" => Ok(AttentionKind::Lrea),
        "din" => Ok(AttentionKind::Din),
        _ => Err(format!("expected lrea or din, got {s}")),
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let o = Overrides {
        paths: Paths {
            data: cli.data.clone(),
            checkpoint: cli.checkpoint.clone(),
            store: cli.store.clone(),
            report: cli.report.clone(),
            request: cli.request.clone(),
        },
        long_len: cli.long_len.clone(),
        rank: cli.rank,
        dim: cli.dim,
        kind: cli.kind,
        lambda: cli.lambda,
        lr: cli.lr,
        batch: cli.batch,
        epochs: cli.epochs,
        seed: cli.seed,
        threads: cli.threads,
        precision: cli.precision.as_deref().map(|p| p.parse()).transpose()?,
    };
    base.resolve(o, cli.command == Command::Bench)
}

fn load_examples(cfg: &RunConfig) -> Result<Vec<data::Example>> {
    let path = required(&cfg.paths.data, "data")?;
    let examples = data::load(path, &cfg.schema())?;
    if examples.is_empty() {
        bail!("{} holds no examples", path.display());
    }
    Ok(examples)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    eprintln!("config: {}", serde_json::to_string(&cfg)?);
    if let Some(n) = cfg.threads {
        lrea::par::set_threads(n)?;
    }
    match cli.command {
        Command::Generate => {
            let path = required(&cfg.paths.data, "data")?;
            let synthetic = generate(&cfg.data)?;
            data::write(path, &synthetic.examples)?;
            eprintln!(
                "wrote {} examples to {}",
                synthetic.examples.len(),
                path.display()
            );
        }
        Command::Train => {
            let ckpt_path = required(&cfg.paths.checkpoint, "checkpoint")?;
            let examples = load_examples(&cfg)?;
            let n_train = cfg.n_train(examples.len());
            let (train_set, eval_set) = split(examples, n_train);
            let outcome = train_with(
                &train_set,
                &eval_set,
                &cfg.model_config(),
                &cfg.train,
                |r| {
                    eprintln!(
                        "epoch {}: {}",
                        r.epoch,
                        serde_json::to_string(r).unwrap_or_default()
                    );
                },
            )?;
            outcome.checkpoint.save(ckpt_path)?;
            let log_path = cfg
                .paths
                .report
                .clone()
                .unwrap_or_else(|| ckpt_path.with_extension("log.ndjson"));
            write_log(&log_path, &outcome.log)?;
            eprintln!(
                "checkpoint {} ({})",
                ckpt_path.display(),
                outcome.checkpoint.version()
            );
        }
        Command::Eval => {
            let ckpt = Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
            let examples = load_examples(&cfg)?;
            let n_train = cfg.n_train(examples.len());
            let (train_set, held_out) = split(examples, n_train);
            let set = if held_out.is_empty() {
                train_set
            } else {
                held_out
            };
            let e = evaluate(ckpt.params(), &set, Execution::default())?;
            let out = serde_json::json!({
                "n": set.len(),
                "auc": e.auc,
                "gauc": e.gauc,
                "ce": e.ce,
                "penalty": e.penalty,
                "gap_mean": e.gap_mean,
            });
            println!("{out}");
        }
        Command::Precompute => {
            let ckpt = Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
            let root = required(&cfg.paths.store, "store")?;
            let users = latest_sequences(&load_examples(&cfg)?);
            let store = precompute(root, &ckpt, &users, Execution::default())?;
            eprintln!(
                "stored {} users under {}",
                store.manifest().user_count,
                root.display()
            );
        }
        Command::Score => {
            let ckpt = Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
            let store = StateStore::open(required(&cfg.paths.store, "store")?)?;
            let req_path = required(&cfg.paths.request, "request")?;
            let text = fs::read_to_string(req_path)
                .with_context(|| format!("reading {}", req_path.display()))?;
            match cfg.precision {
                32 => score_all::<f32>(&text, &store, &ckpt)?,
                _ => score_all::<f64>(&text, &store, &ckpt)?,
            }
        }
        Command::Bench => {
            let report = bench::run(&cfg.bench)?;
            let json = serde_json::to_string_pretty(&report)?;
            match &cfg.paths.report {
                Some(p) => {
                    fs::write(p, json).with_context(|| format!("writing {}", p.display()))?
                }
                None => println!("{json}"),
            }
        }
        Command::Gradcheck => {
            let mut ok = true;
            for seed in 0..3 {
                let (params, batch) = desk_instance(seed)?;
                let opts = ObjectiveOptions {
                    lambda: cfg.train.lambda,
                    penalty_grad_to_embeddings: cfg.train.penalty_grad_to_embeddings,
                };
                let report = check_objective(&params, &batch, opts, 1e-5, 1e-4)?;
                let names = params.weights.named();
                for p in &report.params {
                    let name = names.get(p.index).map_or("?", |(n, _)| n.as_str());
                    println!(
                        "seed {seed} {name:<14} {:?} max rel err {:.2e}{}",
                        p.shape,
                        p.max_rel_error,
                        if p.flagged > 0 { "  FAIL" } else { "" }
                    );
                }
                ok &= report.passed();
            }
            if !ok {
                bail!("gradient check failed");
            }
            println!("gradient check passed");
        }
    }
    Ok(())
}

fn score_all<T: Scalar>(text: &str, store: &StateStore, ckpt: &Checkpoint) -> Result<()> {
    let model = ckpt.inference::<T>();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let request: ScoreRequest =
            serde_json::from_str(line).with_context(|| format!("request on line {}", i + 1))?;
        let probs = serving::score(&request, store, &model)?;
        println!(
            "{}",
            serde_json::json!({ "user_id": request.user_id, "probs": probs })
        );
    }
    Ok(())
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if msg.contains(&s) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&s);
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
