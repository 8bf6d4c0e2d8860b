use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use nwinv::harness::runner::{evaluate_model, load_splits, seed_dir};
use nwinv::harness::sweep::sweep_table;
use nwinv::harness::{
    load_checkpoint, run_experiment, run_sweep, save_csv, summarize_dir, DataSource, ExperimentConfig, SweepKind,
};
use nwinv::infer::{build_cache, dump_neighbors};
use nwinv::{Error, Result};

#[derive(Parser)]
#[command(name = "nwinv", version, about = "Invariant representation learning with the Nadaraya-Watson head")]
struct Cli {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// First seed; runs use `seed .. seed + n_seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test CSVs for the configured SCM recipe.
    GenData,
    /// Train and evaluate every seed.
    Train,
    /// Evaluate a saved checkpoint on the OOD test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Nearest training examples of each OOD test query.
    Neighbors {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Only the first N queries.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Prevalence, lambda or N_c sweep.
    Sweep {
        #[arg(long, default_value = "prevalence")]
        kind: String,
    },
    /// Rebuild the summary table from per-seed records.
    Summarize {
        /// Defaults to the output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for pair in &cli.overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.base_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json_lines<T: serde::Serialize>(rows: &[T]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let DataSource::Scm(_) = cfg.data else {
                return Err(Error::Config("gen-data needs an scm data source".into()));
            };
            for seed in cfg.seeds() {
                let splits = load_splits(&cfg.data, seed)?;
                let dir = seed_dir(&cfg.out_dir, seed);
                std::fs::create_dir_all(&dir)?;
                save_csv(&splits.train, &dir.join("train.csv"))?;
                save_csv(&splits.val, &dir.join("val.csv"))?;
                save_csv(&splits.test, &dir.join("test.csv"))?;
                info!(
                    "seed {seed}: {} train, {} val, {} test rows in {}",
                    splits.train.len(),
                    splits.val.len(),
                    splits.test.len(),
                    dir.display()
                );
            }
        }
        Command::Train => {
            let outcome = run_experiment(&cfg)?;
            print!("{}", outcome.summary.table());
            if outcome.partial_failure() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval { checkpoint } => {
            let ck = load_checkpoint(checkpoint)?;
            let seed = cli.seed.unwrap_or(ck.meta.seed);
            let model = ck.into_model()?;
            let splits = load_splits(&cfg.data, seed)?;
            let records = evaluate_model(&model, &splits.train, &splits.test, &cfg.modes, cfg.train.metric, seed)?;
            print_json_lines(&records)?;
        }
        Command::Neighbors {
            checkpoint,
            top_k,
            limit,
        } => {
            let ck = load_checkpoint(checkpoint)?;
            let seed = cli.seed.unwrap_or(ck.meta.seed);
            let splits = load_splits(&cfg.data, seed)?;
            let cache = build_cache(&ck.net, &splits.train)?;
            let n = limit.unwrap_or(splits.test.len()).min(splits.test.len());
            let rows: Vec<usize> = (0..n).collect();
            let feats = ck.net.extract(&splits.test.inputs(&rows))?;
            let dump = dump_neighbors(&cache, &feats, *top_k)?;
            print_json_lines(&dump.neighbors)?;
            eprintln!("env histogram: {}", serde_json::to_string(&dump.env_histogram)?);
        }
        Command::Sweep { kind } => {
            let kind: SweepKind = kind.parse()?;
            let rows = run_sweep(&cfg, kind)?;
            print!("{}", sweep_table(&rows));
        }
        Command::Summarize { dir } => {
            let dir = dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let summary = summarize_dir(&dir)?;
            print!("{}", summary.table());
            if !summary.failures.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
