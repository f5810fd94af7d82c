mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::error::CliError;

const AFTER_HELP: &str = "\
Exit codes:
  0  every requested artifact was written and validated
  1  unexpected failure (I/O and the like)
  2  config error (the message names the offending key as a JSON pointer)
  3  missing artifact (input file or the output of an earlier command)
  4  invalid input data (malformed corpus, checkpoint or oracle file)
  5  computation failed (split, training, evaluation or analysis)

Artifacts under --out, with CSV columns in fixed order:
  ingest    graph/{nodes.jsonl,edges.jsonl,embeddings.bin,summary.json}
  split     split_<setting>.json
  train     model_<setting>.ckpt, mf_<setting>.ckpt,
            train_log_<setting>.csv: epoch,lr,loss_total,loss_link,loss_attr,selection_metric
  evaluate  report.json, report.csv: model,task,setting,metric,value,n
  rank      rank.csv: dataset,rank,model,score,rank_score,link_prob,attr_score
  discover  ledger.csv: rank,model,dataset,predicted,verified,is_new_sota
            cost_curve.csv: k,normalized,reached; discovery.json
  analyze   matrix.csv, centered_matrix.csv (dataset,<model ids...>),
            variance_curve.csv: k,fraction
            degree_mae.csv: setting,model,lo,hi,count,mae
  synth     nodes.jsonl, edges.jsonl, embeddings.bin, oracle.jsonl
Every command also writes resolved_config.json.

ALNK_THREADS caps the worker threads used for scoring and evaluation.";

#[derive(Parser)]
#[command(name = "alnk", version, about = "Artifact-graph link ranking pipeline", after_help = AFTER_HELP)]
struct Cli {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set ranker.train.epochs=50`.
    #[arg(long = "set", value_name = "K=V", global = true)]
    sets: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and write its canonical form.
    Ingest,
    /// Partition eval edges for each configured setting.
    Split,
    /// Train the ranker and the MF baseline for each setting.
    Train,
    /// Report the four tasks for every scorer and setting.
    Evaluate,
    /// Score and rank unobserved candidates per dataset.
    Rank,
    /// Verify top-ranked candidates through the oracle file.
    Discover {
        /// Verification budget (overrides `discovery.budget`).
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Centre the score matrix and report its variance curve.
    Analyze,
    /// Generate a planted corpus with its oracle table.
    Synth,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut sets = cli.sets;
    if let Command::Discover { budget: Some(b) } = &cli.command {
        sets.push(format!("discovery.budget={b}"));
    }
    let cfg = config::resolve(cli.config.as_deref(), &sets, cli.out.as_deref(), cli.seed)?;
    if let Some(n) = std::env::var("ALNK_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    let run = Run { cfg };
    match cli.command {
        Command::Ingest => run.ingest(),
        Command::Split => run.split(),
        Command::Train => run.train(),
        Command::Evaluate => run.evaluate(),
        Command::Rank => run.rank(),
        Command::Discover { .. } => run.discover(),
        Command::Analyze => run.analyze(),
        Command::Synth => run.synth(),
    }?;
    run.write_resolved_config()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
