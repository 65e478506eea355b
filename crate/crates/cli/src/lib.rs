//! Command-line surface for storyboard ordering experiments.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{parse_override, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "storyboard", about = "Order keyframe storyboards from text synopses")]
pub struct Cli {
    /// Config file of `key = value` lines under `[section]` headers.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides a config key, e.g. `--set codebook.size=1024`. Repeatable.
    #[arg(long = "set", global = true, value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory with examples.jsonl, texts.tvse and frames.tvse.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for outputs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StrategyArgs {
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub seg_limit: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Which split to evaluate: train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_examples: Option<usize>,
    },
    /// Train the orderer, re-ranker and/or retrieval head.
    Train {
        #[command(flatten)]
        io: DataArgs,
        /// Comma-separated subset of orderer, rerank, head.
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Order the ground-truth frames of each example.
    Order {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        strategy: StrategyArgs,
    },
    /// Retrieve the top frames of a candidate pool for each synopsis.
    Retrieve {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pool_size: Option<usize>,
        /// Rank with the trained retrieval head.
        #[arg(long)]
        use_head: bool,
    },
    /// Retrieve the top K frames of a pool and order them.
    RetrieveOrder {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long)]
        pool_size: Option<usize>,
        /// Comma-separated K values.
        #[arg(long)]
        ks: Option<String>,
        #[arg(long)]
        use_head: bool,
    },
    /// Evaluate a strategy under one protocol, or score a predictions file.
    Eval {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        strategy: StrategyArgs,
        /// ordering, retrieve-order or retrieval.
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        pool_size: Option<usize>,
        #[arg(long)]
        use_head: bool,
    },
    /// Train and score one orderer per codebook grid cell and per lambda.
    Sweep {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Corpus statistics.
    Stats {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
}

fn push<T: ToString>(v: &mut Vec<(String, String)>, key: &str, value: Option<T>) {
    if let Some(x) = value {
        v.push((key.to_string(), x.to_string()));
    }
}

fn push_strategy(v: &mut Vec<(String, String)>, s: &StrategyArgs) {
    push(v, "eval.strategy", s.strategy.as_ref());
    push(v, "eval.beam_width", s.beam_width);
    push(v, "eval.seg_limit", s.seg_limit);
    push(v, "eval.split", s.split.as_ref());
}

fn push_data(v: &mut Vec<(String, String)>, io: &DataArgs) {
    push(v, "data.dir", io.data.as_ref().map(|p| p.display()));
}

/// Parses arguments and runs the chosen command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<()> {
    // flags win over --set, which wins over the file
    let mut flags = Vec::new();
    push(&mut flags, "run.seed", cli.seed);
    let mut overrides = cli.overrides.clone();
    let resolve = |extra: Vec<(String, String)>, overrides: &mut Vec<(String, String)>| {
        overrides.extend(flags.iter().cloned());
        overrides.extend(extra);
        RunConfig::resolve(cli.config.as_deref(), overrides)
    };
    match &cli.command {
        Command::Synth { out, n_examples } => {
            let mut v = Vec::new();
            push(&mut v, "synth.n_examples", *n_examples);
            commands::run_synth(&resolve(v, &mut overrides)?, out)
        }
        Command::Train { io, models, steps } => {
            let mut v = Vec::new();
            push_data(&mut v, io);
            push(&mut v, "train.models", models.as_ref());
            push(&mut v, "train.total_steps", *steps);
            commands::run_train(&resolve(v, &mut overrides)?, &io.out)
        }
        Command::Order { io, strategy } => {
            let mut v = vec![("eval.protocol".to_string(), "ordering".to_string())];
            push_data(&mut v, io);
            push_strategy(&mut v, strategy);
            commands::run_eval(&resolve(v, &mut overrides)?, &io.out, strategy.checkpoint.as_deref(), None)
        }
        Command::Retrieve {
            io,
            checkpoint,
            pool_size,
            use_head,
        } => {
            let mut v = Vec::new();
            push_data(&mut v, io);
            push(&mut v, "eval.pool_size", *pool_size);
            if *use_head {
                v.push(("eval.use_head".into(), "true".into()));
            }
            commands::run_retrieve(&resolve(v, &mut overrides)?, &io.out, checkpoint.as_deref())
        }
        Command::RetrieveOrder {
            io,
            strategy,
            pool_size,
            ks,
            use_head,
        } => {
            let mut v = vec![("eval.protocol".to_string(), "retrieve-order".to_string())];
            push_data(&mut v, io);
            push_strategy(&mut v, strategy);
            push(&mut v, "eval.pool_size", *pool_size);
            push(&mut v, "eval.ks", ks.as_ref());
            if *use_head {
                v.push(("eval.use_head".into(), "true".into()));
            }
            commands::run_eval(&resolve(v, &mut overrides)?, &io.out, strategy.checkpoint.as_deref(), None)
        }
        Command::Eval {
            io,
            strategy,
            protocol,
            predictions,
            pool_size,
            use_head,
        } => {
            let mut v = Vec::new();
            push_data(&mut v, io);
            push_strategy(&mut v, strategy);
            push(&mut v, "eval.protocol", protocol.as_ref());
            push(&mut v, "eval.pool_size", *pool_size);
            if *use_head {
                v.push(("eval.use_head".into(), "true".into()));
            }
            commands::run_eval(
                &resolve(v, &mut overrides)?,
                &io.out,
                strategy.checkpoint.as_deref(),
                predictions.as_deref(),
            )
        }
        Command::Sweep { io, grid, steps } => {
            let mut v = Vec::new();
            push_data(&mut v, io);
            push(&mut v, "sweep.grid", grid.as_ref());
            push(&mut v, "sweep.total_steps", *steps);
            commands::run_sweep(&resolve(v, &mut overrides)?, &io.out)
        }
        Command::Stats { io, lexicon } => {
            let mut v = Vec::new();
            push_data(&mut v, io);
            push(&mut v, "stats.lexicon", lexicon.as_ref().map(|p| p.display()));
            commands::run_stats(&resolve(v, &mut overrides)?, &io.out)
        }
    }
}
