use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use winprune::pipeline::{self, RunConfig, SearchMode, Selection, Split};

#[derive(Parser)]
#[command(
    name = "winprune",
    version,
    about = "Window-pruned vision transformer toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (JSON). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Pick {
    /// Checkpoint to use instead of the newest one in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sparsity config JSON; dense when omitted.
    #[arg(long)]
    sparsity: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the dataset and cache it in the output directory.
    GenerateData(Common),
    /// Train the dense model from scratch.
    Train(Common),
    /// Sparsity-aware adaptation of the dense checkpoint.
    Adapt(Common),
    /// Search a sparsity config under the resource constraint.
    Search {
        #[command(flatten)]
        common: Common,
        /// Run a baseline instead of evolutionary search.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Evaluate every admissible config.
        #[arg(long, conflicts_with = "baseline")]
        exhaustive: bool,
    },
    /// Finetune the adapted checkpoint at a fixed sparsity config.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Sparsity config JSON; the search result when omitted.
        #[arg(long)]
        sparsity: Option<PathBuf>,
    },
    /// Accuracy, MACs and latency of a checkpoint under a sparsity config.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pick: Pick,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Execution-count heatmap (PGM + CSV) for one image.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pick: Pick,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Measure forward latency.
    Profile {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pick: Pick,
        /// Square input side; the config's profile resolution when omitted.
        #[arg(long)]
        resolution: Option<usize>,
    },
}

fn load_run(c: &Common) -> anyhow::Result<RunConfig> {
    let mut run = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        run.seed = s;
    }
    if let Some(o) = &c.out {
        run.out_dir = o.clone();
    }
    run.validate()?;
    Ok(run)
}

fn selection(p: &Pick) -> Selection {
    Selection {
        checkpoint: p.checkpoint.clone(),
        sparsity: p.sparsity.clone(),
    }
}

fn print<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value).context("serializing the summary")?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData(c) => print(&pipeline::cmd_generate_data(&load_run(&c)?)?),
        Command::Train(c) => print(&pipeline::cmd_train(&load_run(&c)?)?),
        Command::Adapt(c) => print(&pipeline::cmd_adapt(&load_run(&c)?)?),
        Command::Search {
            common,
            baseline,
            exhaustive,
        } => {
            let mode = match (baseline, exhaustive) {
                (Some(Baseline::Random), _) => SearchMode::Random,
                (None, true) => SearchMode::Exhaustive,
                (None, false) => SearchMode::Evolutionary,
            };
            print(&pipeline::cmd_search(&load_run(&common)?, mode)?)
        }
        Command::Finetune { common, sparsity } => print(&pipeline::cmd_finetune(
            &load_run(&common)?,
            sparsity.as_deref(),
        )?),
        Command::Eval {
            common,
            pick,
            split,
        } => print(&pipeline::cmd_eval(
            &load_run(&common)?,
            &selection(&pick),
            split.into(),
        )?),
        Command::Heatmap {
            common,
            pick,
            split,
            index,
        } => print(&pipeline::cmd_heatmap(
            &load_run(&common)?,
            &selection(&pick),
            split.into(),
            index,
        )?),
        Command::Profile {
            common,
            pick,
            resolution,
        } => {
            let mut run = load_run(&common)?;
            if resolution.is_some() {
                run.profile.resolution = resolution;
            }
            print(&pipeline::cmd_profile(&run, &selection(&pick))?)
        }
    }
}

/// `error: {"kind": ..., "message": ...}` on stderr.
fn report(err: &anyhow::Error) {
    let kind = err
        .downcast_ref::<winprune::Error>()
        .map_or("internal", winprune::Error::kind);
    let line = serde_json::json!({ "kind": kind, "message": format!("{err:#}") });
    eprintln!("error: {line}");
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}
