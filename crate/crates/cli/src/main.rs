mod commands;
mod exit;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crome_core::data::tasks::TaskKind;
use crome_core::train::Stage;

#[derive(Debug, Parser)]
#[command(name = "crome", version, about = "Toy multimodal model: data, staged training, evaluation, verification")]
pub struct Cli {
    /// Run configuration (TOML). Defaults to the built-in toy configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the global seed and every stage seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Falls back to $CROME_OUT, then to the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint to start from (train, ablate, sweep-m) or to evaluate.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Validate the configuration and print each stage's freeze mask and
    /// parameter counts, then stop.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic datasets plus a manifest.
    GenData {
        /// Task kind; repeat for several datasets.
        #[arg(long = "kind", required = true)]
        kinds: Vec<TaskKind>,
        /// Record count, one per --kind.
        #[arg(long = "n", required = true, value_parser = clap::value_parser!(u64).range(1..))]
        sizes: Vec<u64>,
    },
    /// Train one stage.
    Train {
        #[arg(long)]
        stage: Stage,
    },
    /// Multiple-choice evaluation of a checkpoint.
    Eval {
        #[arg(long, default_value = "position-mc")]
        task: TaskKind,
        #[arg(long, default_value = "likelihood")]
        scorer: String,
    },
    /// Run the seven-row ablation grid.
    Ablate,
    /// Sweep the adapter bottleneck width.
    SweepM {
        /// Comma-separated widths; defaults to the config's list.
        #[arg(long = "m", value_delimiter = ',')]
        widths: Vec<usize>,
    },
    /// Finite-difference check of every primitive and composed block.
    GradCheck,
    /// Exact adapter and projection parameter accounting.
    ReportParams {
        #[arg(long, default_value_t = 4096)]
        dim_a: usize,
        #[arg(long, default_value_t = 5120)]
        dim_b: usize,
        #[arg(long, default_value_t = 256)]
        bottleneck: usize,
        /// Input widths of the projections into the LM.
        #[arg(long, value_delimiter = ',', default_values_t = [768, 1408])]
        proj_in: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
