//! `twospeed`: dataset tooling, staggered two-speed schedule runs,
//! evaluation, fusion-weight sweeps, and saliency export.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

/// Exit code 2 for anything the user can fix in flags or config, 1 for
/// failures at run time.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

pub fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

pub fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

#[derive(Parser)]
#[command(name = "twospeed", version, about = "Two-speed ensemble training over incremental chip data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    /// Seeded holdout block.
    Holdout,
    /// The whole dataset.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodChoice {
    Occlusion,
    #[value(name = "attention_rollout")]
    AttentionRollout,
}

/// Split flags shared by eval/sweep/saliency.
#[derive(Debug, clap::Args)]
struct SplitArgs {
    /// Which rows to evaluate on.
    #[arg(long, value_enum, default_value_t = SplitChoice::Holdout)]
    split: SplitChoice,
    /// Seed of the holdout split.
    #[arg(long, default_value_t = 11)]
    split_seed: u64,
    #[arg(long, default_value_t = 0.2)]
    holdout_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic chip dataset.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Chips per class.
        #[arg(long)]
        per_class: usize,
        /// `default6` or a path to a JSON list of class specs.
        #[arg(long, default_value = "default6")]
        classes: String,
    },
    /// Pack a tree of per-class 32x32 P6 PPMs into a dataset.
    Import {
        /// Directory of class subdirectories.
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staggered schedule from a JSON config.
    Schedule {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a saved model or a two-model ensemble.
    Eval {
        /// Single model file (mutually exclusive with --fast/--slow).
        #[arg(long, conflicts_with_all = ["fast", "slow", "weights"])]
        model: Option<PathBuf>,
        #[arg(long)]
        fast: Option<PathBuf>,
        #[arg(long, requires = "fast")]
        slow: Option<PathBuf>,
        /// Fusion weights `fast,slow` (default 0.5,0.5).
        #[arg(long, requires = "slow")]
        weights: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        /// Report directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Sweep the fast:slow fusion weight from 10:90 to 90:10.
    Sweep {
        #[arg(long)]
        fast: PathBuf,
        #[arg(long)]
        slow: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        /// Output CSV path.
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Export an attribution map for one chip.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Chip index within the dataset.
        #[arg(long)]
        index: usize,
        /// Attributed class (default: the model's prediction).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, value_enum, default_value_t = MethodChoice::Occlusion)]
        method: MethodChoice,
        /// Output directory for the PGM map and PPM montage.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            per_class,
            classes,
        } => commands::synth(&out, seed, per_class, &classes),
        Command::Import { src, out } => commands::import(&src, &out),
        Command::Schedule { config } => commands::schedule(&config),
        Command::Eval {
            model,
            fast,
            slow,
            weights,
            data,
            split,
            out,
        } => commands::eval(model, fast, slow, weights, &data, &split, &out),
        Command::Sweep {
            fast,
            slow,
            data,
            split,
            out,
        } => commands::sweep(&fast, &slow, &data, &split, &out),
        Command::Saliency {
            model,
            data,
            index,
            class,
            method,
            out,
        } => commands::saliency(&model, &data, index, class, method, &out),
    }
}

fn main() {
    match run(Cli::parse()) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}
