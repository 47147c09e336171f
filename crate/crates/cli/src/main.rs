use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mft::error::ErrorCategory;
use mft::ingest::Flavor;

mod commands;
mod config;

use config::{Overrides, Split};

#[derive(Parser)]
#[command(name = "mft", version, about = "Multi-context fusion transformer for crossing-intention prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_flavor)]
    flavor: Option<Flavor>,
    /// Smallest admissible time-to-event, in frames.
    #[arg(long, global = true)]
    tte_min: Option<i64>,
    /// Largest admissible time-to-event, in frames.
    #[arg(long, global = true)]
    tte_max: Option<i64>,
    /// Ablation variant (full, v1..v5); repeatable.
    #[arg(long = "variant", global = true)]
    variants: Vec<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory written by `synth-gen`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Split scored by `eval` and `export-attention`.
    #[arg(long, global = true, value_enum)]
    split: Option<Split>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted label rule.
    SynthGen,
    /// Train a model and write checkpoints and the training history.
    Train,
    /// Score a checkpoint on a dataset split.
    Eval,
    /// Train and score the full model and its ablation variants.
    Ablate,
    /// Average attention maps of a checkpoint over a dataset split.
    ExportAttention,
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
}

fn parse_flavor(s: &str) -> Result<Flavor, String> {
    Flavor::parse(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> mft::Result<()> {
    let c = cli.common;
    let resolved = config::resolve(
        c.config.as_deref(),
        Overrides {
            seed: c.seed,
            out: c.out,
            flavor: c.flavor,
            tte_min: c.tte_min,
            tte_max: c.tte_max,
            variants: c.variants,
            checkpoint: c.checkpoint,
            data: c.data,
            split: c.split,
        },
    )?;
    match cli.command {
        Command::SynthGen => commands::synth_gen(&resolved),
        Command::Train => commands::train(&resolved),
        Command::Eval => commands::eval(&resolved),
        Command::Ablate => commands::ablate(&resolved),
        Command::ExportAttention => commands::export_attention(&resolved),
        Command::GradCheck { corrupt_op } => commands::grad_check(&resolved, corrupt_op.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Usage => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numeric => 4,
            })
        }
    }
}
