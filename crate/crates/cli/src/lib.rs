//! `ghvit` command-line tool: config files in, checkpoints and metrics out.

pub mod commands;
pub mod config;
pub mod metrics;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{EvalOptions, TrainOptions};
use config::Split;

#[derive(Debug, Parser)]
#[command(name = "ghvit", version, about = "Train and verify hierarchical vision transformers with GCN positional embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoint.ghvt and metrics.txt after every epoch.
    Train {
        /// `key=value` config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        epochs: Option<String>,
        #[arg(long)]
        seed: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` override; repeatable, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Report the accuracy of a checkpoint on its test or train split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Dataset name under the data root, overriding the checkpoint's.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Explicit IDX image file (requires --labels).
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and the tiny models.
    Gradcheck {
        /// Corrupt the backward pass of this op (test harness hook).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Convert a metrics file (or a checkpoint's history) to CSV.
    MetricsExport {
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs one command. `env_data_dir` is the value of `GHVIT_DATA_DIR`.
pub fn run(cli: Cli, env_data_dir: Option<&str>, stdout: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            variant,
            dataset,
            epochs,
            seed,
            out,
            set,
        } => {
            let opts = TrainOptions {
                config,
                variant,
                dataset,
                epochs,
                seed,
                out,
                set,
            };
            commands::train(&opts, env_data_dir, stdout)
        }
        Command::Eval {
            checkpoint,
            split,
            dataset,
            data_dir,
            images,
            labels,
        } => {
            let opts = EvalOptions {
                checkpoint,
                split,
                dataset,
                data_dir,
                images,
                labels,
            };
            commands::eval(&opts, env_data_dir, stdout).map(|_| ())
        }
        Command::Gradcheck { fault } => commands::gradcheck(fault.as_deref(), stdout),
        Command::MetricsExport { metrics, out } => commands::metrics_export(&metrics, &out, stdout),
    }
}
