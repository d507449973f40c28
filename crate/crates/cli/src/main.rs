mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Feature-token transfer for tabular data: generate, split, pre-train,
/// fine-tune and evaluate.
#[derive(Debug, Parser)]
#[command(name = "tabtoken", version)]
pub struct Cli {
    /// Master seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Suppress progress lines on stderr.
    #[arg(long, global = true, default_value_t = false)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the four-class synthetic dataset as CSV.
    GenSynthetic {
        /// Number of rows.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan a transfer split and save its manifest.
    Split {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write pretrain/validation/pool/test CSVs into this directory.
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Pre-train tokenizer and top layer; save the best-validation checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune one few-shot subset with transferred tokens.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune one few-shot subset through the re-weighted token library.
    ReweightFinetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every (subset, seed) pair of the plan and write a metrics report.
    RunProtocol {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parallel runs; 0 uses every core.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Reuse this checkpoint instead of pre-training.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Write a checkpoint's token table as CSV.
    ExportTokens {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token-geometry diagnostics of a checkpoint as JSON.
    TokenReport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON with `pairs` and `noise_features`.
        #[arg(long, conflicts_with = "synthetic")]
        geometry: Option<PathBuf>,
        /// Use the synthetic benchmark's pairs and noise features.
        #[arg(long, default_value_t = false)]
        synthetic: bool,
        /// Raw CSV whose instance tokens are summarized per class.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value = "label")]
        label: String,
    },
    /// Print the default run configuration as JSON.
    DefaultConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
