//! `cqr`: co-training, rewriting, evaluation and data preparation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cqr_core::dataio::SourceFormat;

/// An error caused by how the tool was invoked rather than by the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "cqr",
    version,
    about = "Co-training for conversational query rewrite"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Warm up and co-train a Simplifier and a Rewriter.
    Cotrain {
        #[arg(long)]
        config: PathBuf,
        /// Grid of cotrain keys, e.g. `s_s=p40,p60,s_r=p60`; one run per point.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Rewrite every query of a session file with a Rewriter checkpoint.
    Rewrite(GenerateArgs),
    /// Simplify every query of a session file with a Simplifier checkpoint.
    Simplify(GenerateArgs),
    /// Score predictions against the rewrites of a session file.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Write a synthetic task (labeled, pool_s, pool_r, test) as session files.
    Synth {
        /// Sessions in each unlabeled pool.
        #[arg(long)]
        sessions: usize,
        #[arg(long, default_value_t = 3)]
        turns: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        labeled: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert an external dataset to the session format.
    Adapt {
        #[arg(long)]
        format: SourceFormat,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<cqr_core::Error>(),
                Some(cqr_core::Error::Config { .. } | cqr_core::Error::Checkpoint(_))
            )
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Cotrain { config, sweep } => commands::cotrain(&config, sweep.as_deref()),
        Command::Rewrite(a) => {
            commands::generate(&a.checkpoint, &a.input, &a.output, a.max_len, false)
        }
        Command::Simplify(a) => {
            commands::generate(&a.checkpoint, &a.input, &a.output, a.max_len, true)
        }
        Command::Evaluate { pred, gold } => commands::evaluate(&pred, &gold),
        Command::Synth {
            sessions,
            turns,
            seed,
            labeled,
            test,
            out,
        } => commands::synth(sessions, turns, seed, labeled, test, &out),
        Command::Adapt {
            format,
            input,
            output,
        } => commands::adapt(format, &input, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
