//! Command-line driver: condense a dataset, evaluate the condensed model,
//! run coreset baselines, plot feature projections, and tabulate results.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Override;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "gencond", version, about = "Dataset condensation into a codebook and a conditional generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file with any of the dataset, networks, codebook, losses,
    /// condense, eval and visualize sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Sets condense.seed and eval.seed_base.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-key overrides such as `eval.runs=3` (also accepted as
    /// `--eval.runs=3`).
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Condense the configured dataset into a checkpoint.
    Condense {
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize a set from a checkpoint and run the evaluation protocol.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images per class; defaults to the stored codebook size.
        #[arg(long)]
        ipc: Option<usize>,
        /// Comma-separated evaluation architectures; defaults to eval.arch.
        #[arg(long)]
        arch: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Select and evaluate a real-image coreset.
    Baseline {
        /// random, herding or k_center.
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 10)]
        ipc: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Project real and synthetic features to 2-D and plot them.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Collect every results.csv under a directory into one sorted table.
    Report {
        results_dir: PathBuf,
    },
}

const FLAGS: &[&str] = &["config", "out", "seed", "checkpoint", "ipc", "arch", "method", "help", "version"];

/// Rewrites `--key.path=value` tokens that are not known flags into bare
/// `key.path=value` overrides, so they reach the override list.
fn split_overrides(args: Vec<OsString>) -> Vec<OsString> {
    args.into_iter()
        .map(|a| {
            let Some(s) = a.to_str() else { return a };
            match s.strip_prefix("--").and_then(|rest| rest.split_once('=')) {
                Some((key, _)) if !FLAGS.contains(&key) => OsString::from(&s[2..]),
                _ => a,
            }
        })
        .collect()
}

impl Common {
    pub fn parsed_overrides(&self) -> Result<Vec<Override>, CliError> {
        self.overrides.iter().map(|o| Override::parse(o)).collect()
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; failures print one JSON error record to
/// stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = split_overrides(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = CliError::usage(e.to_string().trim().to_owned());
            eprintln!("{}", err.record());
            return err.exit_code();
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            log::error!("{err}");
            eprintln!("{}", err.record());
            err.exit_code()
        }
    }
}
