//! `debias`: generate skewed datasets, train, sweep kappa, and audit models.
//!
//! Exit codes: 0 success, 2 I/O, 3 config, 4 training failure, 5 schema.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use debias_core::data::SkewScheme;
use debias_core::Error;

#[derive(Parser, Debug)]
#[command(name = "debias", version, about = "Uncertainty-weighted de-biasing experiments")]
pub struct Cli {
    /// Override the seed of the spec or config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/val/test-colour/test-gray datasets.
    Gen {
        /// TOML synthetic data spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_parser = parse_scheme)]
        plan: SkewScheme,
        /// Held-out samples per class in each test set.
        #[arg(long, default_value_t = 200)]
        test_per_class: usize,
    },
    /// Train one model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate an archive on the colour and gray test sets.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test_colour: PathBuf,
        #[arg(long)]
        test_gray: PathBuf,
        /// Training set, for the top-uncertainty decile table.
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Train one weighted run per kappa and pick the best by validation loss.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma separated kappa values.
        #[arg(long, value_delimiter = ',', default_values_t = debias_core::weighted_loss::DEFAULT_KAPPA_GRID.to_vec())]
        grid: Vec<f64>,
    },
}

fn parse_scheme(s: &str) -> Result<SkewScheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => 2,
        Error::Config(_) | Error::Usage(_) => 3,
        Error::Diverged { .. } | Error::State(_) | Error::Storage(_) | Error::Metric(_) => 4,
        Error::Schema(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
