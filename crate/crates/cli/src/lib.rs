//! The `simpletron` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
pub mod config;

pub use config::{Flags, ModelFile, RunConfig, KEYS};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(simpletron::Error),
}

impl From<simpletron::Error> for CliError {
    fn from(e: simpletron::Error) -> Self {
        match e {
            simpletron::Error::Config(m) => CliError::Usage(m),
            e => CliError::Runtime(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(
    name = "simpletron",
    version,
    about = "Linear-complexity transformer: train, evaluate, benchmark and convert models",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// File of `key = value` lines; flags override it.
    #[arg(long, short = 'c', value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        RunConfig::resolve(self.config.as_deref(), &self.flags)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a classifier and write `<out>`, `<out>.cfg` and `<out>.metrics.csv`.
    Train(Common),
    /// Evaluate a checkpoint on held-out data.
    Eval(Common),
    /// Time attention over a sweep of sequence lengths and write CSV.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Leave wall_ms empty so repeated runs give identical bytes.
        #[arg(long)]
        no_timing: bool,
    },
    /// Convert a checkpoint to another attention kind.
    Transfer(Common),
    /// Write a generated dataset in the tab-separated text format.
    GenData(Common),
    /// Compare analytic gradients with finite differences for a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Embedding and hidden width.
        #[arg(long, default_value_t = 8)]
        width: usize,
        /// Tokens in the probe sequence.
        #[arg(long, default_value_t = 6)]
        seq_len: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = match &cli.command {
        Command::Train(c) => c.resolve().and_then(|cfg| commands::train(&cfg)),
        Command::Eval(c) => c.resolve().and_then(|cfg| commands::eval(&cfg)),
        Command::Bench { common, no_timing } => common.resolve().and_then(|mut cfg| {
            cfg.timing &= !no_timing;
            commands::bench(&cfg)
        }),
        Command::Transfer(c) => c.resolve().and_then(|cfg| commands::transfer(&cfg)),
        Command::GenData(c) => c.resolve().and_then(|cfg| commands::gen_data(&cfg)),
        Command::Gradcheck {
            common,
            width,
            seq_len,
            tol,
        } => common.resolve().and_then(|cfg| commands::gradcheck(&cfg, *width, *seq_len, *tol)),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n\nRun `simpletron --help` for usage.");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
