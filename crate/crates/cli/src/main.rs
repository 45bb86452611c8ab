//! `rexlab`: curate a corpus, train the encoder through its phase plan,
//! evaluate the checkpoint, and aggregate results — all driven by one JSON
//! run configuration. Exit codes: 0 ok, 1 config error, 2 data error,
//! 3 numeric failure.

mod config;
mod curate;
mod eval_cmd;
mod lock;
mod report;
mod stages;
mod train;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use rexlab_core::{Error, Result};

use crate::config::LoadedConfig;

#[derive(Parser)]
#[command(name = "rexlab", version, about = "Desk-scale encoder pre-training laboratory")]
struct Cli {
    /// Run configuration file (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the seed from the configuration file.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Single-threaded execution for bitwise-reproducible results.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Worker threads for parallel sections (defaults to the core count).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Continue an interrupted training run from its last checkpoint.
    #[arg(long, global = true)]
    resume: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Filter, deduplicate, score, weight, and tokenize the raw corpus.
    Curate,
    /// Run the phase plan against the curated corpus, checkpointing as it goes.
    Train,
    /// Score the trained checkpoint: recovery grid and similarity suite.
    Eval,
    /// Summarize one finished run, or every run under a directory.
    Report {
        /// Directory to scan; defaults to REXLAB_DATA_DIR, then to `.`.
        dir: Option<PathBuf>,
    },
}

fn load(cli: &Cli) -> Result<LoadedConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("this command needs --config <path>"))?;
    config::load_config(path, cli.seed)
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.or(if cli.deterministic { Some(1) } else { None });
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::config("--threads must be at least 1"));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.cmd {
        Cmd::Curate => curate::cmd_curate(&load(&cli)?),
        Cmd::Train => train::cmd_train(&load(&cli)?, cli.resume),
        Cmd::Eval => eval_cmd::cmd_eval(&load(&cli)?),
        Cmd::Report { dir } => {
            let dir = dir
                .clone()
                .or_else(|| std::env::var_os(config::DATA_DIR_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            report::cmd_report(&dir)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
