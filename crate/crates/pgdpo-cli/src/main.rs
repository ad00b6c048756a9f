//! Command-line front end for the training engine: parses flags and the
//! optional TOML config, caps the worker pool from PGDPO_THREADS, and
//! dispatches to the subcommands.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;

use config::{CommonArgs, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "pgdpo",
    version,
    about = "Pontryagin-guided direct policy optimization for the Merton \
             consumption-investment problem"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a policy pair; writes metrics.csv, checkpoints, and surface.csv.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Also dump simulated trajectories to paths.csv at each checkpoint.
        #[arg(long)]
        dump_paths: bool,
    },
    /// Evaluate a checkpoint: relative MSEs, empirical utility, surface dump.
    Eval {
        /// Checkpoint file to evaluate.
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write the policy-surface CSV for a checkpoint.
    DumpSurface {
        /// Checkpoint file to dump.
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Check BPTT gradients against finite differences on a tiny instance.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    let Some(raw) = std::env::var_os("PGDPO_THREADS") else {
        return Ok(());
    };
    let text = raw.to_string_lossy();
    let n: usize = text
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .with_context(|| format!("PGDPO_THREADS must be a positive integer, got {text:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot configure the worker pool")?;
    Ok(())
}

fn run() -> anyhow::Result<()> {
    configure_threads()?;
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Train { common, resume, dump_paths } => {
            let run = RunConfig::load(common)?;
            commands::cmd_train(&run, *resume, *dump_paths)
        }
        Cmd::Eval { checkpoint, common } => {
            let run = RunConfig::load(common)?;
            commands::cmd_eval(&run, checkpoint)
        }
        Cmd::DumpSurface { checkpoint, common } => {
            let run = RunConfig::load(common)?;
            commands::cmd_dump_surface(&run, checkpoint)
        }
        Cmd::Gradcheck { common } => {
            let run = RunConfig::load(common)?;
            commands::cmd_gradcheck(&run)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
