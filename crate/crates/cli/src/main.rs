//! `drpo-lab`: generate MDPs and datasets, fit rewards, run and evaluate
//! dataset-reset policy optimization, and check the theory numerically.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage error, 3 invalid config,
//! 4 integrity failure (hash mismatch or incomplete directory), 5 a `verify`
//! property failed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::VerifyFailed;
use crate::config::ConfigError;

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_INTEGRITY: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(name = "drpo-lab", version, about = "Tabular dataset-reset policy optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write an MDP and a reference policy from a family spec.
    GenMdp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample the labeled preference pairs and the unlabeled reset data.
    GenDatasets {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the tabular reward by maximum likelihood.
    TrainReward {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Largest trajectory support enumerated exactly.
        #[arg(long, default_value_t = 1_000_000)]
        cap_trajectories: usize,
    },
    /// Run the reset loop, or the no-reset baseline, and persist its trace.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute values and KLs of a saved policy or run.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect per-iterate KL and values of saved runs into one CSV.
    Frontier {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep the reset proportion with everything else fixed.
    AblateBeta {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        betas: Vec<f64>,
    },
    /// Run the numerical property suite; fails if any property fails.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        cap_trajectories: usize,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<VerifyFailed>() {
            return EXIT_VERIFY;
        }
        if let Some(e) = cause.downcast_ref::<drpo_core::Error>() {
            if let Some(code) = core_code(e) {
                return code;
            }
        }
    }
    EXIT_OTHER
}

fn core_code(e: &drpo_core::Error) -> Option<u8> {
    use drpo_core::Error as E;
    match e {
        E::HashMismatch { .. } | E::MissingManifest(_) => Some(EXIT_INTEGRITY),
        E::InvalidConfig(_) => Some(EXIT_CONFIG),
        E::AtIteration { source, .. } => core_code(source),
        _ => None,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("DRPO_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DRPO_LAB_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::GenMdp { common, seed } => gen_mdp(&common.config, seed, &common.out),
        Command::GenDatasets { common, seed } => gen_datasets(&common.config, seed, &common.out),
        Command::TrainReward { common, seed, cap_trajectories } => {
            train_reward(&common.config, seed, cap_trajectories, &common.out)
        }
        Command::Run { common, seed } => run(&common.config, seed, &common.out),
        Command::Eval { config, out } => eval(&config, out.as_deref()),
        Command::Frontier { common } => frontier(&common.config, &common.out),
        Command::AblateBeta { common, seed, betas } => ablate(&common.config, seed, &betas, &common.out),
        Command::Verify { config, seed, out, cap_trajectories } => {
            verify(config.as_deref(), seed, cap_trajectories, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
