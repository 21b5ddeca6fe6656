//! `swindle` — experiment driver for the variance-reduction toolkit.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure,
//! 3 results written but flagged by the stationarity gate.

// negated comparisons deliberately reject NaN along with range violations
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "swindle",
    about = "Coupled, antithetic, and control-variate MCMC experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Replication count; overrides the config.
    #[arg(long)]
    replications: Option<usize>,
    /// Fitted transport map (defaults to `<out>/map.json` when preconditioning).
    #[arg(long)]
    map: Option<PathBuf>,
    /// Also write the raw traces of the first chain group (sample only).
    #[arg(long, default_value_t = false)]
    dump_traces: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the affine transport map by variational inference.
    Fit(CommonArgs),
    /// Run the estimator suites and write the efficiency tables.
    Sample(CommonArgs),
    /// Sweep leapfrog steps at fixed trajectory length.
    Sweep(CommonArgs),
    /// Held-out prediction study (budget vs. test NLL).
    Predict(CommonArgs),
}

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_STATIONARITY: u8 = 3;

fn classify(err: &anyhow::Error) -> u8 {
    use mcmc_swindles::Error as E;
    if let Some(core) = err.downcast_ref::<E>() {
        return match core {
            E::Divergence { .. } | E::NonFinite { .. } | E::UndefinedEss(_) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        };
    }
    EXIT_CONFIG
}

fn run(
    args: &CommonArgs,
    go: impl FnOnce(
        &ExperimentConfig,
        &std::path::Path,
        u64,
    ) -> anyhow::Result<commands::CommandOutcome>,
) -> ExitCode {
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    if let Err(e) = std::fs::create_dir_all(&args.out) {
        eprintln!("cannot create output directory {}: {e}", args.out.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    match go(&cfg, &args.out, seed) {
        Ok(outcome) if outcome.stationarity_warning => ExitCode::from(EXIT_STATIONARITY),
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            let code = classify(&e);
            eprintln!(
                "{}: {e:#}",
                if code == EXIT_NUMERICAL {
                    "numerical failure"
                } else {
                    "configuration error"
                }
            );
            ExitCode::from(code)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Fit(args) => run(args, commands::cmd_fit),
        Command::Sample(args) => {
            let map = args.map.clone();
            let dump = args.dump_traces;
            run(args, move |cfg, out, seed| {
                commands::cmd_sample(cfg, out, seed, map.as_deref(), dump)
            })
        }
        Command::Sweep(args) => {
            let map = args.map.clone();
            run(args, move |cfg, out, seed| {
                commands::cmd_sweep(cfg, out, seed, map.as_deref())
            })
        }
        Command::Predict(args) => {
            let map = args.map.clone();
            run(args, move |cfg, out, seed| {
                commands::cmd_predict(cfg, out, seed, map.as_deref())
            })
        }
    }
}
