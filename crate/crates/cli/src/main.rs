//! `accmv` command-line tool.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration,
//! 3 data, 4 model fitting, 5 inference.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use accmv::{Error, ErrorKind};
use clap::{Parser, Subcommand};

use commands::{FitArgs, RegressArgs, SensitivityArgs, SimulateArgs, TableArgs, VerifyArgs};

#[derive(Parser, Debug)]
#[command(
    name = "accmv",
    version,
    about = "Nonmonotone MNAR estimation under the ACCMV restriction"
)]
struct Cli {
    /// TOML file whose keys override the flags (top level or a [command] table).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate E[f(L)] with IPW, RA, MR or complete cases.
    Fit(FitArgs),
    /// Fit a marginal model of L by weighted estimating equations.
    Regress(RegressArgs),
    /// Exponential-tilting sensitivity curve for self-normalized IPW.
    Sensitivity(SensitivityArgs),
    /// Write one simulated dataset as CSV.
    Simulate(SimulateArgs),
    /// Run the replicate loop of a simulation table.
    Table(TableArgs),
    /// Re-derive the closed-form truths of the simulation designs by Monte Carlo.
    VerifyOracles(VerifyArgs),
}

fn exit_code(err: &Error) -> u8 {
    if matches!(err, Error::Io(_)) {
        return 1;
    }
    match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Fit => 4,
        ErrorKind::Inference => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = cli.config.as_deref();
    let result = match cli.command {
        Command::Fit(a) => commands::fit(a, cfg),
        Command::Regress(a) => commands::regress(a, cfg),
        Command::Sensitivity(a) => commands::sensitivity(a, cfg),
        Command::Simulate(a) => commands::simulate(a, cfg),
        Command::Table(a) => commands::table(a, cfg),
        Command::VerifyOracles(a) => commands::verify_oracles(a, cfg),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
