//! `scorefusion` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown flag,
//! bad value), 3 missing input file, 4 configuration conflict. Failures print
//! one line to stderr: `error[<kind>]: <message>`.

mod commands;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "scorefusion", version, about = "Volume translation by fusing perpendicular 2D diffusion scores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Run directory. Defaults to `$SCOREFUSION_RUN_DIR/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 gives bit-identical results across machines.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    Phantom(commands::PhantomArgs),
    /// Train one planar branch.
    Train2d(commands::Train2dArgs),
    /// Train the fusion net against frozen branches.
    Train3d(commands::Train3dArgs),
    /// Sample volumes for a dataset split.
    Sample(commands::SampleArgs),
    /// Score sampled volumes against ground truth.
    Eval(commands::EvalArgs),
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Train2d(a) => commands::train2d(a),
        Command::Train3d(a) => commands::train3d(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                return ExitCode::from(2);
            }
            return CliError::Usage(e.to_string()).report();
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
