use std::process::ExitCode;

use clap::Parser;

use music_cli::{finish, init_logging, simulate, SimulateArgs};

/// Runs a simulation scenario; same as `music simulate`.
#[derive(Debug, Parser)]
#[command(name = "music-sim", version)]
struct Cli {
    #[arg(long, default_value = "warn")]
    log_level: String,
    #[command(flatten)]
    args: SimulateArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    finish(init_logging(&cli.log_level).and_then(|()| simulate(cli.args)))
}
