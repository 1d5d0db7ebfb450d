use std::process::ExitCode;

use clap::{Parser, Subcommand};

use music_cli::{
    controller, dispatch, finish, init_logging, replay_cmd, simulate, status, ControllerArgs, DispatchArgs,
    ReplayArgs, SimulateArgs, StatusArgs,
};

#[derive(Debug, Parser)]
#[command(name = "music", version, about = "Controller, simulator and analytics for mobile urban sensing fleets")]
struct Cli {
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the controller service until interrupted.
    Controller(ControllerArgs),
    /// Run a scenario and write its report.
    Simulate(SimulateArgs),
    /// Compute segment speeds and hotspot flags from a trace.
    Replay(ReplayArgs),
    /// Show a running controller's state.
    Status(StatusArgs),
    /// Send one command to a node through a running controller.
    Dispatch(DispatchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    finish(init_logging(&cli.log_level).and_then(|()| match cli.command {
        Command::Controller(a) => controller(a),
        Command::Simulate(a) => simulate(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Status(a) => status(a),
        Command::Dispatch(a) => dispatch(a),
    }))
}
