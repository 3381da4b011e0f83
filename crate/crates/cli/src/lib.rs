//! Library side of the `c2f` command-line tool: argument definitions,
//! run configuration, report writers and one module per command.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use args::{Cli, Command};
pub use config::{RunConfig, RunMode};
pub use error::CliError;

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Split(a) => commands::split::run(&a),
        Command::Synth(a) => commands::synth::run(&a),
        Command::Train(a) => commands::train::run(&a),
        Command::Eval(a) => commands::eval::run(&a),
        Command::Infer(a) => commands::infer::run(&a),
        Command::Viz(a) => commands::viz::run(&a),
        Command::Ablate(a) => commands::ablate::run(&a),
        Command::Gradcheck(a) => commands::gradcheck::run(&a),
        Command::Timing(a) => commands::timing::run(&a),
    }
}
