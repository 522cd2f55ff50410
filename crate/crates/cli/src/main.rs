mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use crate::config::UsageError;

/// Doubly robust off-policy learning for average-reward MDPs.
#[derive(Parser)]
#[command(name = "opl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a behaviour-policy dataset.
    Simulate(commands::SimulateArgs),
    /// Cross-validate the penalty pairs on a dataset.
    Tune(commands::TuneArgs),
    /// Learn a policy from a dataset.
    Learn(commands::LearnArgs),
    /// Monte Carlo value of a policy.
    Evaluate(commands::EvaluateArgs),
    /// Search for the best in-class policy by simulation.
    Oracle(commands::OracleArgs),
    /// Rerun a simulation table at reduced scale.
    Reproduce(commands::ReproduceArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Tune(_) => "tune",
            Command::Learn(_) => "learn",
            Command::Evaluate(_) => "evaluate",
            Command::Oracle(_) => "oracle",
            Command::Reproduce(_) => "reproduce",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    opl_core::par::init_from_env();
    let name = cli.command.name();
    let outcome = match &cli.command {
        Command::Simulate(a) => commands::simulate_cmd(a),
        Command::Tune(a) => commands::tune_cmd(a),
        Command::Learn(a) => commands::learn_cmd(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Oracle(a) => commands::oracle_cmd(a),
        Command::Reproduce(a) => commands::reproduce_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("\n{}", sub.render_usage());
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
