mod bench;
mod common;
mod manifest;
mod optimize;
mod output;
mod reduce;
mod simulate;
mod validate;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use heatnet::ErrorKind;

/// Simulation, model reduction and optimal feed-in control for district
/// heating networks.
#[derive(Debug, Parser)]
#[command(name = "heatnet", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the full-order model under a given control.
    Simulate(simulate::Args),
    /// Build a reduced model by greedy moment matching.
    Reduce(reduce::Args),
    /// Compute an optimal supply temperature control.
    Optimize(optimize::Args),
    /// Re-simulate a control on a fine reference discretization.
    Validate(validate::Args),
    /// Time one horizon per model and report Jacobian populations.
    Bench(bench::Args),
}

const EXIT_OTHER: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err.chain().find_map(|c| c.downcast_ref::<heatnet::Error>()).map(|e| e.kind());
    match kind {
        Some(ErrorKind::Input) => EXIT_INPUT,
        Some(ErrorKind::Numerical) => EXIT_NUMERICAL,
        Some(ErrorKind::Infeasible) => EXIT_INFEASIBLE,
        None => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_OTHER);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::Reduce(a) => reduce::run(a),
        Command::Optimize(a) => optimize::run(a),
        Command::Validate(a) => validate::run(a),
        Command::Bench(a) => bench::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their causes.
            let mut parts = Vec::new();
            for c in e.chain() {
                parts.push(c.to_string());
                if c.is::<heatnet::Error>() {
                    break;
                }
            }
            eprintln!("error: {}", parts.join(": "));
            ExitCode::from(exit_code(&e))
        }
    }
}
