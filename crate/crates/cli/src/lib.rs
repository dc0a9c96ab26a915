//! Command-line driver for the ivy pipeline and its annotation service.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;
pub mod runner;
pub mod service;

use args::{Cli, Command};
use error::CliResult;
use manifest::{RunManifest, RunStatus};

pub fn dispatch(cli: &Cli) -> CliResult<RunManifest> {
    use commands::*;
    match &cli.command {
        Command::PrepareData(a) => data::prepare_data(a),
        Command::TrainSft(a) => train::train_sft_cmd(a),
        Command::TrainRm(a) => train::train_rm_cmd(a),
        Command::TrainPpo(a) => train::train_ppo_cmd(a),
        Command::Sample(a) => sample::sample(a),
        Command::EvalSim(a) => eval::eval_sim(a),
        Command::Stats(a) => data::stats(a),
        Command::BenchFinetune(a) => bench::bench_finetune(a),
        Command::ServeAnnotate(a) => service::serve_annotate(a),
    }
}

/// Runs a parsed command line and returns the process exit code: 0 iff
/// the run's manifest records success.
pub fn run(cli: &Cli) -> i32 {
    match dispatch(cli) {
        Ok(m) if m.status == RunStatus::Success => 0,
        Ok(m) => {
            eprintln!("error: {}", m.error.as_deref().unwrap_or("run failed"));
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
