//! `trajagg`: batch runs, simulator sweeps, scoring and self-checks.
//!
//! stdout carries only machine-readable results; logs and errors go to
//! stderr. Exit codes: 0 success, 1 check failure, 2 usage or config error.

mod checks;
mod error;
mod run;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "trajagg", version, about = "Grounded iterative aggregation of reasoning trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the aggregation loop over a dataset and write per-item records.
    Run(run::RunArgs),
    /// Sweep population size and iteration count with the simulator backend.
    Simulate(simulate::SimulateArgs),
    /// Accuracy and bootstrap CI from record files.
    Score(ScoreArgs),
    /// Finite-difference check of the toy-policy GSPO gradient.
    GspoCheck(checks::GspoCheckArgs),
    /// GSPO losses for logged rollouts with per-token log-probs.
    GspoLoss(checks::GspoLossArgs),
    /// Score phrase/media pairs with a grounding service or fixture.
    GroundCheck(checks::GroundCheckArgs),
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Resample per-item deltas (the default).
    #[arg(long, conflicts_with = "unpaired")]
    paired: bool,
    /// Resample method and baseline independently.
    #[arg(long)]
    unpaired: bool,
    #[arg(long, default_value_t = trajagg_core::stats::DEFAULT_ITERATIONS)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn score(args: ScoreArgs) -> Result<(), CliError> {
    let records = trajagg_core::evalkit::load_records(&args.records)?;
    let baseline = args
        .baseline
        .as_ref()
        .map(trajagg_core::evalkit::load_records)
        .transpose()?;
    let summary =
        trajagg_core::evalkit::summarize(&records, baseline.as_deref(), !args.unpaired, args.iterations, args.seed)?;
    error::print_json(&summary)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::run(args),
        Command::Simulate(args) => simulate::simulate(args),
        Command::Score(args) => score(args),
        Command::GspoCheck(args) => checks::gspo_check(args),
        Command::GspoLoss(args) => checks::gspo_loss(args),
        Command::GroundCheck(args) => checks::ground_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
