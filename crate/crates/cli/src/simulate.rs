use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use trajagg_core::evalkit;
use trajagg_engine::simulator::{grounding_fixture, synthetic_items};
use trajagg_engine::{Engine, FixtureVerifier, SimulatorBackend};

use crate::error::{print_json, CliError};
use crate::run::{load_engine_config, load_profile, run_items, runtime};

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Simulator profile TOML, or `default`.
    #[arg(long, default_value = "default")]
    profile: String,
    #[arg(long, default_value_t = 500)]
    n_items: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "4,8,12,16")]
    n_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    t_grid: Vec<usize>,
    /// Overrides the config seed; also seeds item generation.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the synthetic items as a dataset.
    #[arg(long)]
    dataset_out: Option<PathBuf>,
    /// Also write a grounding fixture scoring each item's true objects.
    #[arg(long)]
    fixture_out: Option<PathBuf>,
    #[arg(long)]
    no_grounding: bool,
    #[arg(long, default_value_t = 8)]
    jobs: usize,
}

pub fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let base = load_engine_config(args.config.as_ref(), args.seed)?;
    let profile = load_profile(&args.profile)?;
    if args.n_grid.is_empty() || args.t_grid.is_empty() {
        return Err(CliError::usage("UsageError", "grids must be non-empty"));
    }
    if args.n_items == 0 {
        return Err(CliError::usage("UsageError", "n-items must be positive"));
    }
    let items = synthetic_items(args.n_items, base.seed);
    let fixture = grounding_fixture(&items);
    if let Some(path) = &args.dataset_out {
        evalkit::write_dataset(path, &items)?;
    }
    if let Some(path) = &args.fixture_out {
        let mut text = String::new();
        for entry in &fixture {
            let line = serde_json::to_string(entry).map_err(|e| CliError::usage("SerializeError", e))?;
            writeln!(text, "{line}").expect("writing to a String");
        }
        std::fs::write(path, text).map_err(|e| CliError::usage("IoError", e))?;
    }

    let backend = Arc::new(SimulatorBackend::from_eval_items(profile, &items, base.seed));
    let verifier = Arc::new(FixtureVerifier::new(fixture));
    let rt = runtime()?;
    let mut csv = String::from("n,t,accuracy,backend_calls_mean\n");
    for &n in &args.n_grid {
        for &t in &args.t_grid {
            let mut config = base.clone();
            config.n_population = n;
            config.t_iterations = t;
            config.m_subset = config.m_subset.min(n);
            let mut engine = Engine::new(backend.clone(), config).map_err(|e| CliError::usage("SchemaError", e))?;
            if !args.no_grounding {
                engine = engine.with_verifier(verifier.clone());
            }
            let (mut correct, mut calls) = (0usize, 0usize);
            rt.block_on(run_items(&engine, &items, args.jobs, |record| {
                correct += usize::from(record.correct);
                calls += record.trace.backend_calls;
                Ok(())
            }))?;
            let n_items = items.len() as f64;
            writeln!(csv, "{n},{t},{:.4},{:.3}", correct as f64 / n_items, calls as f64 / n_items)
                .expect("writing to a String");
        }
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv).map_err(|e| CliError::usage("IoError", e))?;
            print_json(&serde_json::json!({"grid": path, "rows": args.n_grid.len() * args.t_grid.len()}))
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
