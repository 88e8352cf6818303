use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{ArgGroup, Args};
use serde::{Deserialize, Serialize};
use trajagg_core::gspo::gradcheck::{self, DEFAULT_STEP, DEFAULT_TOLERANCE};
use trajagg_core::gspo::logged;
use trajagg_engine::grounding::Verifier;
use trajagg_engine::{FixtureVerifier, HttpVerifier};

use crate::error::{print_json, CliError};
use crate::run::runtime;

#[derive(Args, Debug)]
pub struct GspoCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

pub fn gspo_check(args: GspoCheckArgs) -> Result<(), CliError> {
    if args.instances == 0 || !(args.step > 0.0) {
        return Err(CliError::usage("UsageError", "instances and step must be positive"));
    }
    let report = gradcheck::run_suite(args.seed, args.instances, args.step, args.tolerance)
        .map_err(|e| CliError::check("GspoError", e))?;
    print_json(&report)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::check(
            "ToleranceExceeded",
            format!(
                "max relative error {:.3e} at instance {} (tolerance {:.1e}); weight checks {:.1e}/{:.1e}/{:.1e}",
                report.max_relative_error,
                report.worst_instance,
                report.tolerance,
                report.equal_reward_uniformity,
                report.zero_lambda_uniformity,
                report.shift_invariance
            ),
        ))
    }
}

#[derive(Args, Debug)]
pub struct GspoLossArgs {
    /// JSONL with prompt_id, rollout_id, reward_breakdown, logprob_theta, logprob_ref.
    #[arg(long)]
    rollouts: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.02)]
    alpha_kl: f64,
}

pub fn gspo_loss(args: GspoLossArgs) -> Result<(), CliError> {
    let rollouts = logged::read_rollouts(&args.rollouts).map_err(|e| CliError::usage("SchemaError", e))?;
    let report = logged::loss_report(&rollouts, args.lambda, args.alpha_kl).map_err(|e| CliError::usage("GspoError", e))?;
    print_json(&report)
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true)))]
pub struct GroundCheckArgs {
    #[arg(long, group = "source")]
    verifier_url: Option<String>,
    #[arg(long, group = "source")]
    fixture: Option<PathBuf>,
    /// JSONL of {"media_ref", "phrase"}.
    #[arg(long)]
    phrases: PathBuf,
    #[arg(long, default_value_t = 0.35)]
    threshold: f64,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

#[derive(Deserialize)]
struct PhraseLine {
    media_ref: String,
    phrase: String,
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    media_ref: &'a str,
    phrase: &'a str,
    score: Option<f64>,
    verified: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn ground_check(args: GroundCheckArgs) -> Result<(), CliError> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(CliError::usage("UsageError", "threshold must lie in (0, 1)"));
    }
    let verifier: Box<dyn Verifier> = match (&args.verifier_url, &args.fixture) {
        (Some(url), _) => Box::new(
            HttpVerifier::new(url, Duration::from_secs(args.timeout_secs), false)
                .map_err(|e| CliError::usage("GroundingError", e))?,
        ),
        (None, Some(path)) => Box::new(FixtureVerifier::load(path).map_err(|e| CliError::usage("SchemaError", e))?),
        (None, None) => unreachable!("clap requires one source"),
    };
    let text = std::fs::read_to_string(&args.phrases).map_err(|e| CliError::usage("IoError", e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: PhraseLine = serde_json::from_str(line)
            .map_err(|e| CliError::usage("SchemaError", format!("line {}: {e}", i + 1)))?;
        pairs.push(pair);
    }

    let rt = runtime()?;
    let mut failures = 0;
    let mut out = std::io::stdout().lock();
    for pair in &pairs {
        let result = rt.block_on(verifier.verify(&pair.media_ref, &pair.phrase));
        let row = match &result {
            Ok(score) => ScoreRow {
                media_ref: &pair.media_ref,
                phrase: &pair.phrase,
                score: Some(*score),
                verified: *score > args.threshold,
                error: None,
            },
            Err(e) => {
                failures += 1;
                ScoreRow {
                    media_ref: &pair.media_ref,
                    phrase: &pair.phrase,
                    score: None,
                    verified: false,
                    error: Some(e.to_string()),
                }
            }
        };
        let line = serde_json::to_string(&row).map_err(|e| CliError::usage("SerializeError", e))?;
        writeln!(out, "{line}").map_err(|e| CliError::usage("IoError", e))?;
    }
    if failures > 0 {
        return Err(CliError::check("GroundingError", format!("{failures} of {} pairs failed", pairs.len())));
    }
    Ok(())
}
