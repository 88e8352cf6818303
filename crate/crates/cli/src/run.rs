use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{ArgGroup, Args};
use futures::StreamExt;
use trajagg_core::evalkit::{self, RecordSink, RunRecord};
use trajagg_core::{ConfigFile, EngineConfig, EvalItem};
use trajagg_engine::engine::EngineError;
use trajagg_engine::{
    Backend, Engine, FixtureVerifier, HttpBackend, HttpBackendConfig, HttpVerifier, PromptTemplates, ScriptedBackend,
    SimulatorBackend, SimulatorProfile, Verifier,
};

use crate::error::{print_json, CliError};

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("backend").required(true)))]
#[command(group(ArgGroup::new("grounding").required(true)))]
pub struct RunArgs {
    /// JSONL dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// TOML file with `[engine]` and `[reward]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Chat-completions base URL, e.g. http://host:8000/v1.
    #[arg(long, group = "backend")]
    backend_url: Option<String>,
    /// Scripted responses (JSONL of request_tag_pattern/response).
    #[arg(long, group = "backend")]
    mock_script: Option<PathBuf>,
    /// Simulator profile TOML, or `default`.
    #[arg(long, group = "backend")]
    simulate: Option<String>,
    #[arg(long, default_value = "default")]
    model: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// Grounding service base URL (serves POST /ground).
    #[arg(long, group = "grounding")]
    verifier_url: Option<String>,
    /// JSONL fixture of media_ref/phrase/score.
    #[arg(long, group = "grounding")]
    grounding_fixture: Option<PathBuf>,
    /// Skip verification; every verified set is empty.
    #[arg(long, group = "grounding")]
    no_grounding: bool,
    /// One grounding request per phrase.
    #[arg(long)]
    per_phrase: bool,
    /// Single-sample run (N = 1, T = 1).
    #[arg(long)]
    baseline: bool,
    /// Items processed concurrently.
    #[arg(long, default_value_t = 4)]
    jobs: usize,
    /// Output record file (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory with init.txt, aggregate.txt and final.txt.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Baseline records for the summary's paired CI.
    #[arg(long)]
    paired_with: Option<PathBuf>,
    #[arg(long, default_value_t = trajagg_core::stats::DEFAULT_ITERATIONS)]
    iterations: usize,
}

pub fn load_engine_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<EngineConfig, CliError> {
    let mut config = match path {
        Some(p) => ConfigFile::load(p)?.engine,
        None => EngineConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

pub fn load_profile(arg: &str) -> Result<SimulatorProfile, CliError> {
    if arg == "default" {
        Ok(SimulatorProfile::default())
    } else {
        Ok(SimulatorProfile::load(arg)?)
    }
}

fn build_backend(args: &RunArgs, items: &[EvalItem], seed: u64) -> Result<Arc<dyn Backend>, CliError> {
    if let Some(url) = &args.backend_url {
        let backend = HttpBackend::new(HttpBackendConfig {
            base_url: url.clone(),
            model: args.model.clone(),
            api_key_env: args.api_key_env.clone(),
            timeout: Duration::from_secs(args.timeout_secs),
        })
        .map_err(|e| CliError::usage("BackendError", e))?;
        return Ok(Arc::new(backend));
    }
    if let Some(path) = &args.mock_script {
        let mock = ScriptedBackend::load(path).map_err(|e| CliError::usage("SchemaError", e))?;
        return Ok(Arc::new(mock));
    }
    let profile = load_profile(args.simulate.as_deref().unwrap_or("default"))?;
    Ok(Arc::new(SimulatorBackend::from_eval_items(profile, items, seed)))
}

fn build_verifier(args: &RunArgs) -> Result<Option<Arc<dyn Verifier>>, CliError> {
    if let Some(url) = &args.verifier_url {
        let v = HttpVerifier::new(url, Duration::from_secs(args.timeout_secs), args.per_phrase)
            .map_err(|e| CliError::usage("GroundingError", e))?;
        return Ok(Some(Arc::new(v)));
    }
    if let Some(path) = &args.grounding_fixture {
        let v = FixtureVerifier::load(path).map_err(|e| CliError::usage("SchemaError", e))?;
        return Ok(Some(Arc::new(v)));
    }
    Ok(None)
}

/// Runs every item, yielding records in dataset order.
pub async fn run_items<F>(engine: &Engine, items: &[EvalItem], jobs: usize, mut on_record: F) -> Result<usize, CliError>
where
    F: FnMut(RunRecord) -> Result<(), CliError>,
{
    let mut stream = futures::stream::iter(items)
        .map(|item| async move { (item, engine.run(&item.input).await) })
        .buffered(jobs.max(1));
    let mut done = 0;
    loop {
        let next = tokio::select! {
            next = stream.next() => next,
            _ = tokio::signal::ctrl_c() => return Err(CliError::Interrupted),
        };
        let Some((item, result)) = next else { break };
        let record = match result {
            Ok(trace) => RunRecord::new(item, trace.summary(), trace.answer().to_string()),
            Err(EngineError::AllGenerationsFailed { trace, .. }) => {
                tracing::warn!(item = %item.item_id, "every generation failed; recording an empty answer");
                RunRecord::new(item, trace.summary(), String::new())
            }
            Err(e) => return Err(CliError::usage("EngineError", e)),
        };
        on_record(record)?;
        done += 1;
    }
    Ok(done)
}

pub fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::usage("RuntimeError", e))
}

pub fn run(args: RunArgs) -> Result<(), CliError> {
    let mut config = load_engine_config(args.config.as_ref(), args.seed)?;
    if args.baseline {
        config = config.single_sample();
    }
    let items = evalkit::load_dataset(&args.dataset)?;
    if items.is_empty() {
        return Err(CliError::usage("SchemaError", "dataset has no items"));
    }
    let baseline = args.paired_with.as_ref().map(evalkit::load_records).transpose()?;
    let backend = build_backend(&args, &items, config.seed)?;
    let mut engine = Engine::new(backend, config).map_err(|e| CliError::usage("SchemaError", e))?;
    if let Some(verifier) = build_verifier(&args)? {
        engine = engine.with_verifier(verifier);
    }
    if let Some(dir) = &args.templates {
        let templates = PromptTemplates::from_dir(dir).map_err(|e| CliError::usage("TemplateError", e))?;
        engine = engine.with_templates(templates);
    }

    let mut sink = RecordSink::create(&args.out, false)?;
    let mut records = Vec::with_capacity(items.len());
    let outcome = runtime()?.block_on(run_items(&engine, &items, args.jobs, |record| {
        sink.write(&record)?;
        records.push(record);
        Ok(())
    }));
    drop(sink);
    outcome?;

    let summary = evalkit::summarize(&records, baseline.as_deref(), true, args.iterations, engine.config().seed)?;
    print_json(&summary)
}
