use std::sync::Arc;

use proptest::prelude::*;
use trajagg_core::{EngineConfig, ExitReason, MultimodalInput};
use trajagg_engine::engine::EngineError;
use trajagg_engine::grounding::{FixtureEntry, FixtureVerifier};
use trajagg_engine::simulator::{grounding_fixture, synthetic_items, SimulatorBackend, SimulatorProfile};
use trajagg_engine::{Engine, ScriptEntry, ScriptedBackend};

fn out(answer: &str) -> String {
    format!("<think>I look at the picture.</think>\n<visual_keys>[\"van\", \"ghost\"]</visual_keys>\n<answer>{answer}</answer>")
}

fn input() -> MultimodalInput {
    MultimodalInput::image("img1", "Is there a van?").unwrap()
}

fn config(n: usize, t: usize, m: usize) -> EngineConfig {
    EngineConfig {
        n_population: n,
        t_iterations: t,
        m_subset: m,
        ..EngineConfig::default()
    }
}

fn scripted(entries: Vec<ScriptEntry>) -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::new(entries).unwrap())
}

fn alternating_init() -> Vec<ScriptEntry> {
    (1..=8)
        .map(|i| ScriptEntry::once(format!("init:i={i}"), out(if i % 2 == 0 { "yes" } else { "no" })))
        .collect()
}

#[tokio::test]
async fn consensus_at_first_population_costs_n_calls() {
    let mock = scripted(vec![ScriptEntry::always("init:.*", out("Yes."))]);
    let trace = Engine::new(mock.clone(), config(8, 3, 4)).unwrap().run(&input()).await.unwrap();
    assert_eq!(trace.backend_calls, 8);
    assert_eq!(trace.generations, 8);
    assert_eq!(trace.exit_reason, ExitReason::Consensus { iteration: 1 });
    assert_eq!(trace.answer(), "yes");
    assert_eq!(trace.populations.len(), 1);
    assert!(mock.requests().iter().all(|r| r.request_tag.starts_with("init:")));
}

#[tokio::test]
async fn no_consensus_costs_twenty_five_calls() {
    let mut entries = alternating_init();
    entries.push(ScriptEntry::always("agg:t=2,i=[1-4]", out("yes")));
    entries.push(ScriptEntry::always("agg:t=2,i=[5-8]", out("no")));
    entries.push(ScriptEntry::always("agg:t=3,i=[1-4]", out("yes")));
    entries.push(ScriptEntry::always("agg:t=3,i=[5-8]", out("no")));
    entries.push(ScriptEntry::always("final", out("yes")));
    let mock = scripted(entries);
    let verifier = Arc::new(FixtureVerifier::new([FixtureEntry {
        media_ref: "img1".into(),
        phrase: "van".into(),
        score: 0.9,
    }]));
    let engine = Engine::new(mock.clone(), config(8, 3, 4)).unwrap().with_verifier(verifier);
    let trace = engine.run(&input()).await.unwrap();
    assert_eq!(trace.backend_calls, 25);
    assert_eq!(trace.generations, 25);
    assert_eq!(trace.exit_reason, ExitReason::FinalAggregation);
    assert_eq!(trace.populations.len(), 3);
    assert!(trace.populations.iter().all(|p| p.members.len() == 8));
    assert!(!trace.final_fallback);

    let requests = mock.requests();
    let agg = requests.iter().find(|r| r.request_tag == "agg:t=2,i=1").unwrap();
    assert_eq!(agg.prompt.matches("### Candidate #").count(), 4);
    assert!(agg.prompt.contains("Key Objects: [\"van\"]"));
    let last = requests.last().unwrap();
    assert_eq!(last.request_tag, "final");
    assert_eq!(last.prompt.matches("### Candidate #").count(), 8);
    assert!(trace.evidence.values().all(|e| !e.verified.contains("ghost")));
}

#[tokio::test]
async fn consensus_after_one_round() {
    let mut entries = alternating_init();
    entries.push(ScriptEntry::always("agg:.*", out("yes")));
    let trace = Engine::new(scripted(entries), config(8, 3, 4))
        .unwrap()
        .run(&input())
        .await
        .unwrap();
    assert_eq!(trace.exit_reason, ExitReason::Consensus { iteration: 2 });
    assert_eq!(trace.backend_calls, 16);
}

#[tokio::test]
async fn retry_then_valid() {
    let mut entries = vec![ScriptEntry::once("init:i=1", "no tags here")];
    entries.push(ScriptEntry::always("init:.*", out("yes")));
    let mock = scripted(entries);
    let trace = Engine::new(mock.clone(), config(8, 3, 4)).unwrap().run(&input()).await.unwrap();
    assert_eq!(trace.backend_calls, 9);
    assert_eq!(trace.generations, 8);
    assert_eq!(trace.populations[0].valid_count(), 8);
    let retried: Vec<usize> = mock
        .requests()
        .iter()
        .filter(|r| r.request_tag == "init:i=1")
        .map(|r| r.attempt)
        .collect();
    assert_eq!(retried, vec![0, 1]);
}

#[tokio::test]
async fn always_malformed_fails_every_generation() {
    let mock = scripted(vec![ScriptEntry::always(".*", "<think>unclosed")]);
    let err = Engine::new(mock, config(8, 3, 4)).unwrap().run(&input()).await.unwrap_err();
    match err {
        EngineError::AllGenerationsFailed { iteration, trace } => {
            assert_eq!(iteration, 1);
            assert_eq!(trace.backend_calls, 8 * 3);
            assert!(!trace.final_trajectory.valid);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[tokio::test]
async fn final_failure_falls_back_to_plurality() {
    let entries = vec![
        ScriptEntry::once("init:i=1", out("A")),
        ScriptEntry::once("init:i=2", out("A")),
        ScriptEntry::once("init:i=3", out("B")),
        ScriptEntry::always("final", "garbage"),
    ];
    let trace = Engine::new(scripted(entries), config(3, 1, 2))
        .unwrap()
        .run(&input())
        .await
        .unwrap();
    assert!(trace.final_fallback);
    assert_eq!(trace.answer(), "A");
    assert_eq!(trace.exit_reason, ExitReason::FinalAggregation);
    assert_eq!(trace.backend_calls, 3 + 3);
}

#[tokio::test]
async fn extraction_calls_are_counted() {
    let no_keys = |a: &str| format!("<think>a red mug on the wooden table</think><answer>{a}</answer>");
    let entries = vec![
        ScriptEntry::once("init:i=1", no_keys("yes")),
        ScriptEntry::once("init:i=2", no_keys("no")),
        ScriptEntry::always("agg:.*", no_keys("yes")),
        ScriptEntry::always("final", no_keys("yes")),
    ];
    let extractor = scripted(vec![ScriptEntry::always("extract:.*", "[\"mug\", \"table\"]")]);
    let verifier = Arc::new(FixtureVerifier::new([FixtureEntry {
        media_ref: "img1".into(),
        phrase: "mug".into(),
        score: 0.8,
    }]));
    let trace = Engine::new(scripted(entries), config(2, 2, 2))
        .unwrap()
        .with_verifier(verifier)
        .with_extractor(extractor.clone())
        .run(&input())
        .await
        .unwrap();
    // init 2 + 2 extractions, then consensus at t=2 without further work
    assert_eq!(trace.exit_reason, ExitReason::Consensus { iteration: 2 });
    assert_eq!(trace.generations, 4);
    assert_eq!(trace.backend_calls, 6);
    assert_eq!(extractor.requests().len(), 2);
    assert!(trace.evidence["t1:i1"].verified.contains("mug"));
}

fn simulator_engine(profile: SimulatorProfile, items: usize, grounded: bool, seed: u64) -> (Engine, Vec<trajagg_core::EvalItem>) {
    let items = synthetic_items(items, seed);
    let backend = Arc::new(SimulatorBackend::from_eval_items(profile, &items, seed));
    let mut engine = Engine::new(
        backend,
        EngineConfig {
            seed,
            ..EngineConfig::default()
        },
    )
    .unwrap();
    if grounded {
        engine = engine.with_verifier(Arc::new(FixtureVerifier::new(grounding_fixture(&items))));
    }
    (engine, items)
}

#[tokio::test]
async fn simulator_runs_are_deterministic() {
    let (engine, items) = simulator_engine(SimulatorProfile::default(), 5, true, 7);
    for item in &items {
        let a = engine.run(&item.input).await.unwrap();
        let mut b = engine.run(&item.input).await.unwrap();
        b.wall_time = a.wall_time;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[tokio::test]
async fn ungrounded_mode_completes() {
    let (engine, items) = simulator_engine(SimulatorProfile::default(), 10, false, 3);
    for item in &items {
        let trace = engine.run(&item.input).await.unwrap();
        assert!(trace.final_trajectory.valid);
        assert!(trace.evidence.values().all(|e| e.verified.is_empty()));
    }
}

#[tokio::test]
async fn grounded_mode_with_dead_service_completes() {
    let items = synthetic_items(3, 1);
    let backend = Arc::new(SimulatorBackend::from_eval_items(SimulatorProfile::default(), &items, 1));
    let dead = Arc::new(
        trajagg_engine::HttpVerifier::new("http://127.0.0.1:9", std::time::Duration::from_millis(200), false).unwrap(),
    );
    let engine = Engine::new(backend, EngineConfig::default()).unwrap().with_verifier(dead);
    for item in &items {
        let trace = engine.run(&item.input).await.unwrap();
        assert!(trace.evidence.values().all(|e| e.verified.is_empty()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn budget_and_early_exit(
        n in 1usize..7,
        t in 1usize..4,
        m_frac in 0.0f64..1.0,
        p in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        let items = synthetic_items(2, seed);
        let profile = SimulatorProfile { p_correct: p, ..SimulatorProfile::default() };
        let backend = Arc::new(SimulatorBackend::from_eval_items(profile, &items, seed));
        let engine = Engine::new(backend, EngineConfig { seed, ..config(n, t, m) }).unwrap()
            .with_verifier(Arc::new(FixtureVerifier::new(grounding_fixture(&items))));
        let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
        for item in &items {
            let trace = rt.block_on(engine.run(&item.input)).unwrap();
            prop_assert!(trace.generations <= n * t + 1);
            prop_assert!(trace.populations.iter().all(|pop| pop.members.len() == n));
            if let ExitReason::Consensus { iteration } = trace.exit_reason {
                let pop = &trace.populations[iteration - 1];
                let answers: std::collections::BTreeSet<_> = pop.valid().map(|(_, t)| &t.answer).collect();
                prop_assert_eq!(answers.len(), 1);
            }
            for round in &trace.subsets {
                prop_assert_eq!(round.len(), n);
                prop_assert!(round.iter().all(|s| s.len() == m));
            }
        }
    }
}
