//! Iterative grounded aggregation over a population of reasoning trajectories.
//!
//! One run: sample N trajectories, stop if every valid one agrees, otherwise
//! for T-1 rounds rebuild each slot from a random peer subset plus the
//! objects verified in those peers, checking agreement after every round,
//! and finally merge the last population into one answer.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::future::join_all;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use trajagg_core::seed::{child_rng, derive_seed};
use trajagg_core::{ConfigError, EngineConfig, ExitReason, MultimodalInput, Population, TraceSummary, Trajectory};

use crate::backend::{Backend, GenerationRequest};
use crate::grounding::{extract_objects, verified_evidence, ExtractionMethod, ExtractionParams, ScoreCache, VerifiedEvidence, Verifier};
use crate::prompts::PromptTemplates;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("population has no valid members")]
    NoValidMembers,
    /// Every slot of a population failed after retries. The partial trace is
    /// kept so callers can still record the item.
    #[error("every generation failed at iteration {iteration}")]
    AllGenerationsFailed { iteration: usize, trace: Box<RunTrace> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub input: MultimodalInput,
    pub populations: Vec<Population>,
    /// Keyed `t{iteration}:i{slot}` with 1-based slots.
    pub evidence: BTreeMap<String, VerifiedEvidence>,
    /// Slot subsets per aggregation round: `subsets[r][i]` lists the slot
    /// indices (0-based) quoted when building slot `i` of round `r + 2`.
    pub subsets: Vec<Vec<Vec<usize>>>,
    #[serde(rename = "final")]
    pub final_trajectory: Trajectory,
    pub exit_reason: ExitReason,
    /// Generation attempts (retries included) plus extraction calls.
    pub backend_calls: usize,
    /// Generation slots requested: N per population plus the final call.
    pub generations: usize,
    pub final_fallback: bool,
    pub extraction_fallbacks: usize,
    pub subset_shrinks: usize,
    pub wall_time: Duration,
}

impl RunTrace {
    pub fn answer(&self) -> &str {
        &self.final_trajectory.answer
    }

    /// Persistable view without timing.
    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            exit_reason: self.exit_reason,
            iterations: self.populations.len(),
            backend_calls: self.backend_calls,
            generations: self.generations,
            final_fallback: self.final_fallback,
            answers: self
                .populations
                .iter()
                .map(|p| {
                    p.members
                        .iter()
                        .map(|t| t.valid.then(|| t.answer.clone()))
                        .collect()
                })
                .collect(),
            final_visual_keys: self.final_trajectory.visual_keys.clone(),
        }
    }
}

pub fn evidence_id(iteration: usize, slot: usize) -> String {
    format!("t{iteration}:i{}", slot + 1)
}

/// The shared answer when every valid member agrees.
pub fn check_consensus(population: &Population) -> Result<Option<String>, EngineError> {
    let mut answers = population.valid().map(|(_, t)| t.answer.as_str());
    let first = answers.next().ok_or(EngineError::NoValidMembers)?;
    Ok(answers.all(|a| a == first).then(|| first.to_string()))
}

/// Uniform draw of `m` distinct valid slots. With fewer than `m` valid
/// members all of them are returned in slot order.
pub fn sample_subset<R: Rng>(population: &Population, m: usize, rng: &mut R) -> Result<Vec<usize>, EngineError> {
    let valid: Vec<usize> = population.valid().map(|(i, _)| i).collect();
    if valid.is_empty() {
        return Err(EngineError::NoValidMembers);
    }
    if valid.len() <= m {
        if valid.len() < m {
            tracing::debug!(valid = valid.len(), m, "subset shrunk to the valid members");
        }
        return Ok(valid);
    }
    Ok(rand::seq::index::sample(rng, valid.len(), m)
        .into_iter()
        .map(|k| valid[k])
        .collect())
}

/// Most frequent answer; ties go to the answer first seen at the lowest slot.
pub fn plurality_answer(population: &Population) -> Option<String> {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for (_, t) in population.valid() {
        match counts.iter_mut().find(|(a, _)| *a == t.answer) {
            Some((_, c)) => *c += 1,
            None => counts.push((&t.answer, 1)),
        }
    }
    let top = counts.iter().map(|(_, c)| *c).max()?;
    counts.into_iter().find(|(_, c)| *c == top).map(|(a, _)| a.to_string())
}

struct RunState {
    calls: AtomicUsize,
    generations: AtomicUsize,
    extraction_fallbacks: AtomicUsize,
    cache: ScoreCache,
    limiter: Semaphore,
}

pub struct Engine {
    backend: Arc<dyn Backend>,
    verifier: Option<Arc<dyn Verifier>>,
    extractor: Option<Arc<dyn Backend>>,
    config: EngineConfig,
    templates: PromptTemplates,
}

impl Engine {
    pub fn new(backend: Arc<dyn Backend>, config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        Ok(Self {
            backend,
            verifier: None,
            extractor: None,
            config,
            templates: PromptTemplates::default(),
        })
    }

    /// Without a verifier every verified set is empty (ungrounded mode).
    pub fn with_verifier(mut self, verifier: Arc<dyn Verifier>) -> Self {
        self.verifier = Some(verifier);
        self
    }

    /// Backend used for extraction calls when keys are missing.
    pub fn with_extractor(mut self, extractor: Arc<dyn Backend>) -> Self {
        self.extractor = Some(extractor);
        self
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    fn item_seed(&self, input: &MultimodalInput) -> u64 {
        let mut labels = vec!["run", input.question()];
        labels.extend(input.media_refs().iter().map(String::as_str));
        derive_seed(self.config.seed, &labels)
    }

    /// One slot: up to `1 + max_retries` attempts; invalid if none parses.
    async fn generate(&self, state: &RunState, input: &MultimodalInput, prompt: &str, tag: String) -> Trajectory {
        state.generations.fetch_add(1, Ordering::Relaxed);
        let mut last_raw = String::new();
        for attempt in 0..=self.config.max_retries_per_generation {
            let request = GenerationRequest {
                prompt: prompt.to_string(),
                media_refs: input.media_refs().to_vec(),
                temperature: self.config.temperature,
                top_p: self.config.top_p,
                max_tokens: self.config.max_tokens,
                request_tag: tag.clone(),
                attempt,
            };
            let result = {
                let _permit = state.limiter.acquire().await.expect("semaphore is never closed");
                state.calls.fetch_add(1, Ordering::Relaxed);
                self.backend.generate(&request).await
            };
            match result {
                Ok(raw) => match Trajectory::from_raw(&raw) {
                    Ok(t) if t.valid => return t,
                    Ok(_) => {
                        tracing::debug!(%tag, attempt, "output has an empty field");
                        last_raw = raw;
                    }
                    Err(e) => {
                        tracing::debug!(%tag, attempt, error = %e, "malformed output");
                        last_raw = raw;
                    }
                },
                Err(e) => tracing::warn!(%tag, attempt, error = %e, "generation failed"),
            }
        }
        Trajectory::invalid(last_raw)
    }

    pub async fn init_population(&self, state_input: &MultimodalInput) -> Result<Population, EngineError> {
        let state = self.new_state();
        let population = self.init_with(&state, state_input).await;
        if population.valid_count() == 0 {
            return Err(EngineError::NoValidMembers);
        }
        Ok(population)
    }

    async fn init_with(&self, state: &RunState, input: &MultimodalInput) -> Population {
        let prompt = self.templates.init(input);
        let members = join_all(
            (1..=self.config.n_population).map(|i| self.generate(state, input, &prompt, format!("init:i={i}"))),
        )
        .await;
        Population::new(1, members)
    }

    async fn evidence_for(
        &self,
        state: &RunState,
        input: &MultimodalInput,
        trajectory: &Trajectory,
        id: &str,
    ) -> VerifiedEvidence {
        let threshold = self.config.grounding_threshold;
        let Some(verifier) = &self.verifier else {
            return VerifiedEvidence::empty(threshold);
        };
        let params = ExtractionParams {
            media_refs: input.media_refs().to_vec(),
            max_tokens: self.config.max_tokens,
            request_tag: format!("extract:{id}"),
        };
        let extraction = extract_objects(trajectory, self.config.extraction, self.extractor.as_deref(), &params).await;
        state.calls.fetch_add(extraction.backend_calls, Ordering::Relaxed);
        if extraction.method == ExtractionMethod::HeuristicFallback {
            state.extraction_fallbacks.fetch_add(1, Ordering::Relaxed);
        }
        verified_evidence(
            verifier.as_ref(),
            input.media_refs(),
            &extraction.objects,
            threshold,
            self.config.grounding_frames,
            &state.cache,
        )
        .await
    }

    /// Evidence for the given slots of `population`, computed once per slot
    /// and stored in `store`.
    async fn collect_evidence(
        &self,
        state: &RunState,
        input: &MultimodalInput,
        population: &Population,
        slots: &BTreeSet<usize>,
        store: &mut BTreeMap<String, VerifiedEvidence>,
    ) {
        let pending: Vec<(usize, String)> = slots
            .iter()
            .map(|&s| (s, evidence_id(population.iteration, s)))
            .filter(|(_, id)| !store.contains_key(id))
            .collect();
        let computed = join_all(
            pending
                .iter()
                .map(|(s, id)| self.evidence_for(state, input, &population.members[*s], id)),
        )
        .await;
        for ((_, id), ev) in pending.into_iter().zip(computed) {
            store.insert(id, ev);
        }
    }

    fn verified_union<'a>(
        population: &Population,
        slots: impl IntoIterator<Item = &'a usize>,
        store: &'a BTreeMap<String, VerifiedEvidence>,
    ) -> BTreeSet<String> {
        slots
            .into_iter()
            .filter_map(|&s| store.get(&evidence_id(population.iteration, s)))
            .flat_map(|ev| ev.verified.iter().cloned())
            .collect()
    }

    /// Builds one new trajectory from the quoted subset and its verified objects.
    pub async fn aggregate_step(
        &self,
        input: &MultimodalInput,
        subset: &[&Trajectory],
        evidence: &[&VerifiedEvidence],
        tag: &str,
    ) -> Trajectory {
        let state = self.new_state();
        let keys: BTreeSet<&str> = evidence.iter().flat_map(|e| e.verified.iter().map(String::as_str)).collect();
        let candidates: Vec<&str> = subset.iter().map(|t| t.raw.as_str()).collect();
        let prompt = self.templates.aggregate(input, &candidates, keys);
        self.generate(&state, input, &prompt, tag.to_string()).await
    }

    fn new_state(&self) -> RunState {
        RunState {
            calls: AtomicUsize::new(0),
            generations: AtomicUsize::new(0),
            extraction_fallbacks: AtomicUsize::new(0),
            cache: ScoreCache::default(),
            limiter: Semaphore::new(self.config.max_in_flight),
        }
    }

    pub async fn run(&self, input: &MultimodalInput) -> Result<RunTrace, EngineError> {
        let started = Instant::now();
        let state = self.new_state();
        let seed = self.item_seed(input);
        let mut evidence = BTreeMap::new();
        let mut subsets_log = Vec::new();
        let mut shrinks = 0;

        let finish = |populations: Vec<Population>,
                      evidence: BTreeMap<String, VerifiedEvidence>,
                      subsets: Vec<Vec<Vec<usize>>>,
                      final_trajectory: Trajectory,
                      exit_reason: ExitReason,
                      final_fallback: bool,
                      shrinks: usize| RunTrace {
            input: input.clone(),
            populations,
            evidence,
            subsets,
            final_trajectory,
            exit_reason,
            backend_calls: state.calls.load(Ordering::Relaxed),
            generations: state.generations.load(Ordering::Relaxed),
            final_fallback,
            extraction_fallbacks: state.extraction_fallbacks.load(Ordering::Relaxed),
            subset_shrinks: shrinks,
            wall_time: started.elapsed(),
        };

        let mut populations = vec![self.init_with(&state, input).await];
        for round in 1..=self.config.t_iterations {
            let current = populations.last().expect("non-empty");
            if current.valid_count() == 0 {
                let iteration = current.iteration;
                let trace = finish(
                    populations,
                    evidence,
                    subsets_log,
                    Trajectory::invalid(""),
                    ExitReason::FinalAggregation,
                    true,
                    shrinks,
                );
                return Err(EngineError::AllGenerationsFailed {
                    iteration,
                    trace: Box::new(trace),
                });
            }
            if check_consensus(current)?.is_some() {
                let representative = current.valid().next().map(|(_, t)| t.clone()).expect("has valid members");
                let iteration = current.iteration;
                return Ok(finish(
                    populations,
                    evidence,
                    subsets_log,
                    representative,
                    ExitReason::Consensus { iteration },
                    false,
                    shrinks,
                ));
            }
            if round == self.config.t_iterations {
                break;
            }

            let next_iteration = round + 1;
            let mut subsets = Vec::with_capacity(self.config.n_population);
            for i in 1..=self.config.n_population {
                let mut rng = child_rng(seed, &["subset", &round.to_string(), &i.to_string()]);
                let subset = sample_subset(current, self.config.m_subset, &mut rng)?;
                if subset.len() < self.config.m_subset {
                    shrinks += 1;
                }
                subsets.push(subset);
            }
            let members: BTreeSet<usize> = subsets.iter().flatten().copied().collect();
            self.collect_evidence(&state, input, current, &members, &mut evidence).await;

            let prompts: Vec<String> = subsets
                .iter()
                .map(|subset| {
                    let candidates: Vec<&str> = subset.iter().map(|&s| current.members[s].raw.as_str()).collect();
                    let keys = Self::verified_union(current, subset, &evidence);
                    self.templates
                        .aggregate(input, &candidates, keys.iter().map(String::as_str))
                })
                .collect();
            let members = join_all(prompts.iter().enumerate().map(|(i, prompt)| {
                self.generate(&state, input, prompt, format!("agg:t={next_iteration},i={}", i + 1))
            }))
            .await;
            subsets_log.push(subsets);
            populations.push(Population::new(next_iteration, members));
        }

        let last = populations.last().expect("non-empty");
        let slots: BTreeSet<usize> = last.valid().map(|(i, _)| i).collect();
        self.collect_evidence(&state, input, last, &slots, &mut evidence).await;
        let candidates: Vec<&str> = last.valid().map(|(_, t)| t.raw.as_str()).collect();
        let keys = Self::verified_union(last, &slots, &evidence);
        let prompt = self
            .templates
            .final_round(input, &candidates, keys.iter().map(String::as_str));
        let merged = self.generate(&state, input, &prompt, "final".into()).await;
        let (final_trajectory, fallback) = if merged.valid {
            (merged, false)
        } else {
            let answer = plurality_answer(last).expect("last population has valid members");
            tracing::warn!(%answer, "final aggregation failed; using plurality vote");
            (
                Trajectory {
                    reasoning: String::new(),
                    answer,
                    visual_keys: None,
                    raw: merged.raw,
                    valid: true,
                },
                true,
            )
        };
        Ok(finish(
            populations,
            evidence,
            subsets_log,
            final_trajectory,
            ExitReason::FinalAggregation,
            fallback,
            shrinks,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(answer: &str) -> Trajectory {
        Trajectory::from_raw(&format!("<think>r</think><answer>{answer}</answer>")).unwrap()
    }

    fn pop(answers: &[&str]) -> Population {
        Population::new(1, answers.iter().map(|a| t(a)).collect())
    }

    #[test]
    fn consensus_rules() {
        assert_eq!(check_consensus(&pop(&["yes", "yes", "yes"])).unwrap().as_deref(), Some("yes"));
        assert_eq!(check_consensus(&pop(&["yes", "yes", "no"])).unwrap(), None);
        assert_eq!(check_consensus(&pop(&["Yes.", "\"yes\""])).unwrap().as_deref(), Some("yes"));

        let mut p = pop(&["yes", "no"]);
        p.members[1] = Trajectory::invalid("junk");
        assert_eq!(check_consensus(&p).unwrap().as_deref(), Some("yes"));
        p.members[0] = Trajectory::invalid("junk");
        assert!(matches!(check_consensus(&p), Err(EngineError::NoValidMembers)));
    }

    #[test]
    fn subsets() {
        let p = pop(&["a"; 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_subset(&p, 4, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.iter().collect::<BTreeSet<_>>().len(), 4);
        assert_eq!(s, sample_subset(&p, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());

        let mut p = pop(&["a"; 8]);
        for i in 3..8 {
            p.members[i] = Trajectory::invalid("");
        }
        assert_eq!(sample_subset(&p, 4, &mut rng).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn plurality_tie_goes_to_lowest_slot() {
        assert_eq!(plurality_answer(&pop(&["A", "A", "B"])).as_deref(), Some("A"));
        assert_eq!(plurality_answer(&pop(&["B", "A", "A", "B"])).as_deref(), Some("B"));
    }
}
