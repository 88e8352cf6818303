//! Deterministic stand-in for a VLM, for tests and population/iteration sweeps.
//!
//! Each item has a known answer, distractor answers and a set of objects that
//! are really in its (fictional) image. Initial candidates are correct with a
//! fixed probability; aggregation candidates apply a rule to the answers of
//! the candidates quoted in the prompt. Reasoning mentions true objects and,
//! at a configured rate, one invented object.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::LazyLock;

use async_trait::async_trait;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use trajagg_core::config::ConfigError;
use trajagg_core::evalkit::option_letter;
use trajagg_core::format::{parse_key_list, render_key_list};
use trajagg_core::seed::child_rng;
use trajagg_core::{normalize_answer, parse_output, EvalItem, MultimodalInput};

use crate::backend::{Backend, BackendError, GenerationRequest};
use crate::grounding::FixtureEntry;

pub const OBJECT_VOCAB: &[&str] = &[
    "van", "lady", "shirt", "dog", "table", "mug", "tree", "car", "bicycle", "lamp", "window", "chair",
];
pub const HALLUCINATION_VOCAB: &[&str] = &[
    "unicorn", "ghost", "dragon", "spaceship", "penguin", "volcano", "submarine", "piano",
];

/// Score the generated grounding fixture gives to objects really present.
pub const PRESENT_SCORE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Plurality of the quoted answers, ties broken uniformly at random.
    #[default]
    MajorityOfSubset,
    CopyRandom,
    /// The true answer whenever any candidate has it, else the majority.
    OracleIfAnyCorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorProfile {
    pub p_correct: f64,
    pub aggregation_rule: AggregationRule,
    pub hallucination_rate: f64,
}

impl Default for SimulatorProfile {
    fn default() -> Self {
        Self {
            p_correct: 0.6,
            aggregation_rule: AggregationRule::MajorityOfSubset,
            hallucination_rate: 0.3,
        }
    }
}

impl SimulatorProfile {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [("p_correct", self.p_correct), ("hallucination_rate", self.hallucination_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::OutOfRange {
                    field,
                    detail: "must lie in [0, 1]".into(),
                });
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let profile: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimItem {
    pub media_ref: String,
    /// Normalized.
    pub truth: String,
    pub distractors: Vec<String>,
    pub objects: Vec<String>,
}

impl SimItem {
    pub fn from_eval(item: &EvalItem) -> Self {
        let mut distractors = item.distractors();
        if distractors.is_empty() {
            distractors.push(format!("not {}", normalize_answer(&item.truth)));
        }
        Self {
            media_ref: item.input.media_refs()[0].clone(),
            truth: normalize_answer(&item.truth),
            distractors,
            objects: item.gt_keys.iter().flatten().cloned().collect(),
        }
    }
}

/// One candidate as seen by an aggregation call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimCandidate {
    pub answer: String,
    pub objects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimRole {
    Init,
    Aggregate {
        candidates: Vec<SimCandidate>,
        key_objects: Vec<String>,
    },
}

/// Applies `rule` to the quoted answers. Invariant to their order.
pub fn aggregate_answers<R: Rng>(rule: AggregationRule, answers: &[String], truth: &str, rng: &mut R) -> String {
    match rule {
        AggregationRule::CopyRandom => answers.choose(rng).cloned().unwrap_or_default(),
        AggregationRule::OracleIfAnyCorrect if answers.iter().any(|a| a == truth) => truth.to_string(),
        AggregationRule::MajorityOfSubset | AggregationRule::OracleIfAnyCorrect => {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for a in answers {
                *counts.entry(a).or_default() += 1;
            }
            let Some(&top) = counts.values().max() else {
                return String::new();
            };
            let tied: Vec<&str> = counts.iter().filter(|(_, &c)| c == top).map(|(a, _)| *a).collect();
            tied[rng.random_range(0..tied.len())].to_string()
        }
    }
}

fn draw_initial_answer<R: Rng>(item: &SimItem, profile: &SimulatorProfile, rng: &mut R) -> String {
    if rng.random::<f64>() < profile.p_correct {
        item.truth.clone()
    } else {
        item.distractors.choose(rng).cloned().unwrap_or_default()
    }
}

fn hallucination<R: Rng>(item: &SimItem, rate: f64, rng: &mut R) -> Option<String> {
    if rng.random::<f64>() >= rate {
        return None;
    }
    let pool: Vec<&str> = HALLUCINATION_VOCAB
        .iter()
        .copied()
        .filter(|h| !item.objects.iter().any(|o| o == h))
        .collect();
    pool.choose(rng).map(|s| s.to_string())
}

/// Produces one well-formed candidate. The answer is drawn first, then the
/// mentioned objects.
pub fn simulate_candidate<R: Rng>(item: &SimItem, role: &SimRole, profile: &SimulatorProfile, rng: &mut R) -> String {
    let (answer, mut objects) = match role {
        SimRole::Init => {
            let answer = draw_initial_answer(item, profile, rng);
            let mut seen: Vec<String> = item.objects.iter().filter(|_| rng.random::<f64>() < 0.7).cloned().collect();
            if seen.is_empty() {
                if let Some(o) = item.objects.choose(rng) {
                    seen.push(o.clone());
                }
            }
            (answer, seen)
        }
        SimRole::Aggregate {
            candidates,
            key_objects,
        } => {
            let answers: Vec<String> = candidates.iter().map(|c| c.answer.clone()).collect();
            let answer = if answers.is_empty() {
                draw_initial_answer(item, profile, rng)
            } else {
                aggregate_answers(profile.aggregation_rule, &answers, &item.truth, rng)
            };
            let union: BTreeSet<&String> = candidates.iter().flat_map(|c| &c.objects).collect();
            let carried = union
                .into_iter()
                .filter(|o| key_objects.is_empty() || key_objects.contains(o))
                .cloned()
                .collect();
            (answer, carried)
        }
    };
    if let Some(h) = hallucination(item, profile.hallucination_rate, rng) {
        if !objects.contains(&h) {
            objects.push(h);
        }
    }
    let seen = if objects.is_empty() {
        "nothing distinctive".to_string()
    } else {
        objects.iter().map(|o| format!("the {o}")).collect::<Vec<_>>().join(", ")
    };
    format!(
        "<think>\nLooking at the image I notice {seen}. Weighing the options, the best supported one is {answer}.\n</think>\n<visual_keys>\n{}\n</visual_keys>\n<answer>\n{answer}\n</answer>",
        render_key_list(objects.iter().map(String::as_str)),
    )
}

static CANDIDATE_HEADER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"### Candidate #\d+ ###: ").expect("valid regex"));
static KEY_OBJECTS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^Key Objects: (\[.*\])\s*$").expect("valid regex"));

/// Recovers the quoted candidates and key objects from an aggregation prompt.
pub fn parse_aggregation_prompt(prompt: &str) -> SimRole {
    let keys_at = KEY_OBJECTS.find(prompt).map(|m| m.start()).unwrap_or(prompt.len());
    let starts: Vec<(usize, usize)> = CANDIDATE_HEADER.find_iter(prompt).map(|m| (m.start(), m.end())).collect();
    let mut candidates = Vec::new();
    for (k, &(_, body_start)) in starts.iter().enumerate() {
        let end = starts.get(k + 1).map(|s| s.0).unwrap_or(keys_at).max(body_start);
        if let Ok(parsed) = parse_output(&prompt[body_start..end], false) {
            candidates.push(SimCandidate {
                answer: normalize_answer(&parsed.answer),
                objects: parsed.visual_keys.unwrap_or_default(),
            });
        }
    }
    let key_objects = KEY_OBJECTS
        .captures(prompt)
        .and_then(|c| parse_key_list(&c[1]).ok())
        .unwrap_or_default();
    SimRole::Aggregate {
        candidates,
        key_objects,
    }
}

/// Backend that answers from [`simulate_candidate`]. Items are looked up by
/// the first media reference of the request.
pub struct SimulatorBackend {
    profile: SimulatorProfile,
    items: HashMap<String, SimItem>,
    seed: u64,
}

impl SimulatorBackend {
    pub fn new(profile: SimulatorProfile, items: impl IntoIterator<Item = SimItem>, seed: u64) -> Self {
        Self {
            profile,
            items: items.into_iter().map(|i| (i.media_ref.clone(), i)).collect(),
            seed,
        }
    }

    pub fn from_eval_items(profile: SimulatorProfile, items: &[EvalItem], seed: u64) -> Self {
        Self::new(profile, items.iter().map(SimItem::from_eval), seed)
    }
}

#[async_trait]
impl Backend for SimulatorBackend {
    async fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let media = request.media_refs.first().map(String::as_str).unwrap_or("");
        let item = self
            .items
            .get(media)
            .ok_or_else(|| BackendError::transport(format!("simulator has no item for media `{media}`")))?;
        let attempt = request.attempt.to_string();
        let mut rng = child_rng(self.seed, &["sim", media, &request.request_tag, &attempt]);
        let tag = request.request_tag.as_str();
        if tag.starts_with("extract") {
            let found: Vec<&str> = OBJECT_VOCAB
                .iter()
                .chain(HALLUCINATION_VOCAB)
                .copied()
                .filter(|w| Regex::new(&format!(r"\b{w}\b")).is_ok_and(|re| re.is_match(&request.prompt)))
                .collect();
            return Ok(render_key_list(found));
        }
        let role = if tag.starts_with("init") {
            SimRole::Init
        } else {
            parse_aggregation_prompt(&request.prompt)
        };
        Ok(simulate_candidate(item, &role, &self.profile, &mut rng))
    }
}

/// Seeded multiple-choice items with 3 or 4 lettered options and 2-3 objects.
pub fn synthetic_items(n: usize, seed: u64) -> Vec<EvalItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let n_choices = rng.random_range(3..=4);
            let truth = rng.random_range(0..n_choices);
            let n_objects = rng.random_range(2..=3);
            let objects: BTreeSet<String> = OBJECT_VOCAB
                .choose_multiple(&mut rng, n_objects)
                .map(|s| s.to_string())
                .collect();
            let choices: Vec<String> = (0..n_choices).map(|c| format!("option {}", option_letter(c))).collect();
            let media = format!("sim://img/{i:05}");
            let question = format!("Item {i}: which option best matches the image?");
            EvalItem {
                item_id: format!("sim-{i:05}"),
                input: MultimodalInput::image(media, question).expect("non-empty media and question"),
                truth: option_letter(truth).to_string(),
                choices: Some(choices),
                gt_keys: Some(objects),
                candidates: None,
            }
        })
        .collect()
}

/// Grounding fixture in which exactly the items' true objects are present.
pub fn grounding_fixture(items: &[EvalItem]) -> Vec<FixtureEntry> {
    items
        .iter()
        .flat_map(|item| {
            let media = item.input.media_refs()[0].clone();
            item.gt_keys.iter().flatten().map(move |o| FixtureEntry {
                media_ref: media.clone(),
                phrase: o.clone(),
                score: PRESENT_SCORE,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item() -> SimItem {
        SimItem {
            media_ref: "m".into(),
            truth: "B".into(),
            distractors: vec!["A".into(), "C".into()],
            objects: vec!["van".into(), "lady".into()],
        }
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn majority_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rule = AggregationRule::MajorityOfSubset;
        assert_eq!(aggregate_answers(rule, &strings(&["B", "B", "C", "B"]), "A", &mut rng), "B");
        for seed in 0..50 {
            let a = aggregate_answers(rule, &strings(&["A", "C", "A", "C"]), "A", &mut ChaCha8Rng::seed_from_u64(seed));
            let b = aggregate_answers(rule, &strings(&["C", "C", "A", "A"]), "A", &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ties_are_split() {
        let rule = AggregationRule::MajorityOfSubset;
        let hits = (0..2000)
            .filter(|&s| aggregate_answers(rule, &strings(&["A", "C"]), "A", &mut ChaCha8Rng::seed_from_u64(s)) == "A")
            .count();
        assert!((900..1100).contains(&hits), "{hits}");
    }

    #[test]
    fn oracle_and_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let answers = strings(&["A", "A", "B"]);
        assert_eq!(aggregate_answers(AggregationRule::OracleIfAnyCorrect, &answers, "B", &mut rng), "B");
        let copied = aggregate_answers(AggregationRule::CopyRandom, &answers, "B", &mut rng);
        assert!(answers.contains(&copied));
    }

    #[test]
    fn certain_init_is_correct_and_well_formed() {
        let profile = SimulatorProfile {
            p_correct: 1.0,
            hallucination_rate: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let raw = simulate_candidate(&item(), &SimRole::Init, &profile, &mut rng);
            let parsed = parse_output(&raw, true).unwrap();
            assert_eq!(parsed.answer, "B");
            let keys = parsed.visual_keys.unwrap();
            assert!(!keys.is_empty() && keys.iter().all(|k| k == "van" || k == "lady"));
        }
    }

    #[test]
    fn aggregation_keeps_verified_objects_only() {
        let profile = SimulatorProfile {
            hallucination_rate: 0.0,
            ..Default::default()
        };
        let role = SimRole::Aggregate {
            candidates: vec![
                SimCandidate {
                    answer: "B".into(),
                    objects: strings(&["van", "ghost"]),
                },
                SimCandidate {
                    answer: "B".into(),
                    objects: strings(&["lady"]),
                },
            ],
            key_objects: strings(&["van"]),
        };
        let raw = simulate_candidate(&item(), &role, &profile, &mut ChaCha8Rng::seed_from_u64(0));
        let parsed = parse_output(&raw, true).unwrap();
        assert_eq!(parsed.visual_keys.unwrap(), vec!["van"]);
        assert_eq!(parsed.answer, "B");
    }

    #[test]
    fn prompt_round_trip() {
        let profile = SimulatorProfile::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cands: Vec<String> = (0..4)
            .map(|_| simulate_candidate(&item(), &SimRole::Init, &profile, &mut rng))
            .collect();
        let refs: Vec<&str> = cands.iter().map(String::as_str).collect();
        let input = MultimodalInput::image("m", "q?").unwrap();
        let prompt = crate::prompts::PromptTemplates::default().aggregate(&input, &refs, ["van", "lady"]);
        let SimRole::Aggregate {
            candidates,
            key_objects,
        } = parse_aggregation_prompt(&prompt)
        else {
            panic!("aggregate role expected");
        };
        assert_eq!(candidates.len(), 4);
        for (c, raw) in candidates.iter().zip(&cands) {
            assert_eq!(c.answer, parse_output(raw, false).unwrap().answer);
        }
        assert_eq!(key_objects, strings(&["lady", "van"]));
    }

    #[test]
    fn synthetic_items_are_consistent() {
        let items = synthetic_items(50, 4);
        assert_eq!(items, synthetic_items(50, 4));
        for it in &items {
            let n = it.choices.as_ref().unwrap().len();
            assert!(n == 3 || n == 4);
            assert_eq!(it.distractors().len(), n - 1);
            let k = it.gt_keys.as_ref().unwrap().len();
            assert!(k == 2 || k == 3);
        }
        assert_eq!(grounding_fixture(&items[..1]).len(), items[0].gt_keys.as_ref().unwrap().len());
    }

    #[test]
    fn profile_toml() {
        let p = SimulatorProfile::from_toml("p_correct = 0.6\naggregation_rule = \"copy_random\"\n").unwrap();
        assert_eq!(p.aggregation_rule, AggregationRule::CopyRandom);
        assert!(SimulatorProfile::from_toml("p_correct = 1.5").is_err());
    }
}
