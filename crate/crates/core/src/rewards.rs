//! Composite rollout reward: answer correctness, key-evidence overlap and a
//! difficulty-aware length penalty driven by an EMA of the solve rate.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::config::RewardConfig;
use crate::format;
use crate::normalize::normalize_answer;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("solve rate needs at least one rollout")]
    EmptyRollouts,
    #[error("solve rate {0} outside [0, 1]")]
    OutOfRange(f64),
}

/// Exact match after answer normalization.
pub fn r_acc(answer: &str, truth: &str) -> u8 {
    u8::from(normalize_answer(answer) == normalize_answer(truth))
}

fn fold_set<'a>(items: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    items
        .into_iter()
        .map(|s| s.trim().to_lowercase())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Balanced precision/recall overlap between predicted keys `k` and
/// annotated keys `g`. `alpha` weights the precision term.
pub fn r_key<'a, 'b, T: Real>(
    k: impl IntoIterator<Item = &'a str>,
    g: impl IntoIterator<Item = &'b str>,
    alpha: T,
    epsilon: T,
) -> T {
    let k = fold_set(k);
    let g = fold_set(g);
    let hits = T::from_count(k.intersection(&g).count());
    let recall = hits / (T::from_count(g.len()) + epsilon);
    let precision = hits / (T::from_count(k.len()) + epsilon);
    (T::one() - alpha) * recall + alpha * precision
}

/// Fraction of rollouts whose answer matches the truth.
pub fn solve_rate<T: Real, S: AsRef<str>>(rollout_answers: &[S], truth: &str) -> Result<T, RewardError> {
    if rollout_answers.is_empty() {
        return Err(RewardError::EmptyRollouts);
    }
    let solved = rollout_answers
        .iter()
        .filter(|a| r_acc(a.as_ref(), truth) == 1)
        .count();
    Ok(T::from_count(solved) / T::from_count(rollout_answers.len()))
}

/// EMA of the per-prompt solve rate. The first observation initializes it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveRateTracker<T> {
    pub current: T,
    pub gamma: T,
    pub initialized: bool,
}

impl<T: Real> SolveRateTracker<T> {
    pub fn new(gamma: T) -> Self {
        Self {
            current: T::zero(),
            gamma,
            initialized: false,
        }
    }

    /// Smoothed solve rate; zero before the first update.
    pub fn value(&self) -> T {
        self.current
    }

    pub fn update(&mut self, observed: T) -> Result<T, RewardError> {
        if !(observed >= T::zero() && observed <= T::one()) {
            return Err(RewardError::OutOfRange(observed.as_f64()));
        }
        self.current = if self.initialized {
            self.gamma * self.current + (T::one() - self.gamma) * observed
        } else {
            observed
        };
        self.initialized = true;
        Ok(self.current)
    }
}

/// Functional form of [`SolveRateTracker::update`].
pub fn ema_update<T: Real>(
    mut tracker: SolveRateTracker<T>,
    observed: T,
) -> Result<SolveRateTracker<T>, RewardError> {
    tracker.update(observed)?;
    Ok(tracker)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrackingMode {
    #[default]
    PerPrompt,
    Global,
}

/// Solve-rate trackers keyed by prompt id, or one shared tracker in global mode.
#[derive(Debug, Clone)]
pub struct SolveRateBook<T> {
    mode: TrackingMode,
    gamma: T,
    trackers: HashMap<String, SolveRateTracker<T>>,
}

impl<T: Real> SolveRateBook<T> {
    const GLOBAL_KEY: &'static str = "";

    pub fn new(mode: TrackingMode, gamma: T) -> Self {
        Self {
            mode,
            gamma,
            trackers: HashMap::new(),
        }
    }

    fn key<'a>(&self, prompt_id: &'a str) -> &'a str {
        match self.mode {
            TrackingMode::PerPrompt => prompt_id,
            TrackingMode::Global => Self::GLOBAL_KEY,
        }
    }

    pub fn tracker(&self, prompt_id: &str) -> SolveRateTracker<T> {
        self.trackers
            .get(self.key(prompt_id))
            .copied()
            .unwrap_or_else(|| SolveRateTracker::new(self.gamma))
    }

    pub fn observe(&mut self, prompt_id: &str, observed: T) -> Result<T, RewardError> {
        let gamma = self.gamma;
        let key = self.key(prompt_id).to_string();
        self.trackers
            .entry(key)
            .or_insert_with(|| SolveRateTracker::new(gamma))
            .update(observed)
    }
}

/// Difficulty-aware length penalty; never positive.
pub fn r_len<T: Real>(n_tok: usize, smoothed_solve_rate: T, beta: T, j_rollouts: usize) -> T {
    let floor = T::one() / T::from_count(j_rollouts.max(1));
    -(beta * T::from_count(n_tok) * smoothed_solve_rate.max(floor))
}

/// Counts reasoning tokens. Implementations must be monotone under
/// concatenation.
pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokens;

impl TokenCounter for WhitespaceTokens {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Token count of the `<think>` body; text without a think section is
/// treated as reasoning in full.
pub fn think_tokens(text: &str, counter: &dyn TokenCounter) -> usize {
    match format::parse_output(text, false) {
        Ok(parsed) => counter.count(&text[parsed.spans.think]),
        Err(_) => match (text.find("<think>"), text.find("</think>")) {
            (Some(s), Some(e)) if s + "<think>".len() <= e => counter.count(&text[s + "<think>".len()..e]),
            _ => counter.count(text),
        },
    }
}

/// Inputs that produced a breakdown, kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardInputs<T> {
    pub answer: String,
    pub truth: String,
    pub predicted_keys: BTreeSet<String>,
    pub truth_keys: BTreeSet<String>,
    pub n_tok: usize,
    pub smoothed_solve_rate: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<T> {
    pub r_acc: u8,
    pub r_key: T,
    pub r_len: T,
    pub total: T,
    pub inputs: RewardInputs<T>,
}

/// Full composite reward for one rollout. `r_text` is the raw rollout; only
/// its think region counts toward the length penalty.
#[allow(clippy::too_many_arguments)]
pub fn composite<'a, 'b, T: Real>(
    answer: &str,
    predicted_keys: impl IntoIterator<Item = &'a str>,
    r_text: &str,
    truth: &str,
    truth_keys: impl IntoIterator<Item = &'b str>,
    tracker: &SolveRateTracker<T>,
    config: &RewardConfig<T>,
    counter: &dyn TokenCounter,
) -> RewardBreakdown<T> {
    let k = fold_set(predicted_keys);
    let g = fold_set(truth_keys);
    let acc = r_acc(answer, truth);
    let key = r_key(k.iter().map(String::as_str), g.iter().map(String::as_str), config.alpha, config.epsilon);
    let n_tok = think_tokens(r_text, counter);
    let len = r_len(n_tok, tracker.value(), config.beta, config.j_rollouts);
    let total = config.w_acc * T::from_count(acc as usize) + config.w_key * key + len;
    RewardBreakdown {
        r_acc: acc,
        r_key: key,
        r_len: len,
        total,
        inputs: RewardInputs {
            answer: answer.to_string(),
            truth: truth.to_string(),
            predicted_keys: k,
            truth_keys: g,
            n_tok,
            smoothed_solve_rate: tracker.value(),
        },
    }
}
