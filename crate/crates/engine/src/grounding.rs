//! Object extraction and verification against the visual input.
//!
//! Verification failures fail closed: the object scores 0 and a warning is
//! logged, so a dead grounding service degrades to ungrounded aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{LazyLock, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Serialize};
use trajagg_core::format::parse_key_list;
use trajagg_core::{ExtractionStrategy, Trajectory};

use crate::backend::{Backend, GenerationRequest};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GroundingError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("grounding service error: {0}")]
    Service(String),
}

/// Confidence that each phrase is present in one media item, in `[0, 1]`,
/// aligned with `phrases`.
#[async_trait]
pub trait Verifier: Send + Sync {
    async fn scores(&self, media_ref: &str, phrases: &[String]) -> Result<Vec<f64>, GroundingError>;

    async fn verify(&self, media_ref: &str, object: &str) -> Result<f64, GroundingError> {
        let scores = self.scores(media_ref, &[object.to_string()]).await?;
        scores
            .first()
            .copied()
            .ok_or_else(|| GroundingError::Service("empty score list".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub media_ref: String,
    pub phrase: String,
    pub score: f64,
}

/// Fixture lookup; pairs not in the fixture score 0.
#[derive(Debug, Clone, Default)]
pub struct FixtureVerifier {
    table: HashMap<(String, String), f64>,
}

impl FixtureVerifier {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        Self {
            table: entries
                .into_iter()
                .map(|e| ((e.media_ref, fold(&e.phrase)), e.score))
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GroundingError> {
        let text = std::fs::read_to_string(path).map_err(|e| GroundingError::Transport(e.to_string()))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: FixtureEntry = serde_json::from_str(line)
                .map_err(|err| GroundingError::Service(format!("fixture line {}: {err}", i + 1)))?;
            entries.push(e);
        }
        Ok(Self::new(entries))
    }
}

#[async_trait]
impl Verifier for FixtureVerifier {
    async fn scores(&self, media_ref: &str, phrases: &[String]) -> Result<Vec<f64>, GroundingError> {
        Ok(phrases
            .iter()
            .map(|p| {
                self.table
                    .get(&(media_ref.to_string(), fold(p)))
                    .copied()
                    .unwrap_or(0.0)
            })
            .collect())
    }
}

/// Client for `POST {base}/ground`.
pub struct HttpVerifier {
    client: reqwest::Client,
    endpoint: String,
    /// One request per phrase instead of one per phrase list.
    per_phrase: bool,
}

#[derive(Serialize)]
struct GroundRequest<'a> {
    media_ref: &'a str,
    phrases: &'a [String],
}

#[derive(Deserialize)]
struct GroundResponse {
    scores: Vec<f64>,
}

impl HttpVerifier {
    pub fn new(base_url: &str, timeout: Duration, per_phrase: bool) -> Result<Self, GroundingError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GroundingError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/ground", base_url.trim_end_matches('/')),
            per_phrase,
        })
    }

    async fn call(&self, media_ref: &str, phrases: &[String]) -> Result<Vec<f64>, GroundingError> {
        let response = self
            .client
            .post(&self.endpoint)
            .json(&GroundRequest { media_ref, phrases })
            .send()
            .await
            .map_err(|e| GroundingError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(GroundingError::Service(format!("status {status}: {body}")));
        }
        let body: GroundResponse = response
            .json()
            .await
            .map_err(|e| GroundingError::Service(e.to_string()))?;
        if body.scores.len() != phrases.len() {
            return Err(GroundingError::Service(format!(
                "{} scores for {} phrases",
                body.scores.len(),
                phrases.len()
            )));
        }
        if let Some(bad) = body.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(GroundingError::Service(format!("score {bad} outside [0, 1]")));
        }
        Ok(body.scores)
    }
}

#[async_trait]
impl Verifier for HttpVerifier {
    async fn scores(&self, media_ref: &str, phrases: &[String]) -> Result<Vec<f64>, GroundingError> {
        if phrases.is_empty() {
            return Ok(Vec::new());
        }
        if !self.per_phrase {
            return self.call(media_ref, phrases).await;
        }
        let mut out = Vec::with_capacity(phrases.len());
        for p in phrases {
            out.extend(self.call(media_ref, std::slice::from_ref(p)).await?);
        }
        Ok(out)
    }
}

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Case-folds and deduplicates, keeping first-seen order.
pub fn fold_objects<S: AsRef<str>>(objects: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for o in objects {
        let f = fold(o.as_ref());
        if !f.is_empty() && !out.contains(&f) {
            out.push(f);
        }
    }
    out
}

/// Mentioned objects, their scores and the subset above the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedEvidence {
    pub mentioned: Vec<String>,
    pub scores: BTreeMap<String, f64>,
    pub verified: BTreeSet<String>,
    pub threshold: f64,
}

impl VerifiedEvidence {
    /// `verified = {o : score(o) > threshold}`; missing scores count as 0.
    pub fn from_scores(mentioned: Vec<String>, scores: BTreeMap<String, f64>, threshold: f64) -> Self {
        let verified = mentioned
            .iter()
            .filter(|o| scores.get(*o).copied().unwrap_or(0.0) > threshold)
            .cloned()
            .collect();
        Self {
            mentioned,
            scores,
            verified,
            threshold,
        }
    }

    pub fn empty(threshold: f64) -> Self {
        Self::from_scores(Vec::new(), BTreeMap::new(), threshold)
    }
}

/// Scores already fetched within one run, keyed by (media_ref, object).
#[derive(Debug, Default)]
pub struct ScoreCache {
    inner: Mutex<HashMap<(String, String), f64>>,
}

impl ScoreCache {
    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `k` evenly spaced frames (all of them when there are at most `k`).
pub fn select_frames(refs: &[String], k: usize) -> Vec<&String> {
    let n = refs.len();
    if n <= k {
        return refs.iter().collect();
    }
    if k <= 1 {
        return vec![&refs[n / 2]];
    }
    (0..k).map(|i| &refs[i * (n - 1) / (k - 1)]).collect()
}

/// Verifies `objects` against the selected frames of `media_refs`, taking the
/// best score per object. Each (frame, object) pair is queried at most once
/// per cache; failed queries score 0 and are not cached.
pub async fn verified_evidence(
    verifier: &dyn Verifier,
    media_refs: &[String],
    objects: &[String],
    threshold: f64,
    frames: usize,
    cache: &ScoreCache,
) -> VerifiedEvidence {
    let mentioned = fold_objects(objects);
    let mut best: BTreeMap<String, f64> = mentioned.iter().map(|o| (o.clone(), 0.0)).collect();
    for frame in select_frames(media_refs, frames) {
        let missing: Vec<String> = {
            let cached = cache.inner.lock().expect("cache lock");
            for o in &mentioned {
                if let Some(s) = cached.get(&(frame.clone(), o.clone())) {
                    let b = best.get_mut(o).expect("seeded");
                    *b = b.max(*s);
                }
            }
            mentioned
                .iter()
                .filter(|o| !cached.contains_key(&(frame.clone(), (*o).clone())))
                .cloned()
                .collect()
        };
        if missing.is_empty() {
            continue;
        }
        match verifier.scores(frame, &missing).await {
            Ok(scores) if scores.len() == missing.len() => {
                let mut cached = cache.inner.lock().expect("cache lock");
                for (o, s) in missing.into_iter().zip(scores) {
                    let b = best.get_mut(&o).expect("seeded");
                    *b = b.max(s);
                    cached.insert((frame.clone(), o), s);
                }
            }
            Ok(scores) => tracing::warn!(
                media = %frame,
                expected = missing.len(),
                got = scores.len(),
                "grounding returned misaligned scores; treating as 0"
            ),
            Err(e) => tracing::warn!(media = %frame, error = %e, "grounding failed; treating as 0"),
        }
    }
    VerifiedEvidence::from_scores(mentioned, best, threshold)
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "there", "here", "it", "its", "is", "are", "was", "were", "be",
    "been", "being", "am", "has", "have", "had", "do", "does", "did", "of", "on", "in", "at", "to", "from", "by",
    "with", "without", "for", "into", "onto", "over", "under", "near", "behind", "above", "below", "beside", "between",
    "next", "and", "or", "but", "so", "because", "if", "then", "than", "as", "while", "which", "who", "whom", "what",
    "where", "when", "why", "how", "i", "we", "you", "he", "she", "they", "them", "his", "her", "their", "our", "my",
    "me", "us", "not", "no", "yes", "can", "could", "would", "should", "will", "may", "might", "must", "see", "seen",
    "sees", "look", "looks", "looking", "appear", "appears", "seems", "seem", "shows", "show", "shown", "notice",
    "answer", "question", "image", "picture", "photo", "video", "frame", "option", "options", "candidate", "candidates",
    "some", "any", "all", "each", "other", "one", "two", "three", "very", "also", "just", "only", "likely", "best",
    "think", "let", "lets", "about", "based", "therefore", "thus", "both", "more", "most", "such", "visible",
    "clearly", "probably", "maybe", "wearing", "holding", "sitting", "standing", "left", "right",
];

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[a-z][a-z'-]*").expect("valid regex"));
static LIST: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)\[.*?\]").expect("valid regex"));

/// Offline extraction: runs of non-stop words (last three kept) plus each
/// run's head word.
pub fn heuristic_objects(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out: Vec<String> = Vec::new();
    let mut push = |s: String| {
        if !out.contains(&s) {
            out.push(s);
        }
    };
    let mut run: Vec<&str> = Vec::new();
    let mut last_end = 0;
    let flush = |run: &mut Vec<&str>, push: &mut dyn FnMut(String)| {
        if run.is_empty() {
            return;
        }
        let tail = &run[run.len().saturating_sub(3)..];
        push(tail.join(" "));
        if tail.len() > 1 {
            push(tail[tail.len() - 1].to_string());
        }
        run.clear();
    };
    for m in WORD.find_iter(&lower) {
        let gap = &lower[last_end..m.start()];
        if gap.chars().any(|c| !c.is_whitespace()) {
            flush(&mut run, &mut push);
        }
        last_end = m.end();
        let w = m.as_str().trim_matches(['\'', '-']);
        if w.len() < 3 || STOP_WORDS.contains(&w) {
            flush(&mut run, &mut push);
        } else {
            run.push(w);
        }
    }
    flush(&mut run, &mut push);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    Keys,
    Backend,
    Heuristic,
    /// Backend extraction failed; the heuristic was used instead.
    HeuristicFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub objects: Vec<String>,
    pub method: ExtractionMethod,
    pub backend_calls: usize,
}

pub const EXTRACTION_PROMPT: &str = "List every physical object mentioned in the reasoning below. Reply with only a list of quoted object names, for example [\"cup\", \"table\"].\n\nReasoning:\n";

/// Sampling parameters for strategy-B extraction calls.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionParams {
    pub media_refs: Vec<String>,
    pub max_tokens: u32,
    pub request_tag: String,
}

/// Picks the objects a trajectory mentions according to `strategy`.
pub async fn extract_objects(
    trajectory: &Trajectory,
    strategy: ExtractionStrategy,
    extractor: Option<&dyn Backend>,
    params: &ExtractionParams,
) -> Extraction {
    let resolved = match strategy {
        ExtractionStrategy::Auto if trajectory.visual_keys.is_some() => ExtractionStrategy::Keys,
        ExtractionStrategy::Auto if extractor.is_some() => ExtractionStrategy::Backend,
        ExtractionStrategy::Auto => ExtractionStrategy::Heuristic,
        s => s,
    };
    let heuristic = |method| Extraction {
        objects: heuristic_objects(&trajectory.reasoning),
        method,
        backend_calls: 0,
    };
    match resolved {
        ExtractionStrategy::Keys => Extraction {
            objects: trajectory.keys().map(str::to_string).collect(),
            method: ExtractionMethod::Keys,
            backend_calls: 0,
        },
        ExtractionStrategy::Backend => {
            let Some(backend) = extractor else {
                return heuristic(ExtractionMethod::HeuristicFallback);
            };
            if trajectory.reasoning.trim().is_empty() {
                return Extraction {
                    objects: Vec::new(),
                    method: ExtractionMethod::Backend,
                    backend_calls: 0,
                };
            }
            let request = GenerationRequest {
                prompt: format!("{EXTRACTION_PROMPT}{}", trajectory.reasoning),
                media_refs: params.media_refs.clone(),
                temperature: 0.0,
                top_p: 1.0,
                max_tokens: params.max_tokens,
                request_tag: params.request_tag.clone(),
                attempt: 0,
            };
            let parsed = match backend.generate(&request).await {
                Ok(text) => LIST
                    .find(&text)
                    .ok_or_else(|| "reply has no list".to_string())
                    .and_then(|m| parse_key_list(m.as_str()).map_err(|e| e.to_string())),
                Err(e) => Err(e.to_string()),
            };
            match parsed {
                Ok(objects) => Extraction {
                    objects,
                    method: ExtractionMethod::Backend,
                    backend_calls: 1,
                },
                Err(detail) => {
                    tracing::warn!(tag = %params.request_tag, %detail, "extraction call failed; using heuristic");
                    Extraction {
                        backend_calls: 1,
                        ..heuristic(ExtractionMethod::HeuristicFallback)
                    }
                }
            }
        }
        ExtractionStrategy::Heuristic | ExtractionStrategy::Auto => heuristic(ExtractionMethod::Heuristic),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptEntry, ScriptedBackend};

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn fixture() -> FixtureVerifier {
        FixtureVerifier::new([
            FixtureEntry {
                media_ref: "img1".into(),
                phrase: "van".into(),
                score: 0.9,
            },
            FixtureEntry {
                media_ref: "img1".into(),
                phrase: "ghost".into(),
                score: 0.1,
            },
            FixtureEntry {
                media_ref: "img1".into(),
                phrase: "edge".into(),
                score: 0.35,
            },
        ])
    }

    #[tokio::test]
    async fn fixture_lookup() {
        let v = fixture();
        assert_eq!(v.verify("img1", "van").await.unwrap(), 0.9);
        assert_eq!(v.verify("img1", "VAN ").await.unwrap(), 0.9);
        assert_eq!(v.verify("img2", "van").await.unwrap(), 0.0);
    }

    #[tokio::test]
    async fn threshold_is_strict() {
        let cache = ScoreCache::default();
        let media = strings(&["img1"]);
        let ev = verified_evidence(&fixture(), &media, &strings(&["van", "ghost", "edge", "Van"]), 0.35, 4, &cache).await;
        assert_eq!(ev.mentioned, strings(&["van", "ghost", "edge"]));
        assert_eq!(ev.verified, BTreeSet::from(["van".to_string()]));
        assert_eq!(cache.len(), 3);

        let empty = verified_evidence(&fixture(), &media, &[], 0.35, 4, &cache).await;
        assert!(empty.verified.is_empty());
    }

    struct Down;

    #[async_trait]
    impl Verifier for Down {
        async fn scores(&self, _: &str, _: &[String]) -> Result<Vec<f64>, GroundingError> {
            Err(GroundingError::Transport("connection refused".into()))
        }
    }

    #[tokio::test]
    async fn fails_closed() {
        let cache = ScoreCache::default();
        let ev = verified_evidence(&Down, &strings(&["img1"]), &strings(&["van"]), 0.35, 4, &cache).await;
        assert!(ev.verified.is_empty());
        assert_eq!(ev.scores["van"], 0.0);
        assert!(cache.is_empty());
    }

    #[tokio::test]
    async fn video_takes_best_frame() {
        let v = FixtureVerifier::new([
            FixtureEntry {
                media_ref: "f0".into(),
                phrase: "dog".into(),
                score: 0.2,
            },
            FixtureEntry {
                media_ref: "f9".into(),
                phrase: "dog".into(),
                score: 0.8,
            },
        ]);
        let frames: Vec<String> = (0..10).map(|i| format!("f{i}")).collect();
        assert_eq!(
            select_frames(&frames, 4).into_iter().cloned().collect::<Vec<_>>(),
            strings(&["f0", "f3", "f6", "f9"])
        );
        let ev = verified_evidence(&v, &frames, &strings(&["dog"]), 0.35, 4, &ScoreCache::default()).await;
        assert_eq!(ev.scores["dog"], 0.8);
        assert!(ev.verified.contains("dog"));
    }

    #[test]
    fn heuristic_finds_nouns() {
        let objs = heuristic_objects("a red mug on the wooden table");
        assert!(objs.contains(&"mug".to_string()), "{objs:?}");
        assert!(objs.contains(&"table".to_string()), "{objs:?}");
        assert!(heuristic_objects("").is_empty());
    }

    fn trajectory(raw: &str) -> Trajectory {
        Trajectory::from_raw(raw).unwrap()
    }

    fn params() -> ExtractionParams {
        ExtractionParams {
            media_refs: strings(&["img1"]),
            max_tokens: 64,
            request_tag: "extract:t=1,i=1".into(),
        }
    }

    #[tokio::test]
    async fn strategies() {
        let with_keys = trajectory("<think>a van</think><visual_keys>[\"van\",\"lady\"]</visual_keys><answer>yes</answer>");
        let e = extract_objects(&with_keys, ExtractionStrategy::Auto, None, &params()).await;
        assert_eq!(e.objects, strings(&["lady", "van"]));
        assert_eq!(e.method, ExtractionMethod::Keys);

        let plain = trajectory("<think>a red mug on the wooden table</think><answer>yes</answer>");
        let e = extract_objects(&plain, ExtractionStrategy::Auto, None, &params()).await;
        assert_eq!(e.method, ExtractionMethod::Heuristic);

        let ok = ScriptedBackend::new(vec![ScriptEntry::once("extract:.*", "Objects: ['mug', 'table']")]).unwrap();
        let e = extract_objects(&plain, ExtractionStrategy::Auto, Some(&ok), &params()).await;
        assert_eq!((e.objects.clone(), e.method, e.backend_calls), (strings(&["mug", "table"]), ExtractionMethod::Backend, 1));

        let bad = ScriptedBackend::new(vec![ScriptEntry::once("extract:.*", "no idea")]).unwrap();
        let e = extract_objects(&plain, ExtractionStrategy::Backend, Some(&bad), &params()).await;
        assert_eq!(e.method, ExtractionMethod::HeuristicFallback);
        assert!(e.objects.contains(&"mug".to_string()));
    }
}
