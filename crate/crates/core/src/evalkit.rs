//! Dataset ingestion, run records and summary reports.
//!
//! Two dataset line schemas are accepted:
//!
//! * RL-instance lines: `question_id`, `image`, `q`, `a`, optional
//!   `full_answer` and `candidates` (index -> raw trajectory text);
//! * generic lines: `item_id`, `media` (string or list), optional
//!   `media_type`, `question`, `answer`, optional `choices` and `gt_keys`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::normalize::normalize_answer;
use crate::rewards::{r_acc, RewardBreakdown};
use crate::stats::{self, StatsError};
use crate::types::{MediaType, MultimodalInput};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub detail: String,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{} malformed line(s); first at line {}: {}", .0.len(), .0[0].line, .0[0].detail)]
    Schema(Vec<LineError>),
    #[error("cannot pair records: {0}")]
    Pairing(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl EvalError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        EvalError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub input: MultimodalInput,
    pub truth: String,
    pub choices: Option<Vec<String>>,
    pub gt_keys: Option<BTreeSet<String>>,
    pub candidates: Option<BTreeMap<String, String>>,
}

impl EvalItem {
    /// Normalized answers of the non-truth choices.
    pub fn distractors(&self) -> Vec<String> {
        let truth = normalize_answer(&self.truth);
        let Some(choices) = &self.choices else {
            return Vec::new();
        };
        let letters = truth.len() == 1 && truth.chars().all(|c| c.is_ascii_uppercase());
        (0..choices.len())
            .map(|i| {
                if letters {
                    option_letter(i).to_string()
                } else {
                    normalize_answer(&choices[i])
                }
            })
            .filter(|c| *c != truth)
            .collect()
    }
}

pub fn option_letter(index: usize) -> char {
    (b'A' + (index % 26) as u8) as char
}

#[derive(Deserialize)]
struct InstanceLine {
    question_id: StringOrNumber,
    image: String,
    q: String,
    a: String,
    #[serde(default)]
    #[allow(dead_code)]
    full_answer: Option<String>,
    #[serde(default)]
    candidates: Option<BTreeMap<String, String>>,
    #[serde(default)]
    gt_keys: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct GenericLine {
    item_id: StringOrNumber,
    media: OneOrMany,
    #[serde(default)]
    media_type: MediaType,
    question: String,
    answer: String,
    #[serde(default)]
    choices: Option<Vec<String>>,
    #[serde(default)]
    gt_keys: Option<Vec<String>>,
    #[serde(default)]
    candidates: Option<BTreeMap<String, String>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StringOrNumber {
    S(String),
    N(serde_json::Number),
}

impl StringOrNumber {
    fn into_string(self) -> String {
        match self {
            StringOrNumber::S(s) => s,
            StringOrNumber::N(n) => n.to_string(),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

fn fold_keys(keys: Option<Vec<String>>) -> Option<BTreeSet<String>> {
    keys.map(|k| {
        k.into_iter()
            .map(|s| s.trim().to_lowercase())
            .filter(|s| !s.is_empty())
            .collect()
    })
}

fn validate_choices(truth: &str, choices: &[String]) -> Result<(), String> {
    let t = normalize_answer(truth);
    let by_text = choices.iter().any(|c| normalize_answer(c) == t);
    let by_letter = (0..choices.len()).any(|i| option_letter(i).to_string() == t);
    if by_text || by_letter {
        Ok(())
    } else {
        Err(format!("answer `{truth}` is not one of the choices"))
    }
}

/// Parses one dataset line.
pub fn parse_item(line: &str) -> Result<EvalItem, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let is_instance = value.get("q").is_some() || value.get("question_id").is_some();
    let item = if is_instance {
        let l: InstanceLine = serde_json::from_value(value).map_err(|e| e.to_string())?;
        EvalItem {
            item_id: l.question_id.into_string(),
            input: MultimodalInput::image(l.image, l.q).map_err(|e| e.to_string())?,
            truth: l.a,
            choices: None,
            gt_keys: fold_keys(l.gt_keys),
            candidates: l.candidates,
        }
    } else {
        let l: GenericLine = serde_json::from_value(value).map_err(|e| e.to_string())?;
        let media = match l.media {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        };
        EvalItem {
            item_id: l.item_id.into_string(),
            input: MultimodalInput::new(media, l.question, l.media_type).map_err(|e| e.to_string())?,
            truth: l.answer,
            choices: l.choices,
            gt_keys: fold_keys(l.gt_keys),
            candidates: l.candidates,
        }
    };
    if item.truth.trim().is_empty() {
        return Err("answer must be non-empty".into());
    }
    if let Some(choices) = &item.choices {
        validate_choices(&item.truth, choices)?;
    }
    Ok(item)
}

/// Loads a JSONL dataset. Every malformed line is reported with its
/// 1-based line number; nothing is skipped silently.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<EvalItem>, EvalError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| EvalError::io(path, e))?;
    let mut items = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EvalError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_item(&line) {
            Ok(item) => items.push(item),
            Err(detail) => errors.push(LineError { line: i + 1, detail }),
        }
    }
    if errors.is_empty() {
        Ok(items)
    } else {
        Err(EvalError::Schema(errors))
    }
}

pub fn write_dataset(path: impl AsRef<Path>, items: &[EvalItem]) -> Result<(), EvalError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| EvalError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let mut line = serde_json::json!({
            "item_id": item.item_id,
            "media": item.input.media_refs(),
            "media_type": item.input.media_type(),
            "question": item.input.question(),
            "answer": item.truth,
        });
        if let Some(c) = &item.choices {
            line["choices"] = serde_json::json!(c);
        }
        if let Some(k) = &item.gt_keys {
            line["gt_keys"] = serde_json::json!(k);
        }
        if let Some(c) = &item.candidates {
            line["candidates"] = serde_json::json!(c);
        }
        writeln!(w, "{line}").map_err(|e| EvalError::io(path, e))?;
    }
    w.flush().map_err(|e| EvalError::io(path, e))
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExitReason {
    /// Every valid member agreed at this iteration.
    Consensus { iteration: usize },
    FinalAggregation,
}

/// The part of a run trace that is persisted per item. Contains no timing so
/// record files are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub exit_reason: ExitReason,
    pub iterations: usize,
    /// Generation attempts, retries and extraction calls included.
    pub backend_calls: usize,
    /// Generation requests issued (one per population slot or final call).
    pub generations: usize,
    pub final_fallback: bool,
    /// Normalized answers of each population, invalid members as `null`.
    pub answers: Vec<Vec<Option<String>>>,
    pub final_visual_keys: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub item_id: String,
    pub trace: TraceSummary,
    pub predicted: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<RewardBreakdown<f64>>,
}

impl RunRecord {
    pub fn new(item: &EvalItem, trace: TraceSummary, predicted: String) -> Self {
        let correct = r_acc(&predicted, &item.truth) == 1;
        Self {
            item_id: item.item_id.clone(),
            trace,
            predicted,
            correct,
            rewards: None,
        }
    }
}

/// Single-writer JSONL appender; each record is flushed as it is written.
pub struct RecordSink {
    writer: BufWriter<File>,
    path: String,
}

impl RecordSink {
    pub fn create(path: impl AsRef<Path>, append: bool) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| EvalError::io(path, e))?;
        Ok(Self {
            writer: BufWriter::new(file),
            path: path.display().to_string(),
        })
    }

    pub fn write(&mut self, record: &RunRecord) -> Result<(), EvalError> {
        let line = serde_json::to_string(record).expect("record serializes");
        let io = |e| EvalError::Io {
            path: self.path.clone(),
            source: e,
        };
        writeln!(self.writer, "{line}").map_err(io)?;
        self.writer.flush().map_err(|e| EvalError::Io {
            path: self.path.clone(),
            source: e,
        })
    }
}

pub fn persist_records(path: impl AsRef<Path>, records: &[RunRecord], append: bool) -> Result<(), EvalError> {
    let mut sink = RecordSink::create(path, append)?;
    records.iter().try_for_each(|r| sink.write(r))
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>, EvalError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| EvalError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EvalError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            EvalError::Schema(vec![LineError {
                line: i + 1,
                detail: e.to_string(),
            }])
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn accuracy(records: &[RunRecord]) -> Result<f64, EvalError> {
    Ok(stats::accuracy(records.iter().map(|r| r.correct))?)
}

/// Summary report written by `run` and `score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub baseline_accuracy: Option<f64>,
    pub delta: Option<f64>,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub significant: bool,
    pub n_items: usize,
    pub backend_calls_total: usize,
}

/// Aligns baseline records to `records` by item id.
pub fn pair_records<'a>(
    records: &'a [RunRecord],
    baseline: &'a [RunRecord],
) -> Result<Vec<(&'a RunRecord, &'a RunRecord)>, EvalError> {
    let index: BTreeMap<&str, &RunRecord> = baseline.iter().map(|r| (r.item_id.as_str(), r)).collect();
    if index.len() != records.len() || baseline.len() != records.len() {
        return Err(EvalError::Pairing(format!(
            "{} records vs {} baseline records",
            records.len(),
            baseline.len()
        )));
    }
    records
        .iter()
        .map(|r| {
            index
                .get(r.item_id.as_str())
                .map(|b| (r, *b))
                .ok_or_else(|| EvalError::Pairing(format!("baseline has no item `{}`", r.item_id)))
        })
        .collect()
}

/// Accuracy plus a percentile-bootstrap CI. With a baseline the CI is on the
/// accuracy delta (paired per item unless `paired` is false); without one it
/// is on the accuracy itself.
pub fn summarize(
    records: &[RunRecord],
    baseline: Option<&[RunRecord]>,
    paired: bool,
    iterations: usize,
    seed: u64,
) -> Result<Summary, EvalError> {
    let acc = accuracy(records)?;
    let calls = records.iter().map(|r| r.trace.backend_calls).sum();
    let indicator = |r: &RunRecord| if r.correct { 1.0 } else { 0.0 };
    let (baseline_accuracy, delta, ci) = match baseline {
        Some(base) => {
            let base_acc = accuracy(base)?;
            let ci = if paired {
                let deltas: Vec<f64> = pair_records(records, base)?
                    .into_iter()
                    .map(|(m, b)| indicator(m) - indicator(b))
                    .collect();
                stats::bootstrap_ci(&deltas, iterations, stats::DEFAULT_LEVEL, seed)?
            } else {
                let m: Vec<f64> = records.iter().map(indicator).collect();
                let b: Vec<f64> = base.iter().map(indicator).collect();
                stats::bootstrap_ci_unpaired(&m, &b, iterations, stats::DEFAULT_LEVEL, seed)?
            };
            (Some(base_acc), Some(acc - base_acc), ci)
        }
        None => {
            let values: Vec<f64> = records.iter().map(indicator).collect();
            (None, None, stats::bootstrap_ci(&values, iterations, stats::DEFAULT_LEVEL, seed)?)
        }
    };
    Ok(Summary {
        accuracy: acc,
        baseline_accuracy,
        delta,
        ci_lo: ci.lo,
        ci_hi: ci.hi,
        significant: ci.significant,
        n_items: records.len(),
        backend_calls_total: calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) const INSTANCE_LINE: &str = r#"{"question_id":"04242732","image":"3258.jpg","q":"Are there vans to the left of the person that wears a shirt?","a":"yes","full_answer":"Yes, there is a van to the left of the lady.","candidates":{"1":"<think>...</think>\n<visual_key>[...]</visual_key>\n<final_answer>yes</final_answer>","2":"<think>...</think>\n<visual_key>[...]</visual_key>\n<final_answer>yes</final_answer>","3":"<think>...</think>\n<visual_key>[...]</visual_key>\n<final_answer>yes</final_answer>","4":"<think>...</think>\n<visual_key>[...]</visual_key>\n<final_answer>yes</final_answer>"}}"#;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_instance_line() {
        let f = write_lines(&[INSTANCE_LINE]);
        let items = load_dataset(f.path()).unwrap();
        assert_eq!(items.len(), 1);
        let item = &items[0];
        assert_eq!(item.item_id, "04242732");
        assert_eq!(item.truth, "yes");
        assert_eq!(item.input.media_refs(), ["3258.jpg"]);
        assert_eq!(item.candidates.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn loads_generic_line_and_empty_file() {
        let f = write_lines(&[
            r#"{"item_id":"x1","media":["f0.jpg","f1.jpg"],"media_type":"video","question":"Which?","answer":"(B)","choices":["cat","dog"],"gt_keys":["Dog"," leash"]}"#,
        ]);
        let items = load_dataset(f.path()).unwrap();
        assert_eq!(items[0].input.media_type(), MediaType::Video);
        assert_eq!(items[0].gt_keys.as_ref().unwrap().iter().collect::<Vec<_>>(), ["dog", "leash"]);
        assert_eq!(items[0].distractors(), vec!["A"]);

        let empty = write_lines(&[]);
        assert!(load_dataset(empty.path()).unwrap().is_empty());
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let f = write_lines(&[
            INSTANCE_LINE,
            r#"{"question_id":"1","image":"a.jpg","q":"what?"}"#,
            r#"{"item_id":"2","media":"a.jpg","question":"q","answer":"zebra","choices":["cat","dog"]}"#,
            "not json",
        ]);
        match load_dataset(f.path()) {
            Err(EvalError::Schema(errors)) => {
                let lines: Vec<usize> = errors.iter().map(|e| e.line).collect();
                assert_eq!(lines, vec![2, 3, 4]);
                assert!(errors[0].detail.contains("`a`"), "{}", errors[0].detail);
            }
            other => panic!("{other:?}"),
        }
    }

    fn record(id: &str, correct: bool, calls: usize) -> RunRecord {
        RunRecord {
            item_id: id.into(),
            trace: TraceSummary {
                exit_reason: ExitReason::FinalAggregation,
                iterations: 3,
                backend_calls: calls,
                generations: calls,
                final_fallback: false,
                answers: vec![vec![Some("a".into()), None]],
                final_visual_keys: None,
            },
            predicted: if correct { "a".into() } else { "b".into() },
            correct,
            rewards: None,
        }
    }

    #[test]
    fn records_round_trip_and_append() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let first = vec![record("1", true, 25), record("2", false, 8)];
        persist_records(f.path(), &first, false).unwrap();
        persist_records(f.path(), &[record("3", true, 1)], true).unwrap();
        let loaded = load_records(f.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(&loaded[..2], &first[..]);
    }

    #[test]
    fn corrupt_record_line() {
        let f = tempfile::NamedTempFile::new().unwrap();
        persist_records(f.path(), &[record("1", true, 1)], false).unwrap();
        std::fs::OpenOptions::new()
            .append(true)
            .open(f.path())
            .unwrap()
            .write_all(b"{\"item_id\": 1}\n")
            .unwrap();
        assert!(matches!(
            load_records(f.path()),
            Err(EvalError::Schema(e)) if e[0].line == 2
        ));
    }

    #[test]
    fn summary_identical_runs() {
        let recs = vec![record("1", true, 2), record("2", false, 3), record("3", true, 4)];
        let s = summarize(&recs, Some(&recs), true, 1000, 0).unwrap();
        assert_eq!(s.delta, Some(0.0));
        assert_eq!((s.ci_lo, s.ci_hi, s.significant), (0.0, 0.0, false));
        assert_eq!(s.backend_calls_total, 9);
        assert_eq!(s.n_items, 3);

        let alone = summarize(&recs, None, true, 1000, 0).unwrap();
        assert!((alone.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!(alone.baseline_accuracy.is_none());

        let missing = summarize(&recs, Some(&recs[..2]), true, 1000, 0);
        assert!(matches!(missing, Err(EvalError::Pairing(_))));
    }
}
