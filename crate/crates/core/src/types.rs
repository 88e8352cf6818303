//! Value types shared by the engine, the reward code and the evaluation kit.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::format::{self, FormatError, ParsedOutput};
use crate::normalize::normalize_answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MediaType {
    #[default]
    Image,
    Video,
}

impl MediaType {
    pub fn as_str(self) -> &'static str {
        match self {
            MediaType::Image => "image",
            MediaType::Video => "video",
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum InputError {
    #[error("multimodal input needs at least one media reference")]
    NoMedia,
    #[error("multimodal input needs a non-empty question")]
    EmptyQuestion,
}

/// Media plus question. Media references are opaque (paths or URLs); video
/// is given as an ordered list of frame references.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalInput {
    media_refs: Vec<String>,
    question: String,
    media_type: MediaType,
}

impl MultimodalInput {
    pub fn new(
        media_refs: Vec<String>,
        question: impl Into<String>,
        media_type: MediaType,
    ) -> Result<Self, InputError> {
        let question = question.into();
        if media_refs.is_empty() {
            return Err(InputError::NoMedia);
        }
        if question.trim().is_empty() {
            return Err(InputError::EmptyQuestion);
        }
        Ok(Self {
            media_refs,
            question,
            media_type,
        })
    }

    pub fn image(media_ref: impl Into<String>, question: impl Into<String>) -> Result<Self, InputError> {
        Self::new(vec![media_ref.into()], question, MediaType::Image)
    }

    pub fn media_refs(&self) -> &[String] {
        &self.media_refs
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn media_type(&self) -> MediaType {
        self.media_type
    }
}

/// One candidate reasoning trace.
///
/// `visual_keys` is `None` when the output had no keys section at all, which
/// is distinct from an empty list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub reasoning: String,
    /// Normalized answer.
    pub answer: String,
    pub visual_keys: Option<BTreeSet<String>>,
    pub raw: String,
    pub valid: bool,
}

impl Trajectory {
    /// Builds a trajectory from raw model text; keys are optional.
    pub fn from_raw(raw: &str) -> Result<Self, FormatError> {
        let parsed = format::parse_output(raw, false)?;
        Ok(Self::from_parsed(raw, parsed))
    }

    pub fn from_parsed(raw: &str, parsed: ParsedOutput) -> Self {
        let answer = normalize_answer(&parsed.answer);
        let valid = !parsed.think.trim().is_empty() && !answer.is_empty();
        Self {
            reasoning: parsed.think,
            answer,
            visual_keys: parsed.visual_keys.map(|k| k.into_iter().collect()),
            raw: raw.to_string(),
            valid,
        }
    }

    /// Placeholder for a generation that never produced parseable output.
    pub fn invalid(raw: impl Into<String>) -> Self {
        Self {
            reasoning: String::new(),
            answer: String::new(),
            visual_keys: None,
            raw: raw.into(),
            valid: false,
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.visual_keys.iter().flatten().map(String::as_str)
    }
}

/// The trajectories alive at one iteration. Invalid members stay in place.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Population {
    pub iteration: usize,
    pub members: Vec<Trajectory>,
}

impl Population {
    pub fn new(iteration: usize, members: Vec<Trajectory>) -> Self {
        debug_assert!(iteration >= 1);
        debug_assert!(!members.is_empty());
        Self { iteration, members }
    }

    /// Valid members with their slot index.
    pub fn valid(&self) -> impl Iterator<Item = (usize, &Trajectory)> {
        self.members.iter().enumerate().filter(|(_, t)| t.valid)
    }

    pub fn valid_count(&self) -> usize {
        self.members.iter().filter(|t| t.valid).count()
    }

    pub fn answers(&self) -> Vec<&str> {
        self.members
            .iter()
            .filter(|t| t.valid)
            .map(|t| t.answer.as_str())
            .collect()
    }
}
