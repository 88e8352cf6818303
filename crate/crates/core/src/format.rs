//! The structured aggregation format:
//!
//! ```text
//! <think> r </think>
//! <visual_keys> ["obj", ...] </visual_keys>
//! <answer> a </answer>
//! ```
//!
//! Tag names are lowercase and exact. `<visual_key>` is accepted as an alias
//! of `<visual_keys>` and `<final_answer>` as an alias of `<answer>`; both
//! canonicalize to the plural/short spelling. Text outside the tags is
//! ignored. Sections are located in document order: think, then the optional
//! keys section, then answer.

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub const THINK: &str = "think";
pub const VISUAL_KEYS: &str = "visual_keys";
pub const ANSWER: &str = "answer";

const THINK_NAMES: &[&str] = &["think"];
const KEYS_NAMES: &[&str] = &["visual_keys", "visual_key"];
const ANSWER_NAMES: &[&str] = &["answer", "final_answer"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("missing <{0}> section")]
    MissingTag(&'static str),
    #[error("<{0}> is opened but never properly closed")]
    UnclosedTag(&'static str),
    #[error("malformed visual key list: {0}")]
    MalformedKeyList(String),
    #[error("field `{0}` must be non-empty")]
    EmptyField(&'static str),
    #[error("field `{0}` contains a reserved tag")]
    EmbeddedTag(&'static str),
}

impl FormatError {
    /// Canonical name of the offending section.
    pub fn tag(&self) -> &'static str {
        match self {
            FormatError::MissingTag(t)
            | FormatError::UnclosedTag(t)
            | FormatError::EmptyField(t)
            | FormatError::EmbeddedTag(t) => t,
            FormatError::MalformedKeyList(_) => VISUAL_KEYS,
        }
    }
}

/// Byte ranges of each tag body in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    pub think: Range<usize>,
    pub visual_keys: Option<Range<usize>>,
    pub answer: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    /// Trimmed reasoning body.
    pub think: String,
    /// Case-folded, deduplicated keys in first-seen order; `None` when the
    /// section is absent.
    pub visual_keys: Option<Vec<String>>,
    /// Trimmed answer body (not normalized).
    pub answer: String,
    pub spans: Spans,
}

struct Section {
    body: Range<usize>,
    end: usize,
}

fn find_open(text: &str, from: usize, names: &[&str]) -> Option<(usize, usize)> {
    names
        .iter()
        .filter_map(|name| {
            let tag = format!("<{name}>");
            text[from..].find(&tag).map(|i| (from + i, from + i + tag.len()))
        })
        .min()
}

fn find_section(
    text: &str,
    from: usize,
    names: &[&str],
    canonical: &'static str,
) -> Result<Option<Section>, FormatError> {
    let Some((_, body_start)) = find_open(text, from, names) else {
        return Ok(None);
    };
    let close = names
        .iter()
        .filter_map(|name| {
            let tag = format!("</{name}>");
            text[body_start..]
                .find(&tag)
                .map(|i| (body_start + i, body_start + i + tag.len()))
        })
        .min();
    let Some((close_start, close_end)) = close else {
        return Err(FormatError::UnclosedTag(canonical));
    };
    if let Some((nested, _)) = find_open(text, body_start, names) {
        if nested < close_start {
            return Err(FormatError::UnclosedTag(canonical));
        }
    }
    Ok(Some(Section {
        body: body_start..close_start,
        end: close_end,
    }))
}

/// Parses raw model text into its think / keys / answer sections.
///
/// With `require_keys = false` a missing keys section is tolerated. The first
/// occurrence of each tag wins; a tag re-opened before it closes is an
/// [`FormatError::UnclosedTag`].
pub fn parse_output(text: &str, require_keys: bool) -> Result<ParsedOutput, FormatError> {
    let think = find_section(text, 0, THINK_NAMES, THINK)?.ok_or(FormatError::MissingTag(THINK))?;
    let keys = find_section(text, think.end, KEYS_NAMES, VISUAL_KEYS)?;
    if require_keys && keys.is_none() {
        return Err(FormatError::MissingTag(VISUAL_KEYS));
    }
    let answer_from = keys.as_ref().map_or(think.end, |k| k.end);
    let answer = find_section(text, answer_from, ANSWER_NAMES, ANSWER)?
        .ok_or(FormatError::MissingTag(ANSWER))?;

    let visual_keys = keys
        .as_ref()
        .map(|k| parse_key_list(&text[k.body.clone()]))
        .transpose()?;

    Ok(ParsedOutput {
        think: text[think.body.clone()].trim().to_string(),
        visual_keys,
        answer: text[answer.body.clone()].trim().to_string(),
        spans: Spans {
            think: think.body,
            visual_keys: keys.map(|k| k.body),
            answer: answer.body,
        },
    })
}

/// Parses the body of a keys section.
///
/// Accepts a JSON list, a Python-style list with single or double quotes, a
/// bracketed list of bare words, or a bare comma-separated fallback.
pub fn parse_key_list(body: &str) -> Result<Vec<String>, FormatError> {
    let body = body.trim();
    let raw_items: Vec<String> = if body.is_empty() {
        Vec::new()
    } else if let Some(inner) = body.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| FormatError::MalformedKeyList("list is missing its closing `]`".into()))?;
        match serde_json::from_str::<Vec<String>>(body) {
            Ok(items) => items,
            Err(_) => scan_items(inner)?,
        }
    } else if body.ends_with(']') {
        return Err(FormatError::MalformedKeyList("list is missing its opening `[`".into()));
    } else {
        body.split([',', '\n'])
            .map(|s| s.trim().trim_matches(['"', '\'']).to_string())
            .collect()
    };

    let mut out: Vec<String> = Vec::new();
    for item in raw_items {
        let key = item.trim().to_lowercase();
        if !key.is_empty() && !out.contains(&key) {
            out.push(key);
        }
    }
    Ok(out)
}

fn scan_items(inner: &str) -> Result<Vec<String>, FormatError> {
    let mut items = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(&c) = chars.peek() else { break };
        if c == '"' || c == '\'' {
            chars.next();
            let mut item = String::new();
            let mut closed = false;
            while let Some(ch) = chars.next() {
                match ch {
                    '\\' => {
                        if let Some(escaped) = chars.next() {
                            item.push(escaped);
                        }
                    }
                    q if q == c => {
                        closed = true;
                        break;
                    }
                    other => item.push(other),
                }
            }
            if !closed {
                return Err(FormatError::MalformedKeyList("unterminated quoted key".into()));
            }
            items.push(item);
            while chars.peek().is_some_and(|c| c.is_whitespace()) {
                chars.next();
            }
            match chars.next() {
                None | Some(',') => {}
                Some(other) => {
                    return Err(FormatError::MalformedKeyList(format!(
                        "unexpected `{other}` after quoted key"
                    )))
                }
            }
        } else {
            let mut item = String::new();
            for ch in chars.by_ref() {
                if ch == ',' {
                    break;
                }
                item.push(ch);
            }
            items.push(item);
        }
    }
    Ok(items)
}

/// Renders keys as a JSON list, e.g. `["van", "lady"]`.
pub fn render_key_list<'a>(keys: impl IntoIterator<Item = &'a str>) -> String {
    let quoted: Vec<String> = keys
        .into_iter()
        .map(|k| serde_json::to_string(k).expect("string serializes"))
        .collect();
    format!("[{}]", quoted.join(", "))
}

fn reserved_in(body: &str, names: &[&str]) -> bool {
    names
        .iter()
        .any(|n| body.contains(&format!("<{n}>")) || body.contains(&format!("</{n}>")))
}

/// Emits the three sections in canonical order.
pub fn emit_output<'a>(
    think: &str,
    keys: impl IntoIterator<Item = &'a str>,
    answer: &str,
) -> Result<String, FormatError> {
    if think.trim().is_empty() {
        return Err(FormatError::EmptyField(THINK));
    }
    if answer.trim().is_empty() {
        return Err(FormatError::EmptyField(ANSWER));
    }
    if reserved_in(think, THINK_NAMES) {
        return Err(FormatError::EmbeddedTag(THINK));
    }
    if reserved_in(answer, ANSWER_NAMES) {
        return Err(FormatError::EmbeddedTag(ANSWER));
    }
    let list = render_key_list(keys);
    if reserved_in(&list, KEYS_NAMES) {
        return Err(FormatError::EmbeddedTag(VISUAL_KEYS));
    }
    Ok(format!(
        "<think>\n{think}\n</think>\n<visual_keys>\n{list}\n</visual_keys>\n<answer>\n{answer}\n</answer>"
    ))
}
