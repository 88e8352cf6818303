//! Prompt templates for initialization, grounded aggregation and final
//! aggregation.
//!
//! Placeholders are `{media_type}`, `{question}`, `{visual_keys}` and one
//! `### Candidate #k ###: {candidatek}` line per slot. The run of candidate
//! lines is treated as a block and re-rendered for however many candidates
//! are supplied. Substitution is a single pass, so placeholder-like text
//! inside a question or candidate is left alone.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use trajagg_core::format::render_key_list;
use trajagg_core::MultimodalInput;

pub const INIT_TEMPLATE: &str = include_str!("../templates/init.txt");
pub const AGGREGATE_TEMPLATE: &str = include_str!("../templates/aggregate.txt");
pub const FINAL_TEMPLATE: &str = include_str!("../templates/final.txt");

const CANDIDATES: &str = "__candidates__";

static CANDIDATE_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^### Candidate #\d+ ###: \{candidate\d+\}\s*$").expect("valid regex"));
static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"));

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{0}` has no `{{{1}}}` placeholder")]
    Missing(&'static str, &'static str),
    #[error("template `{0}` has no candidate lines")]
    NoCandidates(&'static str),
    #[error("cannot read template {0}: {1}")]
    Io(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Template {
    /// Candidate block collapsed to a single `{__candidates__}` placeholder.
    body: String,
}

impl Template {
    fn parse(name: &'static str, text: &str, with_candidates: bool) -> Result<Self, TemplateError> {
        if !text.contains("{question}") {
            return Err(TemplateError::Missing(name, "question"));
        }
        if !with_candidates {
            return Ok(Self { body: text.to_string() });
        }
        if !text.contains("{visual_keys}") {
            return Err(TemplateError::Missing(name, "visual_keys"));
        }
        let lines: Vec<&str> = text.split('\n').collect();
        let hits: Vec<usize> = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| CANDIDATE_LINE.is_match(l))
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (hits.first(), hits.last()) else {
            return Err(TemplateError::NoCandidates(name));
        };
        let mut out: Vec<String> = lines[..first].iter().map(|s| s.to_string()).collect();
        out.push(format!("{{{CANDIDATES}}}"));
        out.extend(lines[last + 1..].iter().map(|s| s.to_string()));
        Ok(Self { body: out.join("\n") })
    }

    fn render(&self, values: &BTreeMap<&str, String>) -> String {
        PLACEHOLDER
            .replace_all(&self.body, |caps: &regex::Captures| {
                values
                    .get(&caps[1])
                    .cloned()
                    .unwrap_or_else(|| caps[0].to_string())
            })
            .into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    init: Template,
    aggregate: Template,
    final_round: Template,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::from_texts(INIT_TEMPLATE, AGGREGATE_TEMPLATE, FINAL_TEMPLATE).expect("bundled templates are valid")
    }
}

impl PromptTemplates {
    pub fn from_texts(init: &str, aggregate: &str, final_round: &str) -> Result<Self, TemplateError> {
        Ok(Self {
            init: Template::parse("init", init, false)?,
            aggregate: Template::parse("aggregate", aggregate, true)?,
            final_round: Template::parse("final", final_round, true)?,
        })
    }

    /// Reads `init.txt`, `aggregate.txt` and `final.txt` from `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let read = |name: &str| {
            let path = dir.as_ref().join(name);
            std::fs::read_to_string(&path).map_err(|e| TemplateError::Io(path.display().to_string(), e.to_string()))
        };
        Self::from_texts(&read("init.txt")?, &read("aggregate.txt")?, &read("final.txt")?)
    }

    pub fn init(&self, input: &MultimodalInput) -> String {
        self.init.render(&base_values(input))
    }

    pub fn aggregate<'a>(
        &self,
        input: &MultimodalInput,
        candidates: &[&str],
        keys: impl IntoIterator<Item = &'a str>,
    ) -> String {
        render_with_candidates(&self.aggregate, input, candidates, keys)
    }

    pub fn final_round<'a>(
        &self,
        input: &MultimodalInput,
        candidates: &[&str],
        keys: impl IntoIterator<Item = &'a str>,
    ) -> String {
        render_with_candidates(&self.final_round, input, candidates, keys)
    }
}

fn base_values(input: &MultimodalInput) -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("media_type", input.media_type().as_str().to_string()),
        ("question", input.question().to_string()),
    ])
}

/// Keys as the inside of a list: sorted, deduplicated, JSON-quoted.
pub fn key_list_body<'a>(keys: impl IntoIterator<Item = &'a str>) -> String {
    let mut keys: Vec<&str> = keys.into_iter().collect();
    keys.sort_unstable();
    keys.dedup();
    let list = render_key_list(keys);
    list[1..list.len() - 1].to_string()
}

fn render_with_candidates<'a>(
    template: &Template,
    input: &MultimodalInput,
    candidates: &[&str],
    keys: impl IntoIterator<Item = &'a str>,
) -> String {
    let blocks: Vec<String> = candidates
        .iter()
        .enumerate()
        .map(|(k, c)| format!("### Candidate #{} ###: {}", k + 1, c.trim()))
        .collect();
    let mut values = base_values(input);
    values.insert("visual_keys", key_list_body(keys));
    values.insert(CANDIDATES, blocks.join("\n\n"));
    template.render(&values)
}
