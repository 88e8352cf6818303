//! Answer normalization used by exact match, consensus and scoring.

use std::sync::LazyLock;

use regex::Regex;

static ANSWER_PREFIX: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?:the\s+)?(?:final\s+)?answer\s*(?:is\s*:?|:)\s*").unwrap()
});

// "(B) a dog", "(b)"
static PAREN_OPTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\(([A-Za-z])\)").unwrap());

// "B.", "B) cat", "b. foo"
static DOTTED_OPTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([A-Za-z])[.)](?:\s|$)").unwrap());

const MAX_PASSES: usize = 8;

/// Normalizes a model or ground-truth answer for exact-match comparison.
///
/// Case-folds, trims, collapses inner whitespace and strips surrounding
/// punctuation. Multiple-choice forms (`(B)`, `B.`, `Answer: B`, a bare
/// letter) collapse to the uppercase option letter. The function is total
/// and idempotent.
pub fn normalize_answer(text: &str) -> String {
    let mut current = text.to_string();
    for _ in 0..MAX_PASSES {
        let next = normalize_pass(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

fn normalize_pass(text: &str) -> String {
    let mut s = text.trim();
    while let Some(m) = ANSWER_PREFIX.find(s) {
        if m.end() == 0 {
            break;
        }
        s = s[m.end()..].trim_start();
    }

    if let Some(c) = PAREN_OPTION.captures(s).or_else(|| DOTTED_OPTION.captures(s)) {
        return c[1].to_ascii_uppercase();
    }

    let folded = s.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    let stripped = collapsed.trim_matches(is_strippable).trim();

    let mut chars = stripped.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => c.to_ascii_uppercase().to_string(),
        _ => stripped.to_string(),
    }
}

fn is_strippable(c: char) -> bool {
    (c.is_ascii_punctuation() && c != '%' && c != '$')
        || matches!(c, '。' | '，' | '“' | '”' | '‘' | '’' | '…' | '！' | '？')
}
