//! Response taxonomy: valid, indeterminate, failure-exceed, failure-refusal.
//!
//! Parsing is total. Anomalies become categories or flags, never errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::inference::{DecodeMode, FinishReason, ModelSpec, RunRecord};
use crate::prompts::PromptVariant;

const DEFAULT_REFUSALS: &str = include_str!("../assets/refusal_patterns.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Valid,
    Indeterminate,
    FailureExceed,
    FailureRefusal,
}

impl Category {
    pub const ALL: [Category; 4] =
        [Category::Valid, Category::Indeterminate, Category::FailureExceed, Category::FailureRefusal];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Valid => "valid",
            Category::Indeterminate => "indeterminate",
            Category::FailureExceed => "failure_exceed",
            Category::FailureRefusal => "failure_refusal",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFlags {
    /// A think block was opened but never closed.
    pub unclosed_thinking: bool,
    /// No `Antisemitic:` directive was found.
    pub missing_directive: bool,
    /// The request itself failed; there is no model output.
    pub transport_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub category: Category,
    pub label: Option<Label>,
    pub raw_label_text: Option<String>,
    pub summary: Option<String>,
    pub body_without_thinking: String,
    pub flags: ParseFlags,
}

impl ParsedResponse {
    pub fn is_valid(&self) -> bool {
        self.category == Category::Valid
    }
}

/// Case-insensitive substrings that mark a refusal when no label is given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefusalPatterns(Vec<String>);

impl Default for RefusalPatterns {
    fn default() -> Self {
        RefusalPatterns::parse(DEFAULT_REFUSALS)
    }
}

impl RefusalPatterns {
    /// One pattern per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        RefusalPatterns(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(RefusalPatterns::parse(&std::fs::read_to_string(path)?))
    }

    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(patterns: I) -> Self {
        RefusalPatterns(patterns.into_iter().map(|p| p.as_ref().to_lowercase()).collect())
    }

    pub fn matches(&self, text: &str) -> bool {
        let lower = text.to_lowercase();
        self.0.iter().any(|p| lower.contains(p.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stripped {
    pub text: String,
    pub unclosed: bool,
}

/// Removes the first `open ... close` block. An open marker without a close
/// drops everything from the marker on and sets `unclosed`.
pub fn strip_thinking_with(response: &str, open: &str, close: &str) -> Stripped {
    let Some(start) = response.find(open) else {
        return Stripped { text: response.to_owned(), unclosed: false };
    };
    let after_open = start + open.len();
    match response[after_open..].find(close) {
        Some(rel) => {
            let end = after_open + rel + close.len();
            let mut text = response[..start].to_owned();
            text.push_str(&response[end..]);
            Stripped { text: text.trim().to_owned(), unclosed: false }
        }
        None => Stripped { text: response[..start].trim().to_owned(), unclosed: true },
    }
}

/// Strips `<think>`/`</think>` for reasoning models; identity otherwise.
pub fn strip_thinking(response: &str, is_reasoning: bool) -> Stripped {
    if is_reasoning {
        strip_thinking_with(response, "<think>", "</think>")
    } else {
        Stripped { text: response.to_owned(), unclosed: false }
    }
}

fn is_decoration(c: char) -> bool {
    matches!(c, '*' | '_' | '`' | '#' | '>' | '"' | '\'' | '“' | '”' | '‘' | '’')
}

/// Drops list bullets and markdown emphasis from the front of a line.
fn strip_line_prefix(line: &str) -> &str {
    let mut s = line.trim_start();
    loop {
        let before = s;
        s = s.trim_start_matches(|c: char| is_decoration(c) || c.is_whitespace());
        for bullet in ["- ", "+ ", "• ", "* "] {
            if let Some(rest) = s.strip_prefix(bullet) {
                s = rest;
            }
        }
        if let Some(rest) = strip_list_number(s) {
            s = rest;
        }
        if s == before {
            return s;
        }
    }
}

fn strip_list_number(s: &str) -> Option<&str> {
    let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    s[digits..].strip_prefix(". ").or_else(|| s[digits..].strip_prefix(") "))
}

/// If `line` is a `<key>:` directive, returns the value after the colon.
fn directive_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let s = strip_line_prefix(line);
    let head = s.get(..key.len())?;
    if !head.eq_ignore_ascii_case(key) {
        return None;
    }
    let rest = s[key.len()..].trim_start_matches(|c: char| is_decoration(c) || c == ' ');
    let rest = rest.strip_prefix(':')?;
    Some(rest.trim_start_matches(|c: char| is_decoration(c) || c.is_whitespace()).trim_end())
}

/// Scans from the end upward for the last `<key>:` line. An empty value
/// takes the next non-empty line.
fn find_directive(lines: &[&str], key: &str) -> Option<String> {
    let idx = lines.iter().rposition(|l| directive_value(l, key).is_some())?;
    let value = directive_value(lines[idx], key).unwrap_or_default();
    if !value.is_empty() {
        return Some(value.to_owned());
    }
    let next = lines[idx + 1..].iter().map(|l| l.trim()).find(|l| !l.is_empty()).unwrap_or("");
    Some(strip_line_prefix(next).trim_end().to_owned())
}

/// Yes/No after trimming punctuation and markdown; anything else is `None`.
pub fn normalize_label(raw: &str) -> Option<Label> {
    let token = raw.trim_matches(|c: char| !c.is_alphanumeric());
    match token.to_ascii_lowercase().as_str() {
        "yes" => Some(Label::Antisemitic),
        "no" => Some(Label::NonAntisemitic),
        _ => None,
    }
}

/// Classifies one response text. Precedence: truncation, then the last
/// `Antisemitic:` directive, then refusal patterns, else indeterminate.
pub fn parse_text(
    response: &str,
    finish_reason: FinishReason,
    model: &ModelSpec,
    refusals: &RefusalPatterns,
) -> ParsedResponse {
    let stripped = if model.is_reasoning {
        strip_thinking_with(response, &model.think_open, &model.think_close)
    } else {
        Stripped { text: response.to_owned(), unclosed: false }
    };
    let mut flags = ParseFlags { unclosed_thinking: stripped.unclosed, ..ParseFlags::default() };
    let body = stripped.text;
    let lines: Vec<&str> = body.lines().collect();
    let summary = find_directive(&lines, "summary").filter(|s| !s.is_empty());

    let mut parsed = ParsedResponse {
        category: Category::Indeterminate,
        label: None,
        raw_label_text: None,
        summary,
        body_without_thinking: body.clone(),
        flags,
    };

    if finish_reason == FinishReason::Length {
        parsed.category = Category::FailureExceed;
        return parsed;
    }
    if let Some(raw) = find_directive(&lines, "antisemitic") {
        parsed.label = normalize_label(&raw);
        parsed.category = if parsed.label.is_some() { Category::Valid } else { Category::Indeterminate };
        parsed.raw_label_text = Some(raw);
        return parsed;
    }
    flags.missing_directive = true;
    flags.transport_error = finish_reason == FinishReason::Error;
    parsed.flags = flags;
    if refusals.matches(&body) {
        parsed.category = Category::FailureRefusal;
    }
    parsed
}

pub fn parse(record: &RunRecord, model: &ModelSpec, refusals: &RefusalPatterns) -> ParsedResponse {
    parse_text(&record.response_text, record.finish_reason, model, refusals)
}

#[derive(Debug, Error)]
#[error("cannot compute a rate over zero responses")]
pub struct EmptyInput;

/// Fraction of responses that are not valid.
pub fn invalid_rate(parsed: &[ParsedResponse]) -> Result<f64, EmptyInput> {
    if parsed.is_empty() {
        return Err(EmptyInput);
    }
    let invalid = parsed.iter().filter(|p| !p.is_valid()).count();
    Ok(invalid as f64 / parsed.len() as f64)
}

/// Counts per category, in [`Category::ALL`] order.
pub fn category_counts(parsed: &[ParsedResponse]) -> [usize; 4] {
    let mut counts = [0; 4];
    for p in parsed {
        counts[Category::ALL.iter().position(|c| *c == p.category).unwrap()] += 1;
    }
    counts
}

/// Persisted form of a parsed response, one line-json row per run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRow {
    pub model: String,
    pub variant: PromptVariant,
    pub decode: DecodeMode,
    pub post_id: String,
    pub run_index: u32,
    pub category: Category,
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_label_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default)]
    pub flags: ParseFlags,
}

impl ParsedRow {
    pub fn new(record: &RunRecord, parsed: &ParsedResponse) -> Self {
        ParsedRow {
            model: record.model.clone(),
            variant: record.variant,
            decode: record.decode,
            post_id: record.post_id.clone(),
            run_index: record.run_index,
            category: parsed.category,
            label: parsed.label,
            raw_label_text: parsed.raw_label_text.clone(),
            summary: parsed.summary.clone(),
            flags: parsed.flags,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.category == Category::Valid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain() -> ModelSpec {
        ModelSpec::new("m", "x")
    }

    fn reasoning() -> ModelSpec {
        ModelSpec { is_reasoning: true, ..ModelSpec::new("r", "x") }
    }

    fn p(text: &str) -> ParsedResponse {
        parse_text(text, FinishReason::Stop, &plain(), &RefusalPatterns::default())
    }

    #[test]
    fn strip_examples() {
        assert_eq!(strip_thinking("<think>abc</think>Answer", true).text, "Answer");
        assert_eq!(strip_thinking("<think>abc</think>Answer", false).text, "<think>abc</think>Answer");
        let unclosed = strip_thinking("<think>abc", true);
        assert_eq!(unclosed, Stripped { text: String::new(), unclosed: true });
        let only_first = strip_thinking("<think>a</think>mid<think>b</think>end", true);
        assert_eq!(only_first.text, "mid<think>b</think>end");
        assert_eq!(strip_thinking_with("[r]x[/r] y", "[r]", "[/r]").text, "y");
    }

    #[test]
    fn valid_yes() {
        let r = p("The post uses a slur.\nSummary: slur detected\nAntisemitic: Yes");
        assert_eq!(r.category, Category::Valid);
        assert_eq!(r.label, Some(Label::Antisemitic));
        assert_eq!(r.summary.as_deref(), Some("slur detected"));
    }

    #[test]
    fn refusal() {
        let r = p("I cannot create content that could be used to promote or glorify antisemitism. Is there anything else I can help you with?");
        assert_eq!(r.category, Category::FailureRefusal);
        assert_eq!(r.label, None);
        assert!(r.flags.missing_directive);
        assert_eq!(p("I can’t help with that.").category, Category::FailureRefusal);
    }

    #[test]
    fn indeterminate_keeps_raw_text() {
        let r = p("Summary: unclear\nAntisemitic: Potentially");
        assert_eq!(r.category, Category::Indeterminate);
        assert_eq!(r.raw_label_text.as_deref(), Some("Potentially"));
        let r = p("Antisemitic: Cannot be determined without context");
        assert_eq!(r.category, Category::Indeterminate);
        assert_eq!(r.raw_label_text.as_deref(), Some("Cannot be determined without context"));
    }

    #[test]
    fn no_directive_no_refusal_is_flagged_indeterminate() {
        let r = p("The post is about cooking.");
        assert_eq!(r.category, Category::Indeterminate);
        assert!(r.raw_label_text.is_none());
        assert!(r.flags.missing_directive);
    }

    #[test]
    fn length_wins_over_label() {
        let r = parse_text("Antisemitic: Yes", FinishReason::Length, &plain(), &RefusalPatterns::default());
        assert_eq!(r.category, Category::FailureExceed);
        assert_eq!(r.label, None);
    }

    #[test]
    fn transport_errors_are_flagged() {
        let r = parse_text("", FinishReason::Error, &plain(), &RefusalPatterns::default());
        assert_eq!(r.category, Category::Indeterminate);
        assert!(r.flags.transport_error);
    }

    #[test]
    fn markdown_variants_normalize() {
        for text in [
            "**Antisemitic:** yes",
            "Antisemitic: YES.",
            "- Antisemitic: Yes",
            "**Antisemitic**: Yes",
            "* **Antisemitic:** *Yes*",
            "2. Antisemitic: \"Yes\"",
            "## Antisemitic: Yes",
            "antisemitic:yes",
        ] {
            let r = p(text);
            assert_eq!((r.category, r.label), (Category::Valid, Some(Label::Antisemitic)), "{text}");
        }
        assert_eq!(p("Antisemitic: No!").label, Some(Label::NonAntisemitic));
    }

    #[test]
    fn residual_tokens_are_not_coerced() {
        assert_eq!(p("Antisemitic: Yes, partially").category, Category::Indeterminate);
        assert_eq!(p("Antisemitic: Not really").category, Category::Indeterminate);
    }

    #[test]
    fn last_directive_wins_and_instructions_are_ignored() {
        let text = "- Second line must give \"Antisemitic:\" (Yes|No)\nAntisemitic: No\nreconsidering...\nAntisemitic: Yes";
        assert_eq!(p(text).label, Some(Label::Antisemitic));
        assert_eq!(p("Non-antisemitic: yes").category, Category::Indeterminate);
    }

    #[test]
    fn value_on_following_line() {
        let r = p("Summary: fine\nAntisemitic:\nNo");
        assert_eq!(r.label, Some(Label::NonAntisemitic));
    }

    #[test]
    fn thinking_is_stripped_for_reasoning_models() {
        let text = "<think>Antisemitic: No? maybe</think>\nSummary: s\nAntisemitic: Yes";
        let r = parse_text(text, FinishReason::Stop, &reasoning(), &RefusalPatterns::default());
        assert_eq!(r.label, Some(Label::Antisemitic));
        assert_eq!(r.body_without_thinking, "Summary: s\nAntisemitic: Yes");

        let unclosed = parse_text("<think>long musing", FinishReason::Stop, &reasoning(), &RefusalPatterns::default());
        assert!(unclosed.flags.unclosed_thinking);
        assert_eq!(unclosed.category, Category::Indeterminate);
    }

    #[test]
    fn invalid_rate_counts() {
        let valid = p("Antisemitic: No");
        let refusal = p("I won't do that");
        assert_eq!(invalid_rate(&[valid.clone(), valid.clone()]).unwrap(), 0.0);
        assert_eq!(invalid_rate(&[valid.clone(), valid, refusal.clone(), refusal]).unwrap(), 0.5);
        assert!(invalid_rate(&[]).is_err());
    }

    #[test]
    fn custom_refusal_patterns() {
        let pats = RefusalPatterns::parse("# comment\n\nI must decline\n");
        assert!(pats.matches("Sorry, I MUST DECLINE."));
        assert!(!pats.matches("I cannot"));
        assert_eq!(RefusalPatterns::new(["x"]), RefusalPatterns(vec!["x".into()]));
    }
}
