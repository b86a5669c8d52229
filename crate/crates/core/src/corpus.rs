//! Labeled post corpus: ingest, validation, and order-preserving subsets.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Binary label for the positive ("antisemitic") class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Antisemitic,
    NonAntisemitic,
}

impl Label {
    pub fn is_positive(self) -> bool {
        matches!(self, Label::Antisemitic)
    }

    /// Maps a dataset label string onto the binary enum.
    ///
    /// Accepted (case-insensitive, surrounding whitespace ignored):
    /// `1`, `yes`, `antisemitic` for the positive class and
    /// `0`, `no`, `non-antisemitic` for the negative class.
    pub fn from_dataset_str(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "1" | "yes" | "antisemitic" => Some(Label::Antisemitic),
            "0" | "no" | "non-antisemitic" => Some(Label::NonAntisemitic),
            _ => None,
        }
    }

    pub fn as_dataset_str(self) -> &'static str {
        match self {
            Label::Antisemitic => "antisemitic",
            Label::NonAntisemitic => "non-antisemitic",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_dataset_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub text: String,
    pub gold_label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub positives: usize,
    pub negatives: usize,
    pub positive_rate: f64,
}

impl CorpusStats {
    pub fn of(posts: &[Post]) -> Self {
        let positives = posts.iter().filter(|p| p.gold_label.is_positive()).count();
        let total = posts.len();
        CorpusStats {
            total,
            positives,
            negatives: total - positives,
            positive_rate: if total == 0 { 0.0 } else { positives as f64 / total as f64 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    Delimited,
    LineJson,
}

impl CorpusFormat {
    /// Guesses the format from a file extension (`.jsonl`/`.ndjson` are line-json).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") | Some("json") => CorpusFormat::LineJson,
            _ => CorpusFormat::Delimited,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "delimited" | "csv" => Ok(CorpusFormat::Delimited),
            "line-json" | "jsonl" => Ok(CorpusFormat::LineJson),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no records")]
    Empty,
    #[error("record {index}: missing field `{field}`")]
    MissingField { index: usize, field: &'static str },
    #[error("record {index}: unknown label {label:?}")]
    UnknownLabel { index: usize, label: String },
    #[error("record {index}: text is empty")]
    EmptyText { index: usize },
    #[error("record {index}: duplicate post id {id:?}")]
    DuplicateId { index: usize, id: String },
    #[error("record {index}: malformed record: {message}")]
    Malformed { index: usize, message: String },
    #[error("ids not in corpus: {0:?}")]
    UnknownIds(Vec<String>),
}

/// Wire shape shared by both input formats. Every field is optional so that
/// a missing key is reported by name instead of as a generic parse error.
#[derive(Debug, Deserialize)]
struct RawRecord {
    id: Option<serde_json::Value>,
    text: Option<String>,
    label: Option<serde_json::Value>,
}

fn value_to_string(v: serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

fn validate(index: usize, raw: RawRecord, seen: &mut HashSet<String>) -> Result<Post, CorpusError> {
    let id = raw
        .id
        .map(value_to_string)
        .filter(|s| !s.trim().is_empty())
        .ok_or(CorpusError::MissingField { index, field: "id" })?;
    let text = raw.text.ok_or(CorpusError::MissingField { index, field: "text" })?;
    let label_raw = raw
        .label
        .map(value_to_string)
        .ok_or(CorpusError::MissingField { index, field: "label" })?;
    let gold_label = Label::from_dataset_str(&label_raw)
        .ok_or_else(|| CorpusError::UnknownLabel { index, label: label_raw.clone() })?;
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyText { index });
    }
    if !seen.insert(id.clone()) {
        return Err(CorpusError::DuplicateId { index, id });
    }
    Ok(Post { post_id: id, text, gold_label })
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Post>, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
    let file = File::open(path).map_err(io_err)?;
    match format {
        CorpusFormat::Delimited => read_delimited(file),
        CorpusFormat::LineJson => read_line_json(BufReader::new(file)),
    }
}

pub fn read_delimited<R: std::io::Read>(reader: R) -> Result<Vec<Post>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CorpusError::Malformed { index: 0, message: e.to_string() })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (id_col, text_col, label_col) = (column("id"), column("text"), column("label"));

    let mut seen = HashSet::new();
    let mut posts = Vec::new();
    for (index, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| CorpusError::Malformed { index, message: e.to_string() })?;
        let get = |col: Option<usize>| col.and_then(|c| row.get(c)).map(str::to_owned);
        let raw = RawRecord {
            id: get(id_col).map(serde_json::Value::String),
            text: get(text_col),
            label: get(label_col).map(serde_json::Value::String),
        };
        posts.push(validate(index, raw, &mut seen)?);
    }
    if posts.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(posts)
}

pub fn read_line_json<R: BufRead>(reader: R) -> Result<Vec<Post>, CorpusError> {
    let mut seen = HashSet::new();
    let mut posts = Vec::new();
    let mut index = 0;
    for line in reader.lines() {
        let line = line.map_err(|source| CorpusError::Io { path: "<stream>".into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { index, message: e.to_string() })?;
        posts.push(validate(index, raw, &mut seen)?);
        index += 1;
    }
    if posts.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(posts)
}

pub fn write_corpus(path: &Path, posts: &[Post], format: CorpusFormat) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
    let file = File::create(path).map_err(io_err)?;
    match format {
        CorpusFormat::Delimited => {
            let mut w = csv::Writer::from_writer(file);
            let to_io = |e: csv::Error| CorpusError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e),
            };
            w.write_record(["id", "text", "label"]).map_err(to_io)?;
            for p in posts {
                w.write_record([p.post_id.as_str(), p.text.as_str(), p.gold_label.as_dataset_str()])
                    .map_err(to_io)?;
            }
            w.flush().map_err(io_err)?;
        }
        CorpusFormat::LineJson => {
            let mut w = BufWriter::new(file);
            for p in posts {
                let line = serde_json::json!({
                    "id": p.post_id,
                    "text": p.text,
                    "label": p.gold_label.as_dataset_str(),
                });
                writeln!(w, "{line}").map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
    }
    Ok(())
}

/// Keeps the posts named in `keep_ids`, preserving corpus order.
pub fn subset<S: AsRef<str>>(corpus: &[Post], keep_ids: &[S]) -> Result<Vec<Post>, CorpusError> {
    let keep: HashSet<&str> = keep_ids.iter().map(AsRef::as_ref).collect();
    let known: HashSet<&str> = corpus.iter().map(|p| p.post_id.as_str()).collect();
    let missing: BTreeSet<String> =
        keep.iter().filter(|id| !known.contains(*id)).map(|id| id.to_string()).collect();
    if !missing.is_empty() {
        return Err(CorpusError::UnknownIds(missing.into_iter().collect()));
    }
    Ok(corpus.iter().filter(|p| keep.contains(p.post_id.as_str())).cloned().collect())
}
