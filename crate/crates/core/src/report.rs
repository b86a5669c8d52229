//! Table rows shared by pipeline stages, their line-json / delimited
//! writers, and the aligned-text report.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::DecodeMode;
use crate::metrics::{delta, ScoreTriple};
use crate::prompts::PromptVariant;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TableError + '_ {
    move |source| TableError::Io { path: path.to_owned(), source }
}

fn ensure_parent(path: &Path) -> Result<(), TableError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), TableError> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|source| TableError::Json { path: path.to_owned(), line: 0, source })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, TableError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| TableError::Json { path: path.to_owned(), line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), TableError> {
    ensure_parent(path)?;
    let csv_err = |source| TableError::Csv { path: path.to_owned(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `<stem>.jsonl` and `<stem>.csv` side by side.
pub fn write_table<T: Serialize>(stem: &Path, rows: &[T]) -> Result<Vec<PathBuf>, TableError> {
    let json = stem.with_extension("jsonl");
    let csv = stem.with_extension("csv");
    write_jsonl(&json, rows)?;
    write_csv(&csv, rows)?;
    Ok(vec![json, csv])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidRateRow {
    pub model: String,
    /// A variant id, or `all` for the per-model mixture.
    pub variant: String,
    pub decode: String,
    pub responses: usize,
    pub valid: usize,
    pub indeterminate: usize,
    pub failure_exceed: usize,
    pub failure_refusal: usize,
    pub invalid_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub variant: PromptVariant,
    pub decode: DecodeMode,
    /// `main` or `ablation`; each group has its own analysis subset.
    pub group: String,
    pub n_scored: usize,
    pub n_excluded: usize,
    /// Posts for which this cell produced no valid run at all.
    pub no_valid_posts: usize,
    pub ties: usize,
    pub runs_scored: u32,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub invalid_rate: f64,
}

impl MetricRow {
    pub fn triple(&self) -> ScoreTriple {
        ScoreTriple { precision: self.precision, recall: self.recall, f1: self.f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub decode: DecodeMode,
    pub variant: PromptVariant,
    pub excluded_thought: u8,
    pub base: PromptVariant,
    pub base_f1: f64,
    pub f1: f64,
    pub delta: f64,
    pub n_scored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionCell {
    pub model: String,
    pub decode: DecodeMode,
    pub base: PromptVariant,
    pub target: PromptVariant,
    pub base_f1: f64,
    pub target_f1: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingCell {
    pub model: String,
    pub decode: DecodeMode,
    pub variant: PromptVariant,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub cells: Vec<TransitionCell>,
    /// Score cells the table needed but the metrics did not contain.
    pub incomplete: Vec<MissingCell>,
}

/// Signed F1 change from `base` to each target, per model and decode mode,
/// both cells scored under the same decoding regime.
pub fn emit_transition_report(
    metrics: &[MetricRow],
    models: &[String],
    base: PromptVariant,
    targets: &[PromptVariant],
    decodes: &[DecodeMode],
) -> TransitionReport {
    let find = |model: &str, variant: PromptVariant, decode: DecodeMode| {
        metrics
            .iter()
            .find(|r| r.model == model && r.variant == variant && r.decode == decode && r.group == "main")
    };
    let mut report = TransitionReport::default();
    for model in models {
        for &decode in decodes {
            let base_row = find(model, base, decode);
            if base_row.is_none() {
                report.incomplete.push(MissingCell { model: model.clone(), decode, variant: base });
            }
            for &target in targets {
                match (base_row, find(model, target, decode)) {
                    (Some(b), Some(t)) => report.cells.push(TransitionCell {
                        model: model.clone(),
                        decode,
                        base,
                        target,
                        base_f1: b.f1,
                        target_f1: t.f1,
                        delta: delta(&b.triple(), &t.triple()),
                    }),
                    (_, None) if target != base => {
                        report.incomplete.push(MissingCell { model: model.clone(), decode, variant: target })
                    }
                    _ => {}
                }
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    pub variant: PromptVariant,
    pub method: String,
    pub rows: usize,
    pub width: usize,
    pub target_dim: usize,
    pub explained_variance_ratio: Option<f64>,
    pub trust_k: Option<usize>,
    pub trust_rows: Option<usize>,
    pub trustworthiness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdvRow {
    pub variant: PromptVariant,
    pub model: String,
    pub other: String,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmdRow {
    pub variant: PromptVariant,
    pub rank: usize,
    pub model: String,
    pub scmd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub variant: PromptVariant,
    pub model: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraRow {
    pub variant: PromptVariant,
    pub model: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub pos_pos: Option<f64>,
    pub neg_neg: Option<f64>,
    pub pos_neg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub variant: PromptVariant,
    pub model: String,
    pub k: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub two_sided_d: f64,
    pub two_sided_p: f64,
    pub two_sided_stars: String,
    pub greater_d: f64,
    pub greater_p: f64,
    pub greater_stars: String,
    pub less_d: f64,
    pub less_p: f64,
    pub less_stars: String,
    pub verdict: String,
}

/// Something a stage skipped, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteRow {
    pub stage: String,
    pub subject: String,
    pub message: String,
}

impl NoteRow {
    pub fn new(stage: &str, subject: impl Into<String>, message: impl Into<String>) -> Self {
        NoteRow { stage: stage.into(), subject: subject.into(), message: message.into() }
    }
}

/// Column-aligned plain-text table. Cells that parse as numbers are
/// right-aligned.
#[derive(Debug, Clone, Default)]
pub struct TextTable {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        TextTable { headers: headers.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(Into::into).collect());
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let cols = self.headers.len();
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (c, cell) in row.iter().enumerate().take(cols) {
                widths[c] = widths[c].max(cell.chars().count());
            }
        }
        let numeric = |s: &str| {
            let t = s.trim_end_matches('*');
            !t.is_empty() && t.trim_start_matches(['+', '-']).parse::<f64>().is_ok()
        };
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String], header: bool| {
            let mut parts = Vec::with_capacity(cols);
            for (c, w) in widths.iter().enumerate() {
                let cell = cells.get(c).map(String::as_str).unwrap_or("");
                let pad = w - cell.chars().count();
                if !header && numeric(cell) {
                    parts.push(format!("{}{cell}", " ".repeat(pad)));
                } else {
                    parts.push(format!("{cell}{}", " ".repeat(pad)));
                }
            }
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&mut out, &self.headers, true);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&rule.join("  "));
        out.push('\n');
        for row in &self.rows {
            line(&mut out, row, false);
        }
        out
    }
}

pub fn fmt_f(x: f64) -> String {
    format!("{x:.4}")
}

pub fn fmt_signed(x: f64) -> String {
    // Avoid printing -0.0000 for tiny negative noise.
    let r = (x * 1e4).round() / 1e4;
    if r == 0.0 {
        "+0.0000".into()
    } else {
        format!("{r:+.4}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_else(|| "-".into())
}

/// Everything the aligned-text report draws on, as read from stage artifacts.
#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub experiment_id: String,
    pub posts: usize,
    pub positives: usize,
    pub invalid_rates: Vec<InvalidRateRow>,
    pub metrics: Vec<MetricRow>,
    pub ablation: Vec<AblationRow>,
    pub transitions: TransitionReport,
    pub reductions: Vec<ReductionRow>,
    pub scmd: Vec<ScmdRow>,
    pub sdv: Vec<SdvRow>,
    pub pca: Vec<PcaRow>,
    pub intra: Vec<IntraRow>,
    pub significance: Vec<SignificanceRow>,
    pub notes: Vec<NoteRow>,
}

fn section(out: &mut String, title: &str, table: &TextTable, empty: &str) {
    let _ = writeln!(out, "{title}\n{}\n", "=".repeat(title.chars().count()));
    if table.is_empty() {
        let _ = writeln!(out, "({empty})\n");
    } else {
        out.push_str(&table.render());
        out.push('\n');
    }
}

pub fn render_report(r: &ReportInputs) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Experiment {}", r.experiment_id);
    let _ = writeln!(out, "Corpus: {} posts, {} labelled antisemitic\n", r.posts, r.positives);

    let mut t = TextTable::new(["model", "variant", "decode", "responses", "valid", "indet.", "exceed", "refusal", "invalid"]);
    for row in &r.invalid_rates {
        t.push([
            row.model.clone(),
            row.variant.clone(),
            row.decode.clone(),
            row.responses.to_string(),
            row.valid.to_string(),
            row.indeterminate.to_string(),
            row.failure_exceed.to_string(),
            row.failure_refusal.to_string(),
            format!("{:.2}%", 100.0 * row.invalid_rate),
        ]);
    }
    section(&mut out, "Invalid responses", &t, "no parsed responses");

    let mut t = TextTable::new(["decode", "group", "model", "variant", "n", "excl.", "ties", "P", "R", "F1", "flags"]);
    for row in &r.metrics {
        let mut flags = Vec::new();
        if row.precision_undefined {
            flags.push("P-undef");
        }
        if row.recall_undefined {
            flags.push("R-undef");
        }
        t.push([
            row.decode.to_string(),
            row.group.clone(),
            row.model.clone(),
            row.variant.to_string(),
            row.n_scored.to_string(),
            row.n_excluded.to_string(),
            row.ties.to_string(),
            fmt_f(row.precision),
            fmt_f(row.recall),
            fmt_f(row.f1),
            flags.join(","),
        ]);
    }
    section(&mut out, "Positive-class precision / recall / F1", &t, "no scored cells");

    let mut t = TextTable::new(["model", "decode", "excluded thought", "variant", "base F1", "F1", "delta"]);
    for row in &r.ablation {
        t.push([
            row.model.clone(),
            row.decode.to_string(),
            format!("A{}", row.excluded_thought),
            row.variant.to_string(),
            fmt_f(row.base_f1),
            fmt_f(row.f1),
            fmt_signed(row.delta),
        ]);
    }
    section(&mut out, "Ablation deltas (F1 without one thought minus full guided prompt)", &t, "no ablation cells");

    let mut t = TextTable::new(["model", "decode", "base", "target", "base F1", "target F1", "delta"]);
    for c in &r.transitions.cells {
        t.push([
            c.model.clone(),
            c.decode.to_string(),
            c.base.to_string(),
            c.target.to_string(),
            fmt_f(c.base_f1),
            fmt_f(c.target_f1),
            fmt_signed(c.delta),
        ]);
    }
    section(&mut out, "Prompt transitions", &t, "no complete transition cells");
    let mut t = TextTable::new(["model", "decode", "missing variant"]);
    for m in &r.transitions.incomplete {
        t.push([m.model.clone(), m.decode.to_string(), m.variant.to_string()]);
    }
    section(&mut out, "Transition cells without scores", &t, "none");

    let mut t = TextTable::new(["variant", "method", "rows", "width", "dim", "expl. var.", "trust k", "trust rows", "trust"]);
    for row in &r.reductions {
        t.push([
            row.variant.to_string(),
            row.method.clone(),
            row.rows.to_string(),
            row.width.to_string(),
            row.target_dim.to_string(),
            fmt_opt(row.explained_variance_ratio),
            row.trust_k.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            row.trust_rows.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            fmt_opt(row.trustworthiness),
        ]);
    }
    section(&mut out, "Dimensionality reduction", &t, "no reductions");

    let mut t = TextTable::new(["variant", "rank", "model", "SCMD"]);
    for row in &r.scmd {
        t.push([row.variant.to_string(), row.rank.to_string(), row.model.clone(), fmt_f(row.scmd)]);
    }
    section(&mut out, "Cross-model divergence ranking (mean of median distances)", &t, "fewer than two models");

    let mut t = TextTable::new(["variant", "model", "other", "median"]);
    for row in &r.sdv {
        t.push([row.variant.to_string(), row.model.clone(), row.other.clone(), fmt_f(row.median)]);
    }
    section(&mut out, "Semantic distance vectors", &t, "fewer than two models");

    let mut t = TextTable::new(["variant", "model", "x", "y"]);
    for row in &r.pca {
        t.push([row.variant.to_string(), row.model.clone(), fmt_f(row.x), fmt_f(row.y)]);
    }
    section(&mut out, "Model coordinates (PCA of distance vectors)", &t, "fewer than three models");

    let mut t = TextTable::new(["variant", "model", "n+", "n-", "G++", "G--", "G+-"]);
    for row in &r.intra {
        t.push([
            row.variant.to_string(),
            row.model.clone(),
            row.n_pos.to_string(),
            row.n_neg.to_string(),
            fmt_opt(row.pos_pos),
            fmt_opt(row.neg_neg),
            fmt_opt(row.pos_neg),
        ]);
    }
    section(&mut out, "Intra-model group distances", &t, "no intra-model summaries");

    let mut t = TextTable::new(["variant", "model", "k", "n+", "n-", "two-sided", "greater", "less", "verdict"]);
    for row in &r.significance {
        t.push([
            row.variant.to_string(),
            row.model.clone(),
            row.k.to_string(),
            row.n_pos.to_string(),
            row.n_neg.to_string(),
            format!("{:.4}{}", row.two_sided_d, row.two_sided_stars),
            format!("{:.4}{}", row.greater_d, row.greater_stars),
            format!("{:.4}{}", row.less_d, row.less_stars),
            row.verdict.clone(),
        ]);
    }
    section(&mut out, "Cohesion KS tests (* p<0.05, ** p<0.01, *** p<0.001)", &t, "no testable groups");

    let mut t = TextTable::new(["stage", "subject", "note"]);
    for n in &r.notes {
        t.push([n.stage.clone(), n.subject.clone(), n.message.clone()]);
    }
    section(&mut out, "Skipped analyses", &t, "none");
    out
}

/// Binary greyscale image of a square distance matrix; 0 renders black.
pub fn write_pgm(path: &Path, size: usize, distances: &[f64]) -> Result<(), TableError> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write!(w, "P5\n{size} {size}\n255\n").map_err(io_err(path))?;
    let pixels: Vec<u8> = distances.iter().map(|d| (d.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&pixels).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}
