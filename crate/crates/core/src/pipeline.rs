//! Stage orchestration. Every stage reads only artifacts persisted under the
//! experiment directory and writes its own, so any stage can be rerun alone.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::config::{ExperimentConfig, ExperimentConfigError, ProviderKind};
use crate::corpus::{self, CorpusError, CorpusFormat, CorpusStats, Label, Post};
use crate::divergence::{
    cohesion_scores, crossing_verdict, intra_model_matrix, intra_model_summary, ks_all, pca_cluster_models,
    reduce_pca, scmd, sdv, trustworthiness, DivergenceError, Embedder, EmbeddingCache, EmbeddingMatrix,
    EmbeddingProvider, HashingProvider, HttpEmbeddingProvider, RowKey,
};
use crate::inference::{
    run_batch, BatchOptions, BatchSummary, ChatEndpoint, DecodeConfig, DecodeMode, EndpointError, HttpEndpoint,
    MockEndpoint, ModelSpec, RunRecord, RunStore, StoreError,
};
use crate::metrics::{average_over_runs, score_positive_class, vote_labels, MetricsError, ScoreTriple};
use crate::parsing::{self, category_counts, strip_thinking_with, ParsedRow, RefusalPatterns};
use crate::prompts::{PolicyText, PromptError, PromptVariant};
use crate::report::{
    emit_transition_report, read_jsonl, render_report, write_csv, write_jsonl, write_pgm, write_table, AblationRow,
    IntraRow, InvalidRateRow, MetricRow, NoteRow, PcaRow, ReductionRow, ReportInputs, ScmdRow, SdvRow,
    SignificanceRow, TableError, TransitionReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Run,
    Parse,
    Evaluate,
    Ablate,
    Embed,
    Diverge,
    Significance,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Run,
        Stage::Parse,
        Stage::Evaluate,
        Stage::Ablate,
        Stage::Embed,
        Stage::Diverge,
        Stage::Significance,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Run => "run",
            Stage::Parse => "parse",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
            Stage::Embed => "embed",
            Stage::Diverge => "diverge",
            Stage::Significance => "significance",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing artifact {}: run the `{stage}` stage first", path.display())]
    MissingArtifact { path: PathBuf, stage: Stage },
    #[error(transparent)]
    Config(#[from] ExperimentConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Stop the `run` stage after this many new requests (simulates an interruption).
    pub run_limit: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

/// Overrides for a single `run` invocation outside the full roster sweep.
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub model: String,
    pub variant: PromptVariant,
    pub decode: DecodeMode,
    pub num_runs: Option<u32>,
    pub max_tokens: Option<u32>,
    pub parallel: Option<usize>,
    pub store: Option<PathBuf>,
    pub limit: Option<usize>,
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// Stable sub-seed for one randomised step.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

/// Paths of every artifact inside one experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: PathBuf) -> Self {
        Layout { root }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }

    pub fn corpus_stats(&self) -> PathBuf {
        self.root.join("corpus_stats.json")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs.jsonl")
    }

    pub fn parsed(&self) -> PathBuf {
        self.root.join("parsed.jsonl")
    }

    pub fn invalid_rates(&self) -> PathBuf {
        self.root.join("tables/invalid_rates")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("tables/metrics")
    }

    pub fn transitions(&self) -> PathBuf {
        self.root.join("tables/transitions")
    }

    pub fn transitions_incomplete(&self) -> PathBuf {
        self.root.join("tables/transitions_incomplete")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("tables/ablation")
    }

    pub fn embedding(&self, variant: PromptVariant) -> PathBuf {
        self.root.join("embeddings").join(format!("{}.bin", slug(&variant.to_string())))
    }

    pub fn embed_cache(&self) -> PathBuf {
        self.root.join("embeddings/cache.jsonl")
    }

    pub fn embed_manifest(&self) -> PathBuf {
        self.root.join("embeddings/manifest.jsonl")
    }

    pub fn reduced(&self, variant: PromptVariant) -> PathBuf {
        self.root.join("reduced").join(format!("{}.bin", slug(&variant.to_string())))
    }

    pub fn reductions(&self) -> PathBuf {
        self.root.join("tables/reductions")
    }

    pub fn sdv(&self) -> PathBuf {
        self.root.join("tables/sdv")
    }

    pub fn scmd(&self) -> PathBuf {
        self.root.join("tables/scmd")
    }

    pub fn pca_models(&self) -> PathBuf {
        self.root.join("tables/pca_models")
    }

    pub fn intra(&self) -> PathBuf {
        self.root.join("tables/intra")
    }

    pub fn heatmap(&self, model: &str, variant: PromptVariant, ext: &str) -> PathBuf {
        self.root.join("heatmaps").join(format!("{}__{}.{ext}", slug(model), slug(&variant.to_string())))
    }

    pub fn significance(&self) -> PathBuf {
        self.root.join("tables/significance")
    }

    pub fn notes(&self, stage: Stage) -> PathBuf {
        self.root.join("notes").join(format!("{stage}.jsonl"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}

fn jsonl(stem: &Path) -> PathBuf {
    stem.with_extension("jsonl")
}

fn require(path: &Path, stage: Stage) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact { path: path.to_owned(), stage })
    }
}

/// One row of the embedding manifest: which responses were embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedManifestRow {
    pub variant: PromptVariant,
    pub decode: DecodeMode,
    pub rows: usize,
    pub posts: usize,
    pub missing: usize,
}

/// Labels of one (model, variant, decode) cell: post id -> label per run.
type Cell = HashMap<String, Vec<Option<Label>>>;
type CellKey = (String, PromptVariant, DecodeMode);

fn usable(runs: Option<&Vec<Option<Label>>>, mode: DecodeMode) -> bool {
    let Some(runs) = runs else { return false };
    match mode {
        DecodeMode::Greedy => runs.first().copied().flatten().is_some(),
        DecodeMode::Sample => !runs.is_empty() && runs.iter().all(Option::is_some),
        DecodeMode::SelfConsistency => vote_labels(runs.iter().copied()).label.is_some(),
    }
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    layout: Layout,
    options: PipelineOptions,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let layout = Layout::new(cfg.experiment_dir());
        Pipeline { cfg, layout, options: PipelineOptions::default() }
    }

    pub fn with_options(mut self, options: PipelineOptions) -> Self {
        self.options = options;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome, PipelineError> {
        info!(stage = %stage, dir = %self.layout.root().display(), "running stage");
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Run => self.run(),
            Stage::Parse => self.parse(),
            Stage::Evaluate => self.evaluate(),
            Stage::Ablate => self.ablate(),
            Stage::Embed => self.embed(),
            Stage::Diverge => self.diverge(),
            Stage::Significance => self.significance(),
            Stage::Report => self.report(),
        }
    }

    pub fn run_all(&self) -> Result<Vec<StageOutcome>, PipelineError> {
        Stage::ALL.iter().map(|s| self.run_stage(*s)).collect()
    }

    fn outcome(&self, stage: Stage, artifacts: Vec<PathBuf>, summary: String) -> StageOutcome {
        StageOutcome { stage, artifacts, summary }
    }

    fn write_notes(&self, stage: Stage, notes: &[NoteRow]) -> Result<PathBuf, PipelineError> {
        let path = self.layout.notes(stage);
        write_jsonl(&path, notes)?;
        Ok(path)
    }

    fn policy(&self) -> Result<PolicyText, PipelineError> {
        match (&self.cfg.policy.definition, &self.cfg.policy.full_policy) {
            (None, None) => Ok(PolicyText::default()),
            (Some(d), Some(f)) => Ok(PolicyText::from_files(&self.cfg.resolve(d), &self.cfg.resolve(f))?),
            _ => Err(PipelineError::Invalid("policy needs both `definition` and `full_policy` files".into())),
        }
    }

    fn refusals(&self) -> Result<RefusalPatterns, PipelineError> {
        match &self.cfg.refusal_patterns {
            None => Ok(RefusalPatterns::default()),
            Some(p) => {
                let path = self.cfg.resolve(p);
                RefusalPatterns::from_file(&path).map_err(|source| PipelineError::Io { path, source })
            }
        }
    }

    fn load_corpus(&self) -> Result<Vec<Post>, PipelineError> {
        let path = self.layout.corpus();
        require(&path, Stage::Ingest)?;
        Ok(corpus::load_corpus(&path, CorpusFormat::LineJson)?)
    }

    fn load_parsed(&self) -> Result<Vec<ParsedRow>, PipelineError> {
        let path = self.layout.parsed();
        require(&path, Stage::Parse)?;
        Ok(read_jsonl(&path)?)
    }

    fn endpoint_for(&self, model: &ModelSpec) -> Result<Box<dyn ChatEndpoint>, PipelineError> {
        if let Some(script) = model.endpoint_url.strip_prefix("mock:") {
            Ok(Box::new(MockEndpoint::from_file(&self.cfg.resolve(Path::new(script)))?))
        } else {
            let timeout = Duration::from_secs(self.cfg.run.timeout_secs);
            Ok(Box::new(HttpEndpoint::for_model(model, timeout)?))
        }
    }

    // ---- ingest -------------------------------------------------------

    pub fn ingest(&self) -> Result<StageOutcome, PipelineError> {
        let posts = corpus::load_corpus(&self.cfg.corpus_path(), self.cfg.corpus_format())?;
        let root = self.layout.root();
        std::fs::create_dir_all(root).map_err(|source| PipelineError::Io { path: root.to_owned(), source })?;
        corpus::write_corpus(&self.layout.corpus(), &posts, CorpusFormat::LineJson)?;
        let stats = CorpusStats::of(&posts);
        let write = |path: PathBuf, body: String| {
            std::fs::write(&path, body).map_err(|source| PipelineError::Io { path: path.clone(), source })
        };
        write(self.layout.corpus_stats(), serde_json::to_string_pretty(&stats).expect("stats serialise"))?;
        write(self.layout.config_snapshot(), serde_json::to_string_pretty(&self.cfg).expect("config serialises"))?;
        Ok(self.outcome(
            Stage::Ingest,
            vec![self.layout.corpus(), self.layout.corpus_stats(), self.layout.config_snapshot()],
            format!("{} posts ingested", posts.len()),
        ))
    }

    // ---- run ----------------------------------------------------------

    pub fn run(&self) -> Result<StageOutcome, PipelineError> {
        let posts = self.load_corpus()?;
        let policy = self.policy()?;
        let mut store = RunStore::open(&self.layout.runs())?;
        let mut remaining = self.options.run_limit;
        let mut total = BatchSummary::default();
        'cells: for model in &self.cfg.models {
            let endpoint = self.endpoint_for(model)?;
            for &variant in &self.cfg.variants {
                for decode in self.cfg.decode_configs() {
                    if remaining == Some(0) {
                        break 'cells;
                    }
                    let options = BatchOptions {
                        parallel: self.cfg.run.parallel,
                        retry: self.cfg.run.retry_policy(),
                        limit: remaining,
                    };
                    let s = run_batch(&posts, model, variant, &decode, &policy, endpoint.as_ref(), &mut store, &options)?;
                    info!(model = %model.name, %variant, decode = %decode.mode, issued = s.issued, skipped = s.skipped, "cell done");
                    if let Some(r) = remaining.as_mut() {
                        *r -= s.issued.min(*r);
                    }
                    total.issued += s.issued;
                    total.skipped += s.skipped;
                    total.errors += s.errors;
                    total.truncated += s.truncated;
                }
            }
        }
        let mut summary = format!(
            "{} requests issued, {} already stored, {} errors, {} truncated",
            total.issued, total.skipped, total.errors, total.truncated
        );
        if remaining == Some(0) {
            summary.push_str(" (stopped at request limit)");
        }
        Ok(self.outcome(Stage::Run, vec![self.layout.runs()], summary))
    }

    /// A single (model, variant, decode) cell with command-line overrides.
    pub fn run_cell(&self, req: &RunRequest) -> Result<StageOutcome, PipelineError> {
        let posts = self.load_corpus()?;
        let mut model = self
            .cfg
            .model(&req.model)
            .cloned()
            .ok_or_else(|| PipelineError::Invalid(format!("model {:?} is not in the roster", req.model)))?;
        if let Some(t) = req.max_tokens {
            model.max_output_tokens = t;
        }
        let mut decode = self.cfg.decode_config(req.decode).unwrap_or_else(|| DecodeConfig::for_mode(req.decode).with_seed(self.cfg.seed));
        if let Some(n) = req.num_runs {
            decode = decode.with_runs(n);
        }
        decode.validate().map_err(|e| PipelineError::Invalid(e.to_string()))?;
        let store_path = req.store.clone().unwrap_or_else(|| self.layout.runs());
        let mut store = RunStore::open(&store_path)?;
        let endpoint = self.endpoint_for(&model)?;
        let options = BatchOptions {
            parallel: req.parallel.unwrap_or(self.cfg.run.parallel),
            retry: self.cfg.run.retry_policy(),
            limit: req.limit,
        };
        let s = run_batch(&posts, &model, req.variant, &decode, &self.policy()?, endpoint.as_ref(), &mut store, &options)?;
        Ok(self.outcome(
            Stage::Run,
            vec![store_path],
            format!("{} requests issued, {} already stored, {} errors, {} truncated", s.issued, s.skipped, s.errors, s.truncated),
        ))
    }

    // ---- parse --------------------------------------------------------

    pub fn parse(&self) -> Result<StageOutcome, PipelineError> {
        let posts = self.load_corpus()?;
        require(&self.layout.runs(), Stage::Run)?;
        let records = RunStore::load(&self.layout.runs())?;
        let refusals = self.refusals()?;

        let model_ix: HashMap<&str, usize> = self.cfg.models.iter().enumerate().map(|(i, m)| (m.name.as_str(), i)).collect();
        let variant_ix: HashMap<PromptVariant, usize> = self.cfg.variants.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let decode_ix: HashMap<DecodeMode, usize> = self.cfg.decodes.iter().enumerate().map(|(i, d)| (d.mode, i)).collect();
        let post_ix: HashMap<&str, usize> = posts.iter().enumerate().map(|(i, p)| (p.post_id.as_str(), i)).collect();

        // (model, variant, decode, post, run) positions in config and corpus order
        type SortKey = (usize, usize, usize, usize, u32);
        let mut keyed: Vec<(SortKey, &RunRecord)> = Vec::with_capacity(records.len());
        let mut foreign = 0usize;
        for r in &records {
            match (
                model_ix.get(r.model.as_str()),
                variant_ix.get(&r.variant),
                decode_ix.get(&r.decode),
                post_ix.get(r.post_id.as_str()),
            ) {
                (Some(&m), Some(&v), Some(&d), Some(&p)) => keyed.push(((m, v, d, p, r.run_index), r)),
                _ => foreign += 1,
            }
        }
        if foreign > 0 {
            warn!(foreign, "ignoring run records outside the configured experiment");
        }
        keyed.sort_by_key(|(k, _)| *k);

        let mut rows = Vec::with_capacity(keyed.len());
        let mut counts: HashMap<CellKey, [usize; 4]> = HashMap::new();
        for (_, r) in &keyed {
            let spec = &self.cfg.models[model_ix[r.model.as_str()]];
            let p = parsing::parse(r, spec, &refusals);
            let c = category_counts(std::slice::from_ref(&p));
            let slot = counts.entry((r.model.clone(), r.variant, r.decode)).or_default();
            for (s, n) in slot.iter_mut().zip(c) {
                *s += n;
            }
            rows.push(ParsedRow::new(r, &p));
        }
        write_jsonl(&self.layout.parsed(), &rows)?;

        let rate_row = |model: &str, variant: String, decode: String, counts: [usize; 4]| {
            let n: usize = counts.iter().sum();
            InvalidRateRow {
                model: model.to_owned(),
                variant,
                decode,
                responses: n,
                valid: counts[0],
                indeterminate: counts[1],
                failure_exceed: counts[2],
                failure_refusal: counts[3],
                invalid_rate: if n == 0 { 0.0 } else { (n - counts[0]) as f64 / n as f64 },
            }
        };
        let mut rates = Vec::new();
        for m in &self.cfg.models {
            let mut overall = [0usize; 4];
            for &v in &self.cfg.variants {
                for d in &self.cfg.decodes {
                    let cell = counts.get(&(m.name.clone(), v, d.mode)).copied().unwrap_or_default();
                    for (o, c) in overall.iter_mut().zip(cell) {
                        *o += c;
                    }
                    rates.push(rate_row(&m.name, v.to_string(), d.mode.to_string(), cell));
                }
            }
            rates.push(rate_row(&m.name, "all".into(), "all".into(), overall));
        }
        let mut artifacts = vec![self.layout.parsed()];
        artifacts.extend(write_table(&self.layout.invalid_rates(), &rates)?);
        Ok(self.outcome(Stage::Parse, artifacts, format!("{} responses parsed", rows.len())))
    }

    // ---- evaluate -----------------------------------------------------

    fn cells(&self, parsed: &[ParsedRow]) -> HashMap<CellKey, Cell> {
        let runs: HashMap<DecodeMode, u32> = self.cfg.decode_configs().iter().map(|d| (d.mode, d.num_runs)).collect();
        let mut cells: HashMap<CellKey, Cell> = HashMap::new();
        for row in parsed {
            let Some(&n) = runs.get(&row.decode) else { continue };
            if row.run_index >= n {
                continue;
            }
            let cell = cells.entry((row.model.clone(), row.variant, row.decode)).or_default();
            let labels = cell.entry(row.post_id.clone()).or_insert_with(|| vec![None; n as usize]);
            labels[row.run_index as usize] = if row.is_valid() { row.label } else { None };
        }
        cells
    }

    /// Posts usable in every (model, variant) cell of `variants` under `mode`.
    fn analysis_subset<'p>(
        &self,
        posts: &'p [Post],
        cells: &HashMap<CellKey, Cell>,
        variants: &[PromptVariant],
        mode: DecodeMode,
    ) -> Vec<&'p Post> {
        posts
            .iter()
            .filter(|p| {
                self.cfg.models.iter().all(|m| {
                    variants.iter().all(|v| {
                        cells
                            .get(&(m.name.clone(), *v, mode))
                            .is_some_and(|c| usable(c.get(&p.post_id), mode))
                    })
                })
            })
            .collect()
    }

    fn score_cell(
        &self,
        cell: &Cell,
        key: &CellKey,
        group: &str,
        posts: &[Post],
        subset: &[&Post],
        num_runs: u32,
    ) -> Result<MetricRow, PipelineError> {
        let (model, variant, mode) = key;
        let gold: HashMap<String, Label> = subset.iter().map(|p| (p.post_id.clone(), p.gold_label)).collect();
        let mut ties = 0;
        let mut reports = Vec::new();
        match mode {
            DecodeMode::Greedy => {
                let preds = subset.iter().map(|p| (p.post_id.clone(), cell[&p.post_id][0].expect("subset is valid"))).collect();
                reports.push(score_positive_class(&preds, &gold)?);
            }
            DecodeMode::Sample => {
                #[allow(clippy::needless_range_loop)]
                for r in 0..num_runs as usize {
                    let preds =
                        subset.iter().map(|p| (p.post_id.clone(), cell[&p.post_id][r].expect("subset is valid"))).collect();
                    reports.push(score_positive_class(&preds, &gold)?);
                }
            }
            DecodeMode::SelfConsistency => {
                let mut preds = HashMap::new();
                for p in subset {
                    let vote = vote_labels(cell[&p.post_id].iter().copied());
                    ties += usize::from(vote.tie);
                    preds.insert(p.post_id.clone(), vote.label.expect("subset has a vote"));
                }
                reports.push(score_positive_class(&preds, &gold)?);
            }
        }
        let triples: Vec<ScoreTriple> = reports.iter().map(|r| r.scores).collect();
        let avg = average_over_runs(&triples)?;
        let expected = posts.len() * num_runs as usize;
        let valid: usize = cell.values().map(|runs| runs.iter().filter(|l| l.is_some()).count()).sum();
        let no_valid_posts = posts
            .iter()
            .filter(|p| cell.get(&p.post_id).is_none_or(|runs| runs.iter().all(Option::is_none)))
            .count();
        Ok(MetricRow {
            model: model.clone(),
            variant: *variant,
            decode: *mode,
            group: group.into(),
            n_scored: subset.len(),
            n_excluded: posts.len() - subset.len(),
            no_valid_posts,
            ties,
            runs_scored: reports.len() as u32,
            precision: avg.precision,
            recall: avg.recall,
            f1: avg.f1,
            precision_undefined: reports.iter().any(|r| r.precision_undefined),
            recall_undefined: reports.iter().any(|r| r.recall_undefined),
            invalid_rate: if expected == 0 { 0.0 } else { (expected - valid.min(expected)) as f64 / expected as f64 },
        })
    }

    pub fn evaluate(&self) -> Result<StageOutcome, PipelineError> {
        let posts = self.load_corpus()?;
        let parsed = self.load_parsed()?;
        let cells = self.cells(&parsed);
        let main = self.cfg.main_variants();
        let base = self.cfg.analysis.ablation_base;
        let ablations = self.cfg.ablation_variants();
        let mut ablation_group = Vec::new();
        if !ablations.is_empty() && self.cfg.variants.contains(&base) {
            ablation_group.push(base);
            ablation_group.extend(&ablations);
        }

        let mut rows = Vec::new();
        let mut notes = Vec::new();
        for decode in self.cfg.decode_configs() {
            for (group, variants) in [("main", &main), ("ablation", &ablation_group)] {
                if variants.is_empty() {
                    continue;
                }
                let subset = self.analysis_subset(&posts, &cells, variants, decode.mode);
                if subset.is_empty() {
                    notes.push(NoteRow::new(
                        "evaluate",
                        format!("{group}/{}", decode.mode),
                        "no post is valid in every compared cell; scores are degenerate",
                    ));
                }
                for m in &self.cfg.models {
                    for &v in variants.iter() {
                        let key = (m.name.clone(), v, decode.mode);
                        match cells.get(&key) {
                            Some(cell) => rows.push(self.score_cell(cell, &key, group, &posts, &subset, decode.num_runs)?),
                            None => notes.push(NoteRow::new(
                                "evaluate",
                                format!("{}/{v}/{}", m.name, decode.mode),
                                "no responses for this cell",
                            )),
                        }
                    }
                }
            }
        }
        let decodes: Vec<DecodeMode> = self.cfg.decodes.iter().map(|d| d.mode).collect();
        let transitions = emit_transition_report(
            &rows,
            &self.cfg.roster(),
            self.cfg.analysis.transition_base,
            &self.cfg.transition_targets(),
            &decodes,
        );
        let mut artifacts = write_table(&self.layout.metrics(), &rows)?;
        artifacts.extend(write_table(&self.layout.transitions(), &transitions.cells)?);
        artifacts.extend(write_table(&self.layout.transitions_incomplete(), &transitions.incomplete)?);
        artifacts.push(self.write_notes(Stage::Evaluate, &notes)?);
        Ok(self.outcome(
            Stage::Evaluate,
            artifacts,
            format!("{} metric rows, {} transition cells ({} missing)", rows.len(), transitions.cells.len(), transitions.incomplete.len()),
        ))
    }

    // ---- ablate -------------------------------------------------------

    pub fn ablate(&self) -> Result<StageOutcome, PipelineError> {
        let path = jsonl(&self.layout.metrics());
        require(&path, Stage::Evaluate)?;
        let metrics: Vec<MetricRow> = read_jsonl(&path)?;
        let base = self.cfg.analysis.ablation_base;
        let find = |model: &str, v: PromptVariant, d: DecodeMode| {
            metrics.iter().find(|r| r.group == "ablation" && r.model == model && r.variant == v && r.decode == d)
        };
        let mut rows = Vec::new();
        let mut notes = Vec::new();
        for m in &self.cfg.models {
            for d in &self.cfg.decodes {
                let Some(b) = find(&m.name, base, d.mode) else {
                    if !self.cfg.ablation_variants().is_empty() {
                        notes.push(NoteRow::new("ablate", format!("{}/{}", m.name, d.mode), format!("no {base} score to compare against")));
                    }
                    continue;
                };
                for v in self.cfg.ablation_variants() {
                    if let Some(r) = find(&m.name, v, d.mode) {
                        rows.push(AblationRow {
                            model: m.name.clone(),
                            decode: d.mode,
                            variant: v,
                            excluded_thought: v.excluded_thought().expect("ablation variant"),
                            base,
                            base_f1: b.f1,
                            f1: r.f1,
                            delta: crate::metrics::delta(&b.triple(), &r.triple()),
                            n_scored: r.n_scored,
                        });
                    }
                }
            }
        }
        let mut artifacts = write_table(&self.layout.ablation(), &rows)?;
        artifacts.push(self.write_notes(Stage::Ablate, &notes)?);
        Ok(self.outcome(Stage::Ablate, artifacts, format!("{} ablation deltas", rows.len())))
    }

    // ---- embed --------------------------------------------------------

    fn provider(&self) -> Result<Box<dyn EmbeddingProvider>, PipelineError> {
        let e = &self.cfg.embedding;
        Ok(match e.provider {
            ProviderKind::Hashing => Box::new(HashingProvider::new(e.dimension)),
            ProviderKind::Http => {
                let key = match &e.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| EndpointError::MissingCredential(var.clone()))?),
                    None => None,
                };
                Box::new(HttpEmbeddingProvider::new(
                    e.url.as_deref().expect("validated"),
                    e.model.as_deref().unwrap_or("default"),
                    e.dimension,
                    key,
                    Duration::from_secs(self.cfg.run.timeout_secs),
                ))
            }
        })
    }

    /// Predicted label of the embedded response for each (model, post).
    fn embed_labels(&self, parsed: &[ParsedRow], variant: PromptVariant) -> HashMap<(String, String), Label> {
        let decode = self.cfg.analysis.embed_decode;
        parsed
            .iter()
            .filter(|r| r.variant == variant && r.decode == decode && r.run_index == 0 && r.is_valid())
            .filter_map(|r| r.label.map(|l| ((r.model.clone(), r.post_id.clone()), l)))
            .collect()
    }

    pub fn embed(&self) -> Result<StageOutcome, PipelineError> {
        let posts = self.load_corpus()?;
        let parsed = self.load_parsed()?;
        require(&self.layout.runs(), Stage::Run)?;
        let decode = self.cfg.analysis.embed_decode;
        if self.cfg.decode_config(decode).is_none() {
            return Err(PipelineError::Invalid(format!("embed_decode {decode} is not among the configured decodes")));
        }
        let records = RunStore::load(&self.layout.runs())?;
        let texts: HashMap<(String, PromptVariant, String), &RunRecord> = records
            .iter()
            .filter(|r| r.decode == decode && r.run_index == 0)
            .map(|r| ((r.model.clone(), r.variant, r.post_id.clone()), r))
            .collect();

        let provider = self.provider()?;
        let cache = EmbeddingCache::open(&self.layout.embed_cache())?;
        let mut embedder = Embedder::new(provider.as_ref(), cache)
            .with_retry(self.cfg.run.retry_policy())
            .with_batch_size(self.cfg.embedding.batch_size);

        let mut manifest = Vec::new();
        let mut notes = Vec::new();
        let mut artifacts = Vec::new();
        for variant in self.cfg.embed_variants() {
            let labels = self.embed_labels(&parsed, variant);
            let shared: Vec<&Post> = posts
                .iter()
                .filter(|p| self.cfg.models.iter().all(|m| labels.contains_key(&(m.name.clone(), p.post_id.clone()))))
                .collect();
            let mut keys = Vec::new();
            let mut inputs = Vec::new();
            for m in &self.cfg.models {
                for p in &shared {
                    let r = texts[&(m.name.clone(), variant, p.post_id.clone())];
                    let body = if m.is_reasoning {
                        strip_thinking_with(&r.response_text, &m.think_open, &m.think_close).text
                    } else {
                        r.response_text.clone()
                    };
                    keys.push(RowKey::new(p.post_id.clone(), m.name.clone(), variant));
                    inputs.push(body);
                }
            }
            let outcome = embedder.embed(keys, &inputs)?;
            for k in &outcome.missing {
                notes.push(NoteRow::new("embed", format!("{}/{}/{}", k.model, k.variant, k.post_id), "embedding failed after retries"));
            }
            let matrix = outcome.matrix.retain_complete_posts();
            let path = self.layout.embedding(variant);
            matrix.write(&path)?;
            manifest.push(EmbedManifestRow {
                variant,
                decode,
                rows: matrix.len(),
                posts: shared.len(),
                missing: outcome.missing.len(),
            });
            artifacts.push(path);
        }
        write_jsonl(&self.layout.embed_manifest(), &manifest)?;
        artifacts.push(self.layout.embed_manifest());
        artifacts.push(self.write_notes(Stage::Embed, &notes)?);
        Ok(self.outcome(
            Stage::Embed,
            artifacts,
            format!("{} variants embedded, {} provider calls", manifest.len(), embedder.provider_calls()),
        ))
    }

    // ---- diverge ------------------------------------------------------

    fn row_subset(m: &EmbeddingMatrix, keep: &BTreeSet<usize>) -> EmbeddingMatrix {
        let mut i = 0;
        m.select(|_| {
            let k = keep.contains(&i);
            i += 1;
            k
        })
    }

    fn reduce(&self, variant: PromptVariant, m: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, ReductionRow), DivergenceError> {
        let target_dim = self.cfg.analysis.target_dim;
        if let Some(ext) = self.cfg.analysis.external_reductions.iter().find(|e| e.variant == variant) {
            let reduced = EmbeddingMatrix::read(&self.cfg.resolve(&ext.path))?;
            if reduced.index() != m.index() {
                return Err(DivergenceError::Format(format!(
                    "external reduction {} does not share the embedding row index",
                    ext.path.display()
                )));
            }
            let row = ReductionRow {
                variant,
                method: "external".into(),
                rows: reduced.len(),
                width: m.width(),
                target_dim: reduced.width(),
                explained_variance_ratio: None,
                trust_k: None,
                trust_rows: None,
                trustworthiness: None,
            };
            return Ok((reduced, row));
        }
        let (reduced, fit) = reduce_pca(m, target_dim)?;
        let row = ReductionRow {
            variant,
            method: "pca".into(),
            rows: m.len(),
            width: m.width(),
            target_dim,
            explained_variance_ratio: Some(fit.explained_variance_ratio.iter().sum()),
            trust_k: None,
            trust_rows: None,
            trustworthiness: None,
        };
        Ok((reduced, row))
    }

    pub fn diverge(&self) -> Result<StageOutcome, PipelineError> {
        let parsed = self.load_parsed()?;
        require(&self.layout.embed_manifest(), Stage::Embed)?;
        let a = &self.cfg.analysis;
        let mut reductions = Vec::new();
        let mut sdv_rows = Vec::new();
        let mut scmd_rows = Vec::new();
        let mut pca_rows = Vec::new();
        let mut intra_rows = Vec::new();
        let mut notes = Vec::new();
        let mut artifacts = Vec::new();

        for variant in self.cfg.embed_variants() {
            let path = self.layout.embedding(variant);
            require(&path, Stage::Embed)?;
            let m = EmbeddingMatrix::read(&path)?;
            let subject = variant.to_string();
            let (reduced, mut red_row) = match self.reduce(variant, &m) {
                Ok(r) => r,
                Err(e) => {
                    notes.push(NoteRow::new("diverge", &subject, format!("reduction skipped: {e}")));
                    continue;
                }
            };
            if a.trust_sample > 0 && red_row.method == "pca" {
                let n = m.len().min(a.trust_sample);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &["trust", &subject]));
                let keep: BTreeSet<usize> = sample(&mut rng, m.len(), n).into_iter().collect();
                match trustworthiness(&Self::row_subset(&m, &keep), &Self::row_subset(&reduced, &keep), a.trust_k) {
                    Ok(t) => {
                        red_row.trust_k = Some(a.trust_k);
                        red_row.trust_rows = Some(n);
                        red_row.trustworthiness = Some(t);
                    }
                    Err(e) => notes.push(NoteRow::new("diverge", &subject, format!("trustworthiness skipped: {e}"))),
                }
            }
            let rpath = self.layout.reduced(variant);
            reduced.write(&rpath)?;
            artifacts.push(rpath);
            reductions.push(red_row);

            let present: BTreeSet<String> = reduced.models().into_iter().collect();
            let roster: Vec<String> = self.cfg.roster().into_iter().filter(|r| present.contains(r)).collect();
            if roster.len() >= 2 {
                let mut vectors = Vec::new();
                let mut scores = Vec::new();
                for model in &roster {
                    let v = sdv(model, &roster, &reduced)?;
                    for (other, median) in &v.entries {
                        sdv_rows.push(SdvRow { variant, model: model.clone(), other: other.clone(), median: *median });
                    }
                    scores.push((model.clone(), scmd(&v)?));
                    vectors.push(v);
                }
                // Stable sort keeps roster order among equal values.
                scores.sort_by(|x, y| x.1.total_cmp(&y.1));
                for (rank, (model, value)) in scores.into_iter().enumerate() {
                    scmd_rows.push(ScmdRow { variant, rank: rank + 1, model, scmd: value });
                }
                if roster.len() >= 3 {
                    for p in pca_cluster_models(&vectors)? {
                        pca_rows.push(PcaRow { variant, model: p.model, x: p.x, y: p.y });
                    }
                } else {
                    notes.push(NoteRow::new("diverge", &subject, "model clustering needs at least three models"));
                }
            } else {
                notes.push(NoteRow::new("diverge", &subject, "cross-model distances need at least two models"));
            }

            let labels = self.embed_labels(&parsed, variant);
            for model in &roster {
                let preds: HashMap<String, Label> = labels
                    .iter()
                    .filter(|((m, _), _)| m == model)
                    .map(|((_, p), l)| (p.clone(), *l))
                    .collect();
                let s = intra_model_summary(model, &reduced, &preds)?;
                intra_rows.push(IntraRow {
                    variant,
                    model: model.clone(),
                    n_pos: s.n_pos,
                    n_neg: s.n_neg,
                    pos_pos: s.pos_pos,
                    neg_neg: s.neg_neg,
                    pos_neg: s.pos_neg,
                });
                let own = reduced.select(|k| &k.model == model);
                let heat_src = if own.len() > a.heatmap_max_rows {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &["heatmap", model, &subject]));
                    let keep: BTreeSet<usize> = sample(&mut rng, own.len(), a.heatmap_max_rows).into_iter().collect();
                    Self::row_subset(&own, &keep)
                } else {
                    own
                };
                let mat = intra_model_matrix(model, &heat_src, &preds)?;
                let csv_path = self.layout.heatmap(model, variant, "csv");
                let rows: Vec<Vec<String>> = (0..mat.size())
                    .map(|i| {
                        let mut r = vec![mat.order[i].clone(), mat.labels[i].as_dataset_str().to_owned()];
                        r.extend((0..mat.size()).map(|j| mat.get(i, j).to_string()));
                        r
                    })
                    .collect();
                write_csv(&csv_path, &rows)?;
                artifacts.push(csv_path);
                if a.heatmap_image {
                    let img = self.layout.heatmap(model, variant, "pgm");
                    write_pgm(&img, mat.size(), &mat.distances)?;
                    artifacts.push(img);
                }
            }
        }
        artifacts.extend(write_table(&self.layout.reductions(), &reductions)?);
        artifacts.extend(write_table(&self.layout.sdv(), &sdv_rows)?);
        artifacts.extend(write_table(&self.layout.scmd(), &scmd_rows)?);
        artifacts.extend(write_table(&self.layout.pca_models(), &pca_rows)?);
        artifacts.extend(write_table(&self.layout.intra(), &intra_rows)?);
        artifacts.push(self.write_notes(Stage::Diverge, &notes)?);
        Ok(self.outcome(Stage::Diverge, artifacts, format!("{} variants reduced", reductions.len())))
    }

    // ---- significance -------------------------------------------------

    pub fn significance(&self) -> Result<StageOutcome, PipelineError> {
        let parsed = self.load_parsed()?;
        let red_path = jsonl(&self.layout.reductions());
        require(&red_path, Stage::Diverge)?;
        let reductions: Vec<ReductionRow> = read_jsonl(&red_path)?;
        let a = &self.cfg.analysis;
        let mut rows = Vec::new();
        let mut notes = Vec::new();
        for red in &reductions {
            let variant = red.variant;
            let path = self.layout.reduced(variant);
            require(&path, Stage::Diverge)?;
            let reduced = EmbeddingMatrix::read(&path)?;
            let labels = self.embed_labels(&parsed, variant);
            for model in self.cfg.roster() {
                let mut pos: Vec<&[f64]> = Vec::new();
                let mut neg: Vec<&[f64]> = Vec::new();
                for (key, row) in reduced.rows().filter(|(k, _)| k.model == model) {
                    match labels.get(&(model.clone(), key.post_id.clone())) {
                        Some(Label::Antisemitic) => pos.push(row),
                        Some(Label::NonAntisemitic) => neg.push(row),
                        None => return Err(DivergenceError::MissingPrediction(key.post_id.clone()).into()),
                    }
                }
                if pos.is_empty() && neg.is_empty() {
                    continue;
                }
                let subject = format!("{model}/{variant}");
                let seed = |group: &str| derive_seed(self.cfg.seed, &["cohesion", &model, &variant.to_string(), group]);
                let scores = cohesion_scores(&pos, a.k, seed("pos"), a.cohesion_mode)
                    .and_then(|p| cohesion_scores(&neg, a.k, seed("neg"), a.cohesion_mode).map(|n| (p, n)));
                let (d_pos, d_neg) = match scores {
                    Ok(s) => s,
                    Err(e) => {
                        notes.push(NoteRow::new("significance", subject, format!("{e} (positives {}, negatives {})", pos.len(), neg.len())));
                        continue;
                    }
                };
                let t = ks_all(&d_pos, &d_neg)?;
                let verdict = crossing_verdict(&t.two_sided, &t.greater, &t.less, a.alpha);
                rows.push(SignificanceRow {
                    variant,
                    model: model.clone(),
                    k: a.k,
                    n_pos: pos.len(),
                    n_neg: neg.len(),
                    two_sided_d: t.two_sided.statistic,
                    two_sided_p: t.two_sided.p_value,
                    two_sided_stars: t.two_sided.stars().into(),
                    greater_d: t.greater.statistic,
                    greater_p: t.greater.p_value,
                    greater_stars: t.greater.stars().into(),
                    less_d: t.less.statistic,
                    less_p: t.less.p_value,
                    less_stars: t.less.stars().into(),
                    verdict: verdict.to_string(),
                });
            }
        }
        let mut artifacts = write_table(&self.layout.significance(), &rows)?;
        artifacts.push(self.write_notes(Stage::Significance, &notes)?);
        Ok(self.outcome(Stage::Significance, artifacts, format!("{} KS comparisons", rows.len())))
    }

    // ---- report -------------------------------------------------------

    fn read_stage<T: serde::de::DeserializeOwned>(&self, stem: &Path, stage: Stage) -> Result<Vec<T>, PipelineError> {
        let path = jsonl(stem);
        require(&path, stage)?;
        Ok(read_jsonl(&path)?)
    }

    pub fn report_inputs(&self) -> Result<ReportInputs, PipelineError> {
        let l = &self.layout;
        let posts = self.load_corpus()?;
        let stats = CorpusStats::of(&posts);
        let mut notes = Vec::new();
        for stage in [Stage::Evaluate, Stage::Ablate, Stage::Embed, Stage::Diverge, Stage::Significance] {
            let path = l.notes(stage);
            require(&path, stage)?;
            notes.extend(read_jsonl::<NoteRow>(&path)?);
        }
        Ok(ReportInputs {
            experiment_id: self.cfg.experiment_id(),
            posts: posts.len(),
            positives: stats.positives,
            invalid_rates: self.read_stage(&l.invalid_rates(), Stage::Parse)?,
            metrics: self.read_stage(&l.metrics(), Stage::Evaluate)?,
            ablation: self.read_stage(&l.ablation(), Stage::Ablate)?,
            transitions: TransitionReport {
                cells: self.read_stage(&l.transitions(), Stage::Evaluate)?,
                incomplete: self.read_stage(&l.transitions_incomplete(), Stage::Evaluate)?,
            },
            reductions: self.read_stage(&l.reductions(), Stage::Diverge)?,
            scmd: self.read_stage(&l.scmd(), Stage::Diverge)?,
            sdv: self.read_stage(&l.sdv(), Stage::Diverge)?,
            pca: self.read_stage(&l.pca_models(), Stage::Diverge)?,
            intra: self.read_stage(&l.intra(), Stage::Diverge)?,
            significance: self.read_stage(&l.significance(), Stage::Significance)?,
            notes,
        })
    }

    pub fn report(&self) -> Result<StageOutcome, PipelineError> {
        let text = render_report(&self.report_inputs()?);
        let path = self.layout.report();
        std::fs::write(&path, &text).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
        Ok(self.outcome(Stage::Report, vec![path], format!("{} report lines", text.lines().count())))
    }
}
