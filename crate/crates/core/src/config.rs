//! Experiment configuration, loaded from TOML.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::CorpusFormat;
use crate::divergence::CohesionMode;
use crate::inference::{DecodeConfig, DecodeMode, ModelSpec, RetryPolicy};
use crate::prompts::PromptVariant;

#[derive(Debug, Error)]
pub enum ExperimentConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ExperimentConfigError {
    ExperimentConfigError::Invalid(msg.into())
}

/// One decoding regime; unset fields take the mode's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSpec {
    pub mode: DecodeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_runs: Option<u32>,
}

impl DecodeSpec {
    pub fn new(mode: DecodeMode) -> Self {
        DecodeSpec { mode, temperature: None, top_p: None, num_runs: None }
    }

    pub fn resolve(&self, seed: u64) -> DecodeConfig {
        let mut cfg = DecodeConfig::for_mode(self.mode).with_seed(seed);
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        if let Some(p) = self.top_p {
            cfg.top_p = p;
        }
        if let Some(n) = self.num_runs {
            cfg.num_runs = n;
        }
        cfg
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFiles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_policy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub parallel: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings { parallel: 4, max_retries: 3, backoff_ms: 1000, timeout_secs: 300 }
    }
}

impl RunSettings {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { max_retries: self.max_retries, initial_backoff: Duration::from_millis(self.backoff_ms) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Variants whose responses are embedded; empty means every non-ablation variant.
    pub embed_variants: Vec<PromptVariant>,
    /// Decoding regime whose first run supplies the embedded response.
    pub embed_decode: DecodeMode,
    pub target_dim: usize,
    pub k: usize,
    pub alpha: f64,
    pub cohesion_mode: CohesionMode,
    pub transition_base: PromptVariant,
    /// Empty means every configured non-ablation variant other than the base.
    pub transition_targets: Vec<PromptVariant>,
    pub ablation_base: PromptVariant,
    /// Heatmap export is subsampled to at most this many rows per model.
    pub heatmap_max_rows: usize,
    pub heatmap_image: bool,
    pub trust_k: usize,
    /// Rows sampled for the trustworthiness check; 0 disables it.
    pub trust_sample: usize,
    /// Pre-computed reduced matrices, keyed by variant, used instead of PCA.
    pub external_reductions: Vec<ExternalReduction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalReduction {
    pub variant: PromptVariant,
    pub path: PathBuf,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            embed_variants: Vec::new(),
            embed_decode: DecodeMode::Greedy,
            target_dim: 15,
            k: 1500,
            alpha: 0.05,
            cohesion_mode: CohesionMode::PerRow,
            transition_base: PromptVariant::ZsAlpha,
            transition_targets: Vec::new(),
            ablation_base: PromptVariant::GuidedCot,
            heatmap_max_rows: 500,
            heatmap_image: false,
            trust_k: 10,
            trust_sample: 1000,
            external_reductions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Hashing,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub provider: ProviderKind,
    pub dimension: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub batch_size: usize,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings {
            provider: ProviderKind::Hashing,
            dimension: 256,
            url: None,
            model: None,
            api_key_env: None,
            batch_size: 32,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_decodes() -> Vec<DecodeSpec> {
    vec![DecodeSpec::new(DecodeMode::Greedy)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_format: Option<CorpusFormat>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub variants: Vec<PromptVariant>,
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_decodes")]
    pub decodes: Vec<DecodeSpec>,
    #[serde(default)]
    pub policy: PolicyFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_patterns: Option<PathBuf>,
    #[serde(default)]
    pub run: RunSettings,
    #[serde(default)]
    pub analysis: AnalysisSettings,
    #[serde(default)]
    pub embedding: EmbeddingSettings,
    /// Directory relative paths resolve against; the config file's parent.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ExperimentConfigError::Io { path: path.to_owned(), source })?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|source| ExperimentConfigError::Parse { path: path.to_owned(), source })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ExperimentConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|source| ExperimentConfigError::Parse { path: PathBuf::from("<inline>"), source })?;
        cfg.base_dir = base_dir.to_owned();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentConfigError> {
        if self.models.is_empty() {
            return Err(invalid("model roster is empty"));
        }
        let mut names = HashSet::new();
        for m in &self.models {
            m.validate().map_err(|e| invalid(e.to_string()))?;
            if !names.insert(m.name.as_str()) {
                return Err(invalid(format!("duplicate model name {:?}", m.name)));
            }
        }
        if self.variants.is_empty() {
            return Err(invalid("variant list is empty"));
        }
        if has_duplicates(&self.variants) {
            return Err(invalid("variant list contains duplicates"));
        }
        if self.decodes.is_empty() {
            return Err(invalid("decode list is empty"));
        }
        if has_duplicates(&self.decodes.iter().map(|d| d.mode).collect::<Vec<_>>()) {
            return Err(invalid("each decode mode may appear once"));
        }
        for d in &self.decodes {
            d.resolve(self.seed).validate().map_err(|e| invalid(e.to_string()))?;
        }
        let a = &self.analysis;
        if !(a.alpha > 0.0 && a.alpha < 1.0) {
            return Err(invalid(format!("alpha {} must lie in (0, 1)", a.alpha)));
        }
        if a.target_dim == 0 || a.k == 0 {
            return Err(invalid("target_dim and k must be positive"));
        }
        for v in a.embed_variants.iter().chain(&a.transition_targets) {
            if !self.variants.contains(v) {
                return Err(invalid(format!("analysis refers to unconfigured variant {v}")));
            }
        }
        if self.embedding.dimension == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        if self.embedding.provider == ProviderKind::Http && self.embedding.url.is_none() {
            return Err(invalid("http embedding provider needs a url"));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.resolve(&self.corpus)
    }

    pub fn corpus_format(&self) -> CorpusFormat {
        self.corpus_format.unwrap_or_else(|| CorpusFormat::from_path(&self.corpus))
    }

    pub fn decode_configs(&self) -> Vec<DecodeConfig> {
        self.decodes.iter().map(|d| d.resolve(self.seed)).collect()
    }

    pub fn decode_config(&self, mode: DecodeMode) -> Option<DecodeConfig> {
        self.decodes.iter().find(|d| d.mode == mode).map(|d| d.resolve(self.seed))
    }

    pub fn model(&self, name: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn roster(&self) -> Vec<String> {
        self.models.iter().map(|m| m.name.clone()).collect()
    }

    /// Non-ablation variants in configured order.
    pub fn main_variants(&self) -> Vec<PromptVariant> {
        self.variants.iter().copied().filter(|v| v.excluded_thought().is_none()).collect()
    }

    pub fn ablation_variants(&self) -> Vec<PromptVariant> {
        self.variants.iter().copied().filter(|v| v.excluded_thought().is_some()).collect()
    }

    pub fn embed_variants(&self) -> Vec<PromptVariant> {
        if self.analysis.embed_variants.is_empty() {
            self.main_variants()
        } else {
            self.analysis.embed_variants.clone()
        }
    }

    pub fn transition_targets(&self) -> Vec<PromptVariant> {
        if self.analysis.transition_targets.is_empty() {
            self.main_variants().into_iter().filter(|v| *v != self.analysis.transition_base).collect()
        } else {
            self.analysis.transition_targets.clone()
        }
    }

    /// Hex digest of the canonical config with `out_dir` cleared, so moving
    /// the output root does not change the experiment identity.
    pub fn content_hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        let value = serde_json::to_value(&canon).expect("config serialises");
        let bytes = serde_json::to_vec(&value).expect("json value serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn experiment_id(&self) -> String {
        format!("exp-{}", &self.content_hash()[..16])
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir).join(self.experiment_id())
    }
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items.iter().enumerate().any(|(i, a)| items[..i].contains(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
corpus = "posts.csv"
variants = ["zs-beta", "guided-cot", "ablation:a2"]

[[models]]
name = "m1"
endpoint_url = "mock:script.json"

[[models]]
name = "m2"
endpoint_url = "http://localhost:8000/v1"
is_reasoning = true
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.analysis.target_dim, 15);
        assert_eq!(cfg.analysis.k, 1500);
        assert_eq!(cfg.decode_configs(), vec![DecodeConfig::greedy()]);
        assert_eq!(cfg.corpus_path(), PathBuf::from("/cfg/posts.csv"));
        assert_eq!(cfg.corpus_format(), CorpusFormat::Delimited);
        assert_eq!(cfg.main_variants(), vec![PromptVariant::ZsBeta, PromptVariant::GuidedCot]);
        assert_eq!(cfg.ablation_variants(), vec![PromptVariant::Ablation(2)]);
        assert_eq!(cfg.transition_targets(), vec![PromptVariant::ZsBeta, PromptVariant::GuidedCot]);
    }

    #[test]
    fn hash_ignores_out_dir_but_not_seed() {
        let a = ExperimentConfig::from_toml_str(MINIMAL, Path::new("/x")).unwrap();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        b.base_dir = PathBuf::from("/y");
        assert_eq!(a.experiment_id(), b.experiment_id());
        b.seed = 7;
        assert_ne!(a.experiment_id(), b.experiment_id());
        assert!(a.experiment_id().starts_with("exp-") && a.experiment_id().len() == 20);
    }

    #[test]
    fn rejects_duplicate_models() {
        let text = MINIMAL.replace("name = \"m2\"", "name = \"m1\"");
        assert!(matches!(ExperimentConfig::from_toml_str(&text, Path::new(".")), Err(ExperimentConfigError::Invalid(_))));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_alpha() {
        let text = format!("{MINIMAL}\n[analysis]\nalpha = 1.5\n");
        assert!(ExperimentConfig::from_toml_str(&text, Path::new(".")).is_err());
        let text = MINIMAL.replace("variants", "seed = 1\nvariantz = []\nvariants");
        assert!(ExperimentConfig::from_toml_str(&text, Path::new(".")).is_err());
    }

    #[test]
    fn decode_overrides() {
        let text = format!("{MINIMAL}\n[[decodes]]\nmode = \"self_consistency\"\nnum_runs = 7\n");
        let cfg = ExperimentConfig::from_toml_str(&text, Path::new(".")).unwrap();
        let sc = cfg.decode_config(DecodeMode::SelfConsistency).unwrap();
        assert_eq!((sc.num_runs, sc.temperature, sc.top_p), (7, 0.6, 0.9));
        assert!(cfg.decode_config(DecodeMode::Greedy).is_none());
    }
}
