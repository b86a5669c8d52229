//! Chat-completion inference under greedy, sampled and self-consistency
//! decoding, with a resumable append-only run store.

mod batch;
mod endpoint;
mod mock;
mod store;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::PromptVariant;

pub use batch::{run_batch, BatchOptions, BatchSummary, RetryPolicy};
pub use endpoint::{
    CallContext, ChatCompletion, ChatEndpoint, ChatMessage, ChatRequest, EndpointError, HttpEndpoint,
};
pub use mock::{MockEndpoint, ScriptedReply, DEFAULT_MOCK_REFUSAL};
pub use store::{RunKey, RunStore, StoreError};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;
pub const DEFAULT_SAMPLING_TEMPERATURE: f64 = 0.6;
pub const DEFAULT_TOP_P: f64 = 0.9;
pub const DEFAULT_SAMPLE_RUNS: u32 = 5;
pub const DEFAULT_SELF_CONSISTENCY_RUNS: u32 = 30;

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_OUTPUT_TOKENS
}

fn default_think_open() -> String {
    "<think>".into()
}

fn default_think_close() -> String {
    "</think>".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Base URL of an OpenAI-style API (`.../v1`), or `mock:<script.json>`.
    pub endpoint_url: String,
    #[serde(default)]
    pub is_reasoning: bool,
    #[serde(default)]
    pub is_quantized: bool,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    /// Model id sent on the wire; defaults to `name`.
    #[serde(default)]
    pub served_model: Option<String>,
    /// Environment variable holding the bearer token, if the endpoint needs one.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_think_open")]
    pub think_open: String,
    #[serde(default = "default_think_close")]
    pub think_close: String,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, endpoint_url: impl Into<String>) -> Self {
        ModelSpec {
            name: name.into(),
            endpoint_url: endpoint_url.into(),
            is_reasoning: false,
            is_quantized: false,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            served_model: None,
            api_key_env: None,
            think_open: default_think_open(),
            think_close: default_think_close(),
        }
    }

    pub fn wire_model(&self) -> &str {
        self.served_model.as_deref().unwrap_or(&self.name)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(ConfigError::Invalid("model name is empty".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(ConfigError::Invalid(format!("{}: max_output_tokens must be > 0", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
    SelfConsistency,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [DecodeMode::Greedy, DecodeMode::Sample, DecodeMode::SelfConsistency];

    pub fn short_name(self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Sample => "sample",
            DecodeMode::SelfConsistency => "sc",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for DecodeMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "greedy" => Ok(DecodeMode::Greedy),
            "sample" | "sampling" => Ok(DecodeMode::Sample),
            "sc" | "self_consistency" => Ok(DecodeMode::SelfConsistency),
            _ => Err(ConfigError::Invalid(format!("unknown decode mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_p: f64,
    pub num_runs: u32,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig { mode: DecodeMode::Greedy, temperature: 0.0, top_p: 1.0, num_runs: 1, seed: 0 }
    }

    pub fn sample() -> Self {
        DecodeConfig {
            mode: DecodeMode::Sample,
            temperature: DEFAULT_SAMPLING_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            num_runs: DEFAULT_SAMPLE_RUNS,
            seed: 0,
        }
    }

    pub fn self_consistency() -> Self {
        DecodeConfig {
            mode: DecodeMode::SelfConsistency,
            num_runs: DEFAULT_SELF_CONSISTENCY_RUNS,
            ..DecodeConfig::sample()
        }
    }

    pub fn for_mode(mode: DecodeMode) -> Self {
        match mode {
            DecodeMode::Greedy => DecodeConfig::greedy(),
            DecodeMode::Sample => DecodeConfig::sample(),
            DecodeMode::SelfConsistency => DecodeConfig::self_consistency(),
        }
    }

    pub fn with_runs(mut self, num_runs: u32) -> Self {
        self.num_runs = num_runs;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_runs == 0 {
            return Err(ConfigError::Invalid("num_runs must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ConfigError::Invalid(format!("temperature {} must be >= 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ConfigError::Invalid(format!("top_p {} must lie in (0, 1]", self.top_p)));
        }
        if self.mode == DecodeMode::Greedy && (self.temperature != 0.0 || self.num_runs != 1) {
            return Err(ConfigError::Invalid("greedy decoding requires temperature 0 and a single run".into()));
        }
        Ok(())
    }

    /// Seed sent with request `run_index`.
    pub fn run_seed(&self, run_index: u32) -> u64 {
        self.seed.wrapping_add(u64::from(run_index))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

/// One model response, as persisted in the run store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub variant: PromptVariant,
    pub decode: DecodeMode,
    pub post_id: String,
    pub run_index: u32,
    pub response_text: String,
    pub finish_reason: FinishReason,
    pub prompt_chars: usize,
    pub output_tokens: Option<u32>,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn key(&self) -> RunKey {
        RunKey {
            model: self.model.clone(),
            variant: self.variant,
            decode: self.decode,
            post_id: self.post_id.clone(),
            run_index: self.run_index,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_defaults() {
        let g = DecodeConfig::greedy();
        assert_eq!((g.temperature, g.num_runs), (0.0, 1));
        g.validate().unwrap();
        let s = DecodeConfig::sample();
        assert_eq!((s.temperature, s.top_p, s.num_runs), (0.6, 0.9, 5));
        let sc = DecodeConfig::self_consistency();
        assert_eq!((sc.temperature, sc.top_p, sc.num_runs), (0.6, 0.9, 30));
        sc.validate().unwrap();
    }

    #[test]
    fn decode_validation() {
        assert!(DecodeConfig::greedy().with_runs(2).validate().is_err());
        assert!(DecodeConfig::sample().with_runs(0).validate().is_err());
        let mut bad = DecodeConfig::sample();
        bad.top_p = 0.0;
        assert!(bad.validate().is_err());
        bad.top_p = 1.0;
        bad.temperature = f64::NAN;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn decode_mode_names() {
        for (s, m) in [("greedy", DecodeMode::Greedy), ("sample", DecodeMode::Sample), ("sc", DecodeMode::SelfConsistency)] {
            assert_eq!(s.parse::<DecodeMode>().unwrap(), m);
            assert_eq!(m.to_string(), s);
        }
        assert_eq!("self-consistency".parse::<DecodeMode>().unwrap(), DecodeMode::SelfConsistency);
    }

    #[test]
    fn run_seed_offsets_by_index() {
        let d = DecodeConfig::self_consistency().with_seed(100);
        assert_eq!(d.run_seed(0), 100);
        assert_eq!(d.run_seed(29), 129);
    }

    #[test]
    fn model_spec_defaults_from_toml() {
        let spec: ModelSpec = toml::from_str("name = \"m\"\nendpoint_url = \"http://x/v1\"").unwrap();
        assert_eq!(spec.max_output_tokens, 2048);
        assert_eq!(spec.think_open, "<think>");
        assert_eq!(spec.wire_model(), "m");
        let mut zero = spec.clone();
        zero.max_output_tokens = 0;
        assert!(zero.validate().is_err());
    }
}
