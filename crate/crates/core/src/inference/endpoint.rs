use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{DecodeConfig, DecodeMode, FinishReason, ModelSpec};
use crate::prompts::{PromptVariant, RenderedPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body of the open chat-completions API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn build(model: &ModelSpec, prompt: &RenderedPrompt, decode: &DecodeConfig, run_index: u32, send_seed: bool) -> Self {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &prompt.system_message {
            messages.push(ChatMessage { role: "system".into(), content: system.clone() });
        }
        messages.push(ChatMessage { role: "user".into(), content: prompt.user_message.clone() });
        let greedy = decode.mode == DecodeMode::Greedy;
        ChatRequest {
            model: model.wire_model().to_owned(),
            messages,
            temperature: if greedy { 0.0 } else { decode.temperature },
            top_p: if greedy { None } else { Some(decode.top_p) },
            max_tokens: model.max_output_tokens,
            seed: send_seed.then(|| decode.run_seed(run_index)),
        }
    }
}

/// What the batch runner knows about a call beyond the wire request.
#[derive(Debug, Clone, Copy)]
pub struct CallContext<'a> {
    pub model: &'a str,
    pub variant: PromptVariant,
    pub post_id: &'a str,
    pub run_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatCompletion {
    pub content: String,
    pub finish_reason: FinishReason,
    pub completion_tokens: Option<u32>,
}

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
}

pub trait ChatEndpoint: Send + Sync {
    fn complete(&self, ctx: &CallContext<'_>, request: &ChatRequest) -> Result<ChatCompletion, EndpointError>;

    /// Whether requests should carry a per-run `seed`.
    fn supports_seed(&self) -> bool {
        true
    }
}

/// Client for any server speaking the chat-completions HTTP API.
pub struct HttpEndpoint {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    send_seed: bool,
}

impl HttpEndpoint {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let base = base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_owned()
        } else {
            format!("{base}/chat/completions")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpEndpoint { url, api_key, agent, send_seed: true }
    }

    /// Builds an endpoint for `model`, reading its credential from the
    /// environment variable named by `api_key_env`.
    pub fn for_model(model: &ModelSpec, timeout: Duration) -> Result<Self, EndpointError> {
        let api_key = match &model.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| EndpointError::MissingCredential(var.clone()))?),
            None => None,
        };
        Ok(HttpEndpoint::new(&model.endpoint_url, api_key, timeout))
    }

    pub fn without_seed(mut self) -> Self {
        self.send_seed = false;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl ChatEndpoint for HttpEndpoint {
    fn complete(&self, _ctx: &CallContext<'_>, request: &ChatRequest) -> Result<ChatCompletion, EndpointError> {
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call.send_json(request).map_err(|e| EndpointError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(EndpointError::Status { status, body });
        }
        let value: Value = serde_json::from_str(&body).map_err(|e| EndpointError::Malformed(e.to_string()))?;
        parse_completion(&value, request.max_tokens)
    }

    fn supports_seed(&self) -> bool {
        self.send_seed
    }
}

/// Extracts content, finish reason and usage from a chat-completions body.
///
/// Servers that return reasoning separately (`reasoning_content`) get it
/// re-wrapped in `<think>` markers so downstream stripping sees one format.
pub fn parse_completion(value: &Value, max_tokens: u32) -> Result<ChatCompletion, EndpointError> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| EndpointError::Malformed("no choices".into()))?;
    let message = choice.get("message").ok_or_else(|| EndpointError::Malformed("no message".into()))?;
    let mut content = message.get("content").and_then(Value::as_str).unwrap_or_default().to_owned();
    if let Some(reasoning) = message.get("reasoning_content").and_then(Value::as_str) {
        if !reasoning.is_empty() {
            content = format!("<think>{reasoning}</think>{content}");
        }
    }
    let completion_tokens = value
        .get("usage")
        .and_then(|u| u.get("completion_tokens"))
        .and_then(Value::as_u64)
        .map(|n| n.min(u64::from(u32::MAX)) as u32);
    let reported = choice.get("finish_reason").and_then(Value::as_str);
    let hit_limit = completion_tokens.is_some_and(|n| n >= max_tokens);
    let finish_reason = if reported == Some("length") || hit_limit {
        FinishReason::Length
    } else {
        FinishReason::Stop
    };
    Ok(ChatCompletion { content, finish_reason, completion_tokens })
}
