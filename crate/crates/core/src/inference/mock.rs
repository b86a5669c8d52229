use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::endpoint::{CallContext, ChatCompletion, ChatEndpoint, ChatRequest, EndpointError};
use super::{FinishReason, StoreError};

pub const DEFAULT_MOCK_REFUSAL: &str = "I cannot help with classifying this post.";

/// One scripted reply: plain text, or text with an explicit finish reason.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Text(String),
    Detailed {
        text: String,
        #[serde(default)]
        finish_reason: Option<FinishReason>,
    },
}

impl ScriptedReply {
    fn text(&self) -> &str {
        match self {
            ScriptedReply::Text(t) | ScriptedReply::Detailed { text: t, .. } => t,
        }
    }

    fn finish_reason(&self) -> FinishReason {
        match self {
            ScriptedReply::Detailed { finish_reason: Some(r), .. } => *r,
            _ => FinishReason::Stop,
        }
    }
}

/// Offline endpoint serving scripted replies.
///
/// Keys are post ids, optionally qualified by variant (`"guided-cot/p1"`);
/// a qualified key wins over the bare post id. Reply `run_index` is served
/// from position `run_index % len`, so a short script cycles and the reply
/// for a given run never depends on dispatch order.
pub struct MockEndpoint {
    script: HashMap<String, Vec<ScriptedReply>>,
    fallback: String,
    captured: Mutex<Vec<ChatRequest>>,
}

impl MockEndpoint {
    pub fn new(script: HashMap<String, Vec<ScriptedReply>>) -> Result<Self, EndpointError> {
        if script.is_empty() || script.values().any(Vec::is_empty) {
            return Err(EndpointError::Malformed("mock script must be non-empty".into()));
        }
        Ok(MockEndpoint { script, fallback: DEFAULT_MOCK_REFUSAL.into(), captured: Mutex::new(Vec::new()) })
    }

    pub fn from_texts<K, V, I>(script: I) -> Result<Self, EndpointError>
    where
        K: Into<String>,
        V: IntoIterator,
        V::Item: Into<String>,
        I: IntoIterator<Item = (K, V)>,
    {
        let script = script
            .into_iter()
            .map(|(k, v)| (k.into(), v.into_iter().map(|t| ScriptedReply::Text(t.into())).collect()))
            .collect();
        MockEndpoint::new(script)
    }

    pub fn from_file(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        let script: HashMap<String, Vec<ScriptedReply>> =
            serde_json::from_str(&text).map_err(|e| StoreError::Malformed { line: 0, message: e.to_string() })?;
        MockEndpoint::new(script).map_err(|e| StoreError::Malformed { line: 0, message: e.to_string() })
    }

    pub fn with_fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = text.into();
        self
    }

    /// Every request received so far, in arrival order.
    pub fn captured(&self) -> Vec<ChatRequest> {
        self.captured.lock().expect("mock capture lock").clone()
    }
}

impl ChatEndpoint for MockEndpoint {
    fn complete(&self, ctx: &CallContext<'_>, request: &ChatRequest) -> Result<ChatCompletion, EndpointError> {
        self.captured.lock().expect("mock capture lock").push(request.clone());
        let qualified = format!("{}/{}", ctx.variant, ctx.post_id);
        let replies = self.script.get(&qualified).or_else(|| self.script.get(ctx.post_id));
        let Some(replies) = replies else {
            return Ok(ChatCompletion {
                completion_tokens: Some(self.fallback.split_whitespace().count() as u32),
                content: self.fallback.clone(),
                finish_reason: FinishReason::Stop,
            });
        };
        let reply = &replies[ctx.run_index as usize % replies.len()];
        let finish_reason = reply.finish_reason();
        let completion_tokens = match finish_reason {
            FinishReason::Length => request.max_tokens,
            _ => (reply.text().split_whitespace().count() as u32).min(request.max_tokens.saturating_sub(1)),
        };
        Ok(ChatCompletion { content: reply.text().to_owned(), finish_reason, completion_tokens: Some(completion_tokens) })
    }
}
