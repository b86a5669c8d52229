//! Embedding providers and a content-addressed vector cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tracing::warn;

use super::{DivergenceError, EmbeddingMatrix, RowKey};
use crate::inference::RetryPolicy;

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier of model and dimension; part of every cache key.
    fn id(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, DivergenceError>;
}

/// Offline provider: signed feature hashing of word unigrams and bigrams,
/// L2-normalised. Deterministic and dependency-free, meant for fixtures and
/// smoke runs rather than semantic fidelity.
pub struct HashingProvider {
    dimension: usize,
}

impl HashingProvider {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashingProvider { dimension }
    }

    fn bucket(&self, feature: &str) -> (usize, f64) {
        let digest = Sha256::digest(feature.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        let h = u64::from_le_bytes(b);
        ((h % self.dimension as u64) as usize, if h >> 63 == 0 { 1.0 } else { -1.0 })
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect();
        let mut v = vec![0.0; self.dimension];
        let mut add = |feature: &str| {
            let (i, s) = self.bucket(feature);
            v[i] += s;
        };
        for t in &tokens {
            add(t);
        }
        for w in tokens.windows(2) {
            add(&format!("{} {}", w[0], w[1]));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Empty or fully cancelled input still needs a usable direction.
            let (i, _) = self.bucket("\u{0}empty");
            v[i] = 1.0;
            return v;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl EmbeddingProvider for HashingProvider {
    fn id(&self) -> String {
        format!("hashing-v1/{}", self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, DivergenceError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Client for an OpenAI-style `/embeddings` endpoint.
pub struct HttpEmbeddingProvider {
    url: String,
    model: String,
    dimension: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbeddingProvider {
    pub fn new(base_url: &str, model: &str, dimension: usize, api_key: Option<String>, timeout: Duration) -> Self {
        let base = base_url.trim_end_matches('/');
        let url = if base.ends_with("/embeddings") { base.to_owned() } else { format!("{base}/embeddings") };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpEmbeddingProvider { url, model: model.to_owned(), dimension, api_key, agent }
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn id(&self) -> String {
        format!("http/{}/{}", self.model, self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, DivergenceError> {
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = call.send_json(&body).map_err(|e| DivergenceError::Provider(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| DivergenceError::Provider(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(DivergenceError::Provider(format!("http status {status}: {text}")));
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| DivergenceError::Provider(e.to_string()))?;
        let data = value
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| DivergenceError::Provider("response has no data array".into()))?;
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let i = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let vec: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| DivergenceError::Provider("item has no embedding".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| DivergenceError::Provider("non-numeric embedding".into())))
                .collect::<Result<_, _>>()?;
            if vec.len() != self.dimension {
                return Err(DivergenceError::Provider(format!(
                    "expected dimension {}, got {}",
                    self.dimension,
                    vec.len()
                )));
            }
            *out.get_mut(i).ok_or_else(|| DivergenceError::Provider(format!("index {i} out of range")))? = vec;
        }
        if out.iter().any(Vec::is_empty) {
            return Err(DivergenceError::Provider("response is missing embeddings".into()));
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    vector: Vec<f64>,
}

/// Vectors keyed by SHA-256 of provider id and text, optionally persisted
/// as an append-only line-json file.
#[derive(Default)]
pub struct EmbeddingCache {
    entries: HashMap<String, Vec<f64>>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        EmbeddingCache::default()
    }

    pub fn open(path: &Path) -> Result<Self, DivergenceError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| DivergenceError::io(dir, e))?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| DivergenceError::io(path, e))?);
            for line in reader.lines() {
                let line = line.map_err(|e| DivergenceError::io(path, e))?;
                // A torn last line from an interrupted write is simply recomputed.
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(entry.key, entry.vector);
                }
            }
        }
        Ok(EmbeddingCache { entries, path: Some(path.to_owned()) })
    }

    pub fn key(provider_id: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(provider_id.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<&Vec<f64>> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert_all(&mut self, new: Vec<(String, Vec<f64>)>) -> Result<(), DivergenceError> {
        if let Some(path) = &self.path {
            if !new.is_empty() {
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| DivergenceError::io(path, e))?;
                let mut buf = String::new();
                for (key, vector) in &new {
                    let line = CacheLine { key: key.clone(), vector: vector.clone() };
                    buf.push_str(&serde_json::to_string(&line).expect("cache line serializes"));
                    buf.push('\n');
                }
                f.write_all(buf.as_bytes()).map_err(|e| DivergenceError::io(path, e))?;
            }
        }
        self.entries.extend(new);
        Ok(())
    }
}

pub struct Embedder<'p> {
    provider: &'p dyn EmbeddingProvider,
    cache: EmbeddingCache,
    retry: RetryPolicy,
    batch_size: usize,
    provider_calls: usize,
}

#[derive(Debug)]
pub struct EmbedOutcome {
    pub matrix: EmbeddingMatrix,
    /// Rows whose embedding failed after retries; absent from `matrix`.
    pub missing: Vec<RowKey>,
}

impl<'p> Embedder<'p> {
    pub fn new(provider: &'p dyn EmbeddingProvider, cache: EmbeddingCache) -> Self {
        Embedder { provider, cache, retry: RetryPolicy::default(), batch_size: 32, provider_calls: 0 }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn provider_calls(&self) -> usize {
        self.provider_calls
    }

    fn call(&mut self, texts: &[&str]) -> Result<Vec<Vec<f64>>, DivergenceError> {
        let mut attempt = 0;
        loop {
            self.provider_calls += 1;
            match self.provider.embed_batch(texts) {
                Ok(v) => return Ok(v),
                Err(e) if attempt < self.retry.max_retries => {
                    warn!("embedding batch failed, retrying: {e}");
                    thread::sleep(self.retry.backoff(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Embeds `texts` (aligned with `keys`), serving repeats from the cache.
    pub fn embed(&mut self, keys: Vec<RowKey>, texts: &[String]) -> Result<EmbedOutcome, DivergenceError> {
        assert_eq!(keys.len(), texts.len(), "keys and texts must align");
        let pid = self.provider.id();
        let hashes: Vec<String> = texts.iter().map(|t| EmbeddingCache::key(&pid, t)).collect();

        let mut pending: Vec<usize> = Vec::new();
        let mut queued = std::collections::HashSet::new();
        for (i, h) in hashes.iter().enumerate() {
            if self.cache.get(h).is_none() && queued.insert(h.as_str()) {
                pending.push(i);
            }
        }
        for chunk in pending.chunks(self.batch_size) {
            let batch: Vec<&str> = chunk.iter().map(|&i| texts[i].as_str()).collect();
            match self.call(&batch) {
                Ok(vectors) => {
                    let new = chunk.iter().map(|&i| hashes[i].clone()).zip(vectors).collect();
                    self.cache.insert_all(new)?;
                }
                Err(e) => warn!("embedding batch of {} failed after retries: {e}", batch.len()),
            }
        }

        let mut rows = Vec::with_capacity(keys.len());
        let mut missing = Vec::new();
        for (key, h) in keys.into_iter().zip(&hashes) {
            match self.cache.get(h) {
                Some(v) => rows.push((key, v.clone())),
                None => missing.push(key),
            }
        }
        let matrix = EmbeddingMatrix::from_rows(self.provider.dimension(), rows)?;
        Ok(EmbedOutcome { matrix, missing })
    }
}
