use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use chrono::Utc;
use tracing::{debug, warn};

use super::endpoint::{CallContext, ChatEndpoint, ChatRequest, EndpointError};
use super::store::{RunKey, RunStore, StoreError};
use super::{DecodeConfig, FinishReason, ModelSpec, RunRecord};
use crate::corpus::Post;
use crate::prompts::{render, PolicyText, PromptVariant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubles on every further retry.
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, initial_backoff: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff.saturating_mul(1u32 << retry.min(16))
    }
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    /// Maximum requests in flight against the endpoint.
    pub parallel: usize,
    pub retry: RetryPolicy,
    /// Stop after issuing this many new requests.
    pub limit: Option<usize>,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { parallel: 4, retry: RetryPolicy::default(), limit: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchSummary {
    pub issued: usize,
    pub skipped: usize,
    pub errors: usize,
    pub truncated: usize,
}

struct Job<'a> {
    post: &'a Post,
    run_index: u32,
}

fn call_with_retry(
    endpoint: &dyn ChatEndpoint,
    ctx: &CallContext<'_>,
    request: &ChatRequest,
    retry: &RetryPolicy,
) -> Result<super::ChatCompletion, EndpointError> {
    let mut attempt = 0;
    loop {
        match endpoint.complete(ctx, request) {
            Ok(c) => return Ok(c),
            Err(e) if attempt < retry.max_retries => {
                let wait = retry.backoff(attempt);
                debug!(post = ctx.post_id, run = ctx.run_index, attempt, "retrying after {e}");
                thread::sleep(wait);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Runs every `(post, run_index)` pair not yet in `store` and appends the
/// results. Pairs already present are skipped, so re-invoking after an
/// interruption completes the store without duplicates.
#[allow(clippy::too_many_arguments)]
pub fn run_batch(
    corpus: &[Post],
    model: &ModelSpec,
    variant: PromptVariant,
    decode: &DecodeConfig,
    policy: &PolicyText,
    endpoint: &dyn ChatEndpoint,
    store: &mut RunStore,
    options: &BatchOptions,
) -> Result<BatchSummary, StoreError> {
    let mut summary = BatchSummary::default();
    let mut jobs = Vec::new();
    for post in corpus {
        for run_index in 0..decode.num_runs {
            let key = RunKey {
                model: model.name.clone(),
                variant,
                decode: decode.mode,
                post_id: post.post_id.clone(),
                run_index,
            };
            if store.contains(&key) {
                summary.skipped += 1;
            } else {
                jobs.push(Job { post, run_index });
            }
        }
    }
    if let Some(limit) = options.limit {
        jobs.truncate(limit);
    }
    if jobs.is_empty() {
        return Ok(summary);
    }

    let next = AtomicUsize::new(0);
    let workers = options.parallel.max(1).min(jobs.len());
    let send_seed = endpoint.supports_seed();

    thread::scope(|scope| -> Result<(), StoreError> {
        let (tx, rx) = mpsc::channel::<RunRecord>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next) = (&jobs, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let record = execute(job, model, variant, decode, policy, endpoint, &options.retry, send_seed);
                if tx.send(record).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for record in rx {
            summary.issued += 1;
            match record.finish_reason {
                FinishReason::Error => summary.errors += 1,
                FinishReason::Length => summary.truncated += 1,
                FinishReason::Stop => {}
            }
            if let Err(e) = store.append(&record) {
                // Stop the workers from picking up further jobs.
                next.store(usize::MAX / 2, Ordering::Relaxed);
                return Err(e);
            }
        }
        Ok(())
    })?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn execute(
    job: &Job<'_>,
    model: &ModelSpec,
    variant: PromptVariant,
    decode: &DecodeConfig,
    policy: &PolicyText,
    endpoint: &dyn ChatEndpoint,
    retry: &RetryPolicy,
    send_seed: bool,
) -> RunRecord {
    let mut record = RunRecord {
        model: model.name.clone(),
        variant,
        decode: decode.mode,
        post_id: job.post.post_id.clone(),
        run_index: job.run_index,
        response_text: String::new(),
        finish_reason: FinishReason::Error,
        prompt_chars: 0,
        output_tokens: None,
        timestamp: Utc::now(),
        error: None,
    };
    let prompt = match render(variant, job.post, policy) {
        Ok(p) => p,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.prompt_chars = prompt.char_len();
    let request = ChatRequest::build(model, &prompt, decode, job.run_index, send_seed);
    let ctx = CallContext { model: &model.name, variant, post_id: &job.post.post_id, run_index: job.run_index };
    match call_with_retry(endpoint, &ctx, &request, retry) {
        Ok(c) => {
            record.response_text = c.content;
            record.finish_reason = c.finish_reason;
            record.output_tokens = c.completion_tokens;
        }
        Err(e) => {
            warn!(model = %model.name, post = %job.post.post_id, run = job.run_index, "request failed: {e}");
            record.error = Some(e.to_string());
        }
    }
    record.timestamp = Utc::now();
    record
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;
    use crate::inference::{ChatCompletion, DecodeMode, MockEndpoint};
    use std::collections::BTreeMap;
    use std::sync::atomic::AtomicU32;
    use std::sync::Mutex;

    fn corpus(n: usize) -> Vec<Post> {
        (0..n)
            .map(|i| Post { post_id: format!("p{i}"), text: format!("post {i}"), gold_label: Label::NonAntisemitic })
            .collect()
    }

    fn mock(n: usize) -> MockEndpoint {
        MockEndpoint::from_texts(
            (0..n).map(|i| (format!("p{i}"), vec![format!("r{i}a\nAntisemitic: Yes"), format!("r{i}b\nAntisemitic: No")])),
        )
        .unwrap()
    }

    fn fast() -> BatchOptions {
        BatchOptions { parallel: 3, retry: RetryPolicy { max_retries: 3, initial_backoff: Duration::ZERO }, limit: None }
    }

    fn contents(path: &std::path::Path) -> BTreeMap<RunKey, String> {
        RunStore::load(path).unwrap().into_iter().map(|r| (r.key(), r.response_text)).collect()
    }

    #[test]
    fn greedy_and_self_consistency_counts() {
        let dir = tempfile::tempdir().unwrap();
        let posts = corpus(3);
        let endpoint = mock(3);
        let model = ModelSpec::new("m", "mock:");
        let policy = PolicyText::default();
        let mut store = RunStore::open(&dir.path().join("s.jsonl")).unwrap();

        let s = run_batch(&posts, &model, PromptVariant::ZsBeta, &DecodeConfig::greedy(), &policy, &endpoint, &mut store, &fast()).unwrap();
        assert_eq!(s.issued, 3);
        let sc = DecodeConfig::self_consistency();
        let s = run_batch(&posts, &model, PromptVariant::ZsBeta, &sc, &policy, &endpoint, &mut store, &fast()).unwrap();
        assert_eq!(s.issued, 90);
        assert_eq!(store.len(), 93);

        let records = RunStore::load(store.path()).unwrap();
        assert!(records.iter().filter(|r| r.decode == DecodeMode::Greedy).all(|r| r.run_index == 0));

        let captured = endpoint.captured();
        let greedy: Vec<_> = captured.iter().filter(|r| r.temperature == 0.0).collect();
        assert_eq!(greedy.len(), 3);
        assert!(greedy.iter().all(|r| r.top_p.is_none()));
        let sampled: Vec<_> = captured.iter().filter(|r| r.temperature != 0.0).collect();
        assert_eq!(sampled.len(), 90);
        assert!(sampled.iter().all(|r| r.temperature == 0.6 && r.top_p == Some(0.9)));
    }

    #[test]
    fn complete_store_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let posts = corpus(4);
        let endpoint = mock(4);
        let model = ModelSpec::new("m", "mock:");
        let mut store = RunStore::open(&dir.path().join("s.jsonl")).unwrap();
        let decode = DecodeConfig::sample();
        run_batch(&posts, &model, PromptVariant::GuidedCot, &decode, &PolicyText::default(), &endpoint, &mut store, &fast()).unwrap();
        let before = std::fs::read(store.path()).unwrap();
        let s = run_batch(&posts, &model, PromptVariant::GuidedCot, &decode, &PolicyText::default(), &endpoint, &mut store, &fast()).unwrap();
        assert_eq!((s.issued, s.skipped), (0, 20));
        assert_eq!(std::fs::read(store.path()).unwrap(), before);
    }

    #[test]
    fn interrupted_then_resumed_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let posts = corpus(5);
        let model = ModelSpec::new("m", "mock:");
        let decode = DecodeConfig::self_consistency().with_runs(7);
        let policy = PolicyText::default();

        let full_path = dir.path().join("full.jsonl");
        let mut full = RunStore::open(&full_path).unwrap();
        run_batch(&posts, &model, PromptVariant::ZsCot, &decode, &policy, &mock(5), &mut full, &fast()).unwrap();

        let resumed_path = dir.path().join("resumed.jsonl");
        {
            let mut store = RunStore::open(&resumed_path).unwrap();
            let partial = BatchOptions { limit: Some(13), ..fast() };
            let s = run_batch(&posts, &model, PromptVariant::ZsCot, &decode, &policy, &mock(5), &mut store, &partial).unwrap();
            assert_eq!(s.issued, 13);
        }
        let mut store = RunStore::open(&resumed_path).unwrap();
        let s = run_batch(&posts, &model, PromptVariant::ZsCot, &decode, &policy, &mock(5), &mut store, &fast()).unwrap();
        assert_eq!((s.issued, s.skipped), (22, 13));
        assert_eq!(contents(&full_path), contents(&resumed_path));
        assert_eq!(RunStore::load(&resumed_path).unwrap().len(), 35);
    }

    struct Flaky {
        failures_before_success: u32,
        calls: AtomicU32,
    }

    impl ChatEndpoint for Flaky {
        fn complete(&self, _: &CallContext<'_>, _: &ChatRequest) -> Result<ChatCompletion, EndpointError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures_before_success {
                Err(EndpointError::Transport("connection reset".into()))
            } else {
                Ok(ChatCompletion { content: "Antisemitic: No".into(), finish_reason: FinishReason::Stop, completion_tokens: Some(3) })
            }
        }
    }

    #[test]
    fn retries_then_succeeds_or_records_error() {
        let dir = tempfile::tempdir().unwrap();
        let posts = corpus(1);
        let model = ModelSpec::new("m", "x");
        let opts = BatchOptions { parallel: 1, ..fast() };

        let ok = Flaky { failures_before_success: 3, calls: AtomicU32::new(0) };
        let mut store = RunStore::open(&dir.path().join("a.jsonl")).unwrap();
        let s = run_batch(&posts, &model, PromptVariant::ZsAs, &DecodeConfig::greedy(), &PolicyText::default(), &ok, &mut store, &opts).unwrap();
        assert_eq!((s.issued, s.errors), (1, 0));
        assert_eq!(ok.calls.load(Ordering::SeqCst), 4);

        let bad = Flaky { failures_before_success: 10, calls: AtomicU32::new(0) };
        let mut store = RunStore::open(&dir.path().join("b.jsonl")).unwrap();
        let s = run_batch(&posts, &model, PromptVariant::ZsAs, &DecodeConfig::greedy(), &PolicyText::default(), &bad, &mut store, &opts).unwrap();
        assert_eq!(s.errors, 1);
        assert_eq!(bad.calls.load(Ordering::SeqCst), 4);
        let rec = &RunStore::load(store.path()).unwrap()[0];
        assert_eq!(rec.finish_reason, FinishReason::Error);
        assert!(rec.error.as_deref().unwrap().contains("connection reset"));
    }

    #[test]
    fn backoff_doubles() {
        let r = RetryPolicy::default();
        assert_eq!(
            (0..3).map(|i| r.backoff(i).as_secs()).collect::<Vec<_>>(),
            [1, 2, 4]
        );
    }

    struct Counting {
        in_flight: AtomicU32,
        peak: Mutex<u32>,
    }

    impl ChatEndpoint for Counting {
        fn complete(&self, _: &CallContext<'_>, _: &ChatRequest) -> Result<ChatCompletion, EndpointError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            {
                let mut peak = self.peak.lock().unwrap();
                *peak = (*peak).max(now);
            }
            thread::sleep(Duration::from_millis(5));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(ChatCompletion { content: "Antisemitic: No".into(), finish_reason: FinishReason::Stop, completion_tokens: Some(3) })
        }
    }

    #[test]
    fn parallelism_is_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let endpoint = Counting { in_flight: AtomicU32::new(0), peak: Mutex::new(0) };
        let mut store = RunStore::open(&dir.path().join("c.jsonl")).unwrap();
        let opts = BatchOptions { parallel: 2, ..fast() };
        run_batch(&corpus(12), &ModelSpec::new("m", "x"), PromptVariant::ZsAs, &DecodeConfig::greedy(), &PolicyText::default(), &endpoint, &mut store, &opts).unwrap();
        assert!(*endpoint.peak.lock().unwrap() <= 2);
        assert_eq!(store.len(), 12);
    }
}
