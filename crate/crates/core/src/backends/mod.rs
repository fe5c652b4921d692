//! Chat-completion and embedding backends.
//!
//! A backend implements a single attempt ([`ChatBackend::complete`],
//! [`EmbeddingBackend::embed`]). [`ChatClient`] and [`EmbedClient`] wrap a
//! backend with the [`BackendPolicy`]: bounded in-flight requests, retries
//! with exponential backoff and jitter, and an optional response cache.

mod http;
pub mod mock;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BackendError, Error, Result};

pub use http::{HttpChat, HttpEmbedder, ENV_API_BASE, ENV_API_KEY, ENV_EMBED_BASE};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub model: String,
}

impl ChatRequest {
    pub fn single(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            messages: vec![ChatMessage::user(prompt)],
            max_output_tokens: 1024,
            temperature: 0.0,
            model: model.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::InvalidArgument("chat request has no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidArgument(format!("temperature {} < 0", self.temperature)));
        }
        Ok(())
    }

    /// Content of the last message, which carries the prompt for
    /// single-turn requests.
    pub fn last_content(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }
}

/// Request model, sampling temperature and output budget for one backend role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self { model: "default".into(), temperature: 0.0, max_output_tokens: 1024 }
    }
}

impl ModelParams {
    pub fn request(&self, prompt: impl Into<String>) -> ChatRequest {
        ChatRequest {
            messages: vec![ChatMessage::user(prompt)],
            max_output_tokens: self.max_output_tokens,
            temperature: self.temperature,
            model: self.model.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendPolicy {
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_concurrency: usize,
    pub timeout_ms: u64,
}

impl Default for BackendPolicy {
    fn default() -> Self {
        Self { max_retries: 3, backoff_base_ms: 500, max_concurrency: 8, timeout_ms: 120_000 }
    }
}

impl BackendPolicy {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("max_retries", self.max_retries as u64),
            ("backoff_base_ms", self.backoff_base_ms),
            ("max_concurrency", self.max_concurrency as u64),
            ("timeout_ms", self.timeout_ms),
        ];
        for (field, value) in checks {
            if value == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

pub trait ChatBackend: Send + Sync {
    /// One attempt. Transient failures are reported as a retryable
    /// [`BackendError`]; prompts that do not fit as [`Error::ContextOverflow`].
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

pub trait EmbeddingBackend: Send + Sync {
    /// One vector per input text, all of the same dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (**self).complete(request)
    }
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        (**self).embed(texts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryRecord {
    pub attempt: u32,
    pub delay_ms: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub retries: Vec<RetryRecord>,
    pub cached: bool,
}

/// Counting semaphore.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|p| p.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

/// Delay before retry number `attempt` (1-based): `base * 2^(attempt-1)`
/// plus jitter drawn from `[0, half of that)`. Consecutive delays never
/// decrease since the next exponential step exceeds the largest jittered value.
pub fn backoff_delay_ms(base_ms: u64, attempt: u32, jitter_unit: f64) -> u64 {
    let exp = base_ms.saturating_mul(1u64 << (attempt.saturating_sub(1)).min(20));
    let jitter = (exp as f64 / 2.0 * jitter_unit.clamp(0.0, 0.999_999)) as u64;
    exp.saturating_add(jitter)
}

struct Governor {
    policy: BackendPolicy,
    limiter: Semaphore,
    rng: Mutex<ChaCha8Rng>,
    sleep: fn(Duration),
}

impl Governor {
    fn new(policy: BackendPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            limiter: Semaphore::new(policy.max_concurrency),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(0)),
            sleep: std::thread::sleep,
        })
    }

    fn run<T>(&self, mut call: impl FnMut() -> Result<T>) -> Result<(T, Vec<RetryRecord>)> {
        let mut retries = Vec::new();
        loop {
            let outcome = {
                let _permit = self.limiter.acquire();
                call()
            };
            match outcome {
                Ok(value) => return Ok((value, retries)),
                Err(Error::Backend(e)) if e.is_retryable() && (retries.len() as u32) < self.policy.max_retries => {
                    let attempt = retries.len() as u32 + 1;
                    let unit: f64 = self.rng.lock().unwrap_or_else(|p| p.into_inner()).random();
                    let delay_ms = backoff_delay_ms(self.policy.backoff_base_ms, attempt, unit);
                    log::debug!("retry {attempt} in {delay_ms} ms after: {e}");
                    retries.push(RetryRecord { attempt, delay_ms, error: e.to_string() });
                    (self.sleep)(Duration::from_millis(delay_ms));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Completed responses keyed by a hash of the full request, so only
/// byte-identical requests are deduplicated.
#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: Mutex<HashMap<[u8; 32], String>>,
    hits: AtomicUsize,
}

impl ResponseCache {
    fn key(request: &ChatRequest) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(request.model.as_bytes());
        h.update([0u8]);
        h.update(serde_json::to_vec(request).unwrap_or_default());
        h.finalize().into()
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Policy-governed chat client. Shareable across threads.
pub struct ChatClient {
    backend: Arc<dyn ChatBackend>,
    governor: Governor,
    cache: Option<Arc<ResponseCache>>,
}

impl ChatClient {
    pub fn new(backend: Arc<dyn ChatBackend>, policy: BackendPolicy) -> Result<Self> {
        Ok(Self { backend, governor: Governor::new(policy)?, cache: None })
    }

    /// Seed for the backoff jitter.
    pub fn with_seed(self, seed: u64) -> Self {
        *self.governor.rng.lock().unwrap_or_else(|p| p.into_inner()) = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Replace the sleep used between retries (tests record instead of waiting).
    pub fn with_sleeper(mut self, sleep: fn(Duration)) -> Self {
        self.governor.sleep = sleep;
        self
    }

    pub fn policy(&self) -> &BackendPolicy {
        &self.governor.policy
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_deref()
    }

    pub fn chat_complete(&self, request: &ChatRequest) -> Result<Completion> {
        request.validate()?;
        let key = self.cache.as_ref().map(|_| ResponseCache::key(request));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(text) = cache.entries.lock().unwrap_or_else(|p| p.into_inner()).get(key) {
                cache.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(Completion { text: text.clone(), retries: Vec::new(), cached: true });
            }
        }
        let (text, retries) = self.governor.run(|| self.backend.complete(request))?;
        if let (Some(cache), Some(key)) = (&self.cache, key) {
            cache.entries.lock().unwrap_or_else(|p| p.into_inner()).insert(key, text.clone());
        }
        Ok(Completion { text, retries, cached: false })
    }

    pub fn complete_text(&self, request: &ChatRequest) -> Result<String> {
        self.chat_complete(request).map(|c| c.text)
    }
}

/// Policy-governed embedding client with request batching.
pub struct EmbedClient {
    backend: Arc<dyn EmbeddingBackend>,
    governor: Governor,
    batch_size: usize,
}

impl EmbedClient {
    pub fn new(backend: Arc<dyn EmbeddingBackend>, policy: BackendPolicy) -> Result<Self> {
        Ok(Self { backend, governor: Governor::new(policy)?, batch_size: 32 })
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        if texts.is_empty() {
            return Err(Error::InvalidArgument("embed called with no texts".into()));
        }
        let batches: Vec<&[String]> = texts.chunks(self.batch_size).collect();
        let results = bounded_map(&batches, self.governor.policy.max_concurrency, |_, batch| {
            let (vectors, _) = self.governor.run(|| self.backend.embed(batch))?;
            if vectors.len() != batch.len() {
                return Err(Error::Backend(BackendError::fatal(
                    None,
                    format!("embedder returned {} vectors for {} inputs", vectors.len(), batch.len()),
                )));
            }
            Ok(vectors)
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        if let Some(dim) = out.first().map(Vec::len) {
            if out.iter().any(|v| v.len() != dim) {
                return Err(Error::Backend(BackendError::fatal(None, "embedding dimensions differ")));
            }
        }
        Ok(out)
    }
}

/// Apply `f` to every item with at most `bound` worker threads. Results are
/// returned in input order regardless of completion order.
pub fn bounded_map<I, O, F>(items: &[I], bound: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync,
{
    let workers = bound.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let out = f(i, item);
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|o| o.expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::mock::{InstrumentedChat, ScriptedChat, Scripted};
    use super::*;

    fn fast() -> BackendPolicy {
        BackendPolicy { max_retries: 3, backoff_base_ms: 1, max_concurrency: 4, timeout_ms: 1000 }
    }

    fn no_sleep(_: Duration) {}

    fn client(script: Vec<Scripted>) -> ChatClient {
        ChatClient::new(Arc::new(ScriptedChat::new(script)), fast()).unwrap().with_sleeper(no_sleep)
    }

    #[test]
    fn scripted_playback() {
        let c = client(vec![Scripted::reply("A")]);
        assert_eq!(c.complete_text(&ChatRequest::single("m", "q")).unwrap(), "A");
    }

    #[test]
    fn retries_then_succeeds() {
        let c = client(vec![Scripted::Transient, Scripted::Transient, Scripted::reply("ok")]);
        let out = c.chat_complete(&ChatRequest::single("m", "q")).unwrap();
        assert_eq!(out.text, "ok");
        assert_eq!(out.retries.len(), 2);
        assert!(out.retries[0].delay_ms <= out.retries[1].delay_ms);
    }

    #[test]
    fn retry_exhaustion() {
        let c = client(vec![Scripted::Transient; 4]);
        match c.chat_complete(&ChatRequest::single("m", "q")) {
            Err(Error::Backend(e)) => assert!(e.is_retryable()),
            other => panic!("expected backend error, got {other:?}"),
        }
    }

    #[test]
    fn fatal_and_overflow_not_retried() {
        let c = client(vec![Scripted::Fatal, Scripted::reply("late")]);
        assert!(matches!(c.chat_complete(&ChatRequest::single("m", "q")), Err(Error::Backend(_))));
        let c = client(vec![Scripted::Overflow, Scripted::reply("late")]);
        assert!(matches!(c.chat_complete(&ChatRequest::single("m", "q")), Err(Error::ContextOverflow(_))));
    }

    #[test]
    fn empty_request_rejected() {
        let c = client(vec![Scripted::reply("A")]);
        let mut req = ChatRequest::single("m", "q");
        req.messages.clear();
        assert!(matches!(c.chat_complete(&req), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn backoff_non_decreasing_for_all_jitter() {
        for a in 1..12u32 {
            let worst = backoff_delay_ms(100, a, 0.999_999);
            let best_next = backoff_delay_ms(100, a + 1, 0.0);
            assert!(worst <= best_next, "attempt {a}: {worst} > {best_next}");
        }
    }

    #[test]
    fn cache_deduplicates_identical_requests() {
        let cache = Arc::new(ResponseCache::default());
        let c = client(vec![Scripted::reply("first"), Scripted::reply("second")]).with_cache(cache.clone());
        let req = ChatRequest::single("m", "same");
        assert_eq!(c.complete_text(&req).unwrap(), "first");
        let again = c.chat_complete(&req).unwrap();
        assert!(again.cached);
        assert_eq!(again.text, "first");
        assert_eq!(c.complete_text(&ChatRequest::single("m", "other")).unwrap(), "second");
        assert_eq!(cache.hits(), 1);
    }

    #[test]
    fn concurrency_bound_respected() {
        let inner = Arc::new(ScriptedChat::new(vec![Scripted::reply("x")]).repeat_last());
        let probe = Arc::new(InstrumentedChat::new(inner, Duration::from_millis(5)));
        let policy = BackendPolicy { max_concurrency: 3, ..fast() };
        let c = ChatClient::new(probe.clone(), policy).unwrap();
        let reqs: Vec<_> = (0..24).map(|i| ChatRequest::single("m", format!("q{i}"))).collect();
        let out = bounded_map(&reqs, 12, |_, r| c.complete_text(r).unwrap());
        assert_eq!(out.len(), 24);
        assert!(probe.max_in_flight() <= 3, "saw {}", probe.max_in_flight());
        assert!(probe.max_in_flight() >= 2);
        assert_eq!(probe.calls(), 24);
    }

    #[test]
    fn bounded_map_preserves_order() {
        let xs: Vec<u32> = (0..100).collect();
        assert_eq!(bounded_map(&xs, 7, |_, &x| x * 2), xs.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn policy_validation() {
        let bad = BackendPolicy { max_concurrency: 0, ..BackendPolicy::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "max_concurrency"));
    }
}
