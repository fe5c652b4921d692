//! Deterministic backends for tests, CI and offline runs.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::{ChatBackend, ChatRequest, EmbeddingBackend};
use crate::answer::extract_question;
use crate::error::{BackendError, Error, Result};
use crate::memory::parse_session_ids;
use crate::text::{fnv1a, is_stopword, keyword_overlap, tokenize};

/// One scripted reaction of a [`ScriptedChat`].
#[derive(Debug, Clone, PartialEq)]
pub enum Scripted {
    Reply(String),
    Transient,
    Fatal,
    Overflow,
}

impl Scripted {
    pub fn reply(text: impl Into<String>) -> Self {
        Scripted::Reply(text.into())
    }

    fn realize(&self) -> Result<String> {
        match self {
            Scripted::Reply(t) => Ok(t.clone()),
            Scripted::Transient => Err(Error::Backend(BackendError::transient(Some(503), "scripted transient failure"))),
            Scripted::Fatal => Err(Error::Backend(BackendError::fatal(Some(400), "scripted fatal failure"))),
            Scripted::Overflow => Err(Error::ContextOverflow("scripted overflow".into())),
        }
    }
}

/// Plays back a fixed queue of reactions, one per call.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    queue: Mutex<VecDeque<Scripted>>,
    last: Mutex<Option<Scripted>>,
    repeat_last: bool,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new(script: Vec<Scripted>) -> Self {
        Self { queue: Mutex::new(script.into()), ..Self::default() }
    }

    /// Always answer with `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        Self::new(vec![Scripted::reply(text)]).repeat_last()
    }

    /// Keep replaying the final entry once the queue is drained.
    pub fn repeat_last(mut self) -> Self {
        self.repeat_last = true;
        self
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.seen.lock().unwrap().push(request.clone());
        let next = self.queue.lock().unwrap().pop_front();
        let mut last = self.last.lock().unwrap();
        let step = match next {
            Some(s) => {
                *last = Some(s.clone());
                s
            }
            None if self.repeat_last && last.is_some() => last.clone().unwrap(),
            None => return Err(Error::Backend(BackendError::fatal(None, "script exhausted"))),
        };
        step.realize()
    }
}

fn session_block_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<session ?(\d+)>(.*?)</session>").expect("static regex"))
}

fn top_k_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"top (\d+) most relevant").expect("static regex"))
}

/// `(id, body)` of every closed session block in a prompt.
pub fn prompt_sessions(prompt: &str) -> Vec<(u64, String)> {
    session_block_regex()
        .captures_iter(prompt)
        .filter_map(|c| Some((c[1].parse().ok()?, c[2].to_string())))
        .collect()
}

/// The chat-context paragraph of a ranking prompt.
pub fn prompt_context(prompt: &str) -> Option<&str> {
    const MARKER: &str = "Current Chat Context:";
    let start = prompt.find(MARKER)? + MARKER.len();
    let rest = &prompt[start..];
    Some(rest[..rest.find("\n\n").unwrap_or(rest.len())].trim())
}

fn prompt_top_k(prompt: &str) -> usize {
    top_k_regex()
        .captures(prompt)
        .and_then(|c| c[1].parse().ok())
        .unwrap_or(10)
}

fn format_ranking(think: &str, ids: &[u64]) -> String {
    let list: Vec<String> = ids.iter().map(u64::to_string).collect();
    format!("<think>{think}</think><ranking>{}</ranking>", list.join(","))
}

/// Proxy stand-in that ranks sessions by distinct content-word overlap with
/// the chat context, ties broken by lower id. The adversarial variant emits
/// the reverse order, putting the best match last.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeywordProxy {
    adversarial: bool,
}

impl KeywordProxy {
    pub fn new() -> Self {
        Self { adversarial: false }
    }

    pub fn adversarial() -> Self {
        Self { adversarial: true }
    }

    pub fn ranking_for(&self, prompt: &str) -> Vec<u64> {
        let context = prompt_context(prompt).unwrap_or("");
        let mut scored: Vec<(usize, u64)> = prompt_sessions(prompt)
            .into_iter()
            .map(|(id, body)| (keyword_overlap(context, &body), id))
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        if self.adversarial {
            scored.reverse();
        }
        scored.truncate(prompt_top_k(prompt));
        scored.into_iter().map(|(_, id)| id).collect()
    }
}

impl ChatBackend for KeywordProxy {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let ids = self.ranking_for(request.last_content());
        Ok(format_ranking("ranked by keyword overlap with the chat context", &ids))
    }
}

/// Proxy stand-in that emits a seeded random permutation; successive calls
/// differ, so it can produce diverse rollout groups.
#[derive(Debug)]
pub struct RandomProxy {
    seed: u64,
    calls: AtomicU64,
}

impl RandomProxy {
    pub fn new(seed: u64) -> Self {
        Self { seed, calls: AtomicU64::new(0) }
    }
}

impl ChatBackend for RandomProxy {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let prompt = request.last_content();
        let call = self.calls.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(prompt.as_bytes()) ^ call.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut ids: Vec<u64> = prompt_sessions(prompt).into_iter().map(|(id, _)| id).collect();
        ids.shuffle(&mut rng);
        ids.truncate(prompt_top_k(prompt));
        Ok(format_ranking("random order", &ids))
    }
}

pub const ORACLE_WRONG_ANSWER: &str = "unknown";

/// Gold answer iff any gold session's tag appears in `context`.
pub fn oracle_answer(context: &str, gold_session_ids: &BTreeSet<u64>, gold_answer: &str) -> String {
    if parse_session_ids(context).iter().any(|id| gold_session_ids.contains(id)) {
        gold_answer.to_string()
    } else {
        ORACLE_WRONG_ANSWER.to_string()
    }
}

#[derive(Debug, Clone)]
struct OracleFact {
    gold_session_ids: BTreeSet<u64>,
    answer: String,
}

/// Working-model stand-in that answers correctly exactly when a gold
/// session for the asked question is present in its prompt.
#[derive(Debug, Default)]
pub struct OracleWorkingLlm {
    facts: RwLock<HashMap<String, OracleFact>>,
}

impl OracleWorkingLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, question: &str, gold_session_ids: BTreeSet<u64>, answer: impl Into<String>) {
        self.facts
            .write()
            .unwrap()
            .insert(question.trim().to_string(), OracleFact { gold_session_ids, answer: answer.into() });
    }
}

impl ChatBackend for OracleWorkingLlm {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let prompt = request.last_content();
        let facts = self.facts.read().unwrap();
        let fact = extract_question(prompt).and_then(|q| facts.get(q));
        Ok(match fact {
            Some(f) => oracle_answer(prompt, &f.gold_session_ids, &f.answer),
            None => ORACLE_WRONG_ANSWER.to_string(),
        })
    }
}

/// Bag-of-words embedder: content-word counts over either an explicit
/// vocabulary or hashed buckets, L2-normalised. Empty text maps to the zero
/// vector.
#[derive(Debug, Clone)]
pub struct KeywordEmbedder {
    dim: usize,
    vocabulary: Option<HashMap<String, usize>>,
}

impl KeywordEmbedder {
    pub fn hashed(dim: usize) -> Self {
        Self { dim: dim.max(1), vocabulary: None }
    }

    pub fn with_vocabulary<S: AsRef<str>>(words: &[S]) -> Self {
        let vocabulary: HashMap<String, usize> = words
            .iter()
            .map(|w| w.as_ref().to_lowercase())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w, i))
            .collect();
        Self { dim: vocabulary.len().max(1), vocabulary: Some(vocabulary) }
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for token in tokenize(text).iter().filter(|t| !is_stopword(t)) {
            let slot = match &self.vocabulary {
                Some(vocab) => vocab.get(token).copied(),
                None => Some((fnv1a(token.as_bytes()) % self.dim as u64) as usize),
            };
            if let Some(i) = slot {
                v[i] += 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Default for KeywordEmbedder {
    fn default() -> Self {
        Self::hashed(4096)
    }
}

impl EmbeddingBackend for KeywordEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Wraps a backend and records peak concurrent calls.
pub struct InstrumentedChat {
    inner: Arc<dyn ChatBackend>,
    delay: Duration,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl InstrumentedChat {
    pub fn new(inner: Arc<dyn ChatBackend>, delay: Duration) -> Self {
        Self {
            inner,
            delay,
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for InstrumentedChat {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(self.delay);
        let out = self.inner.complete(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::cosine;

    #[test]
    fn keyword_embedder_deterministic_and_ordered() {
        let e = KeywordEmbedder::default();
        assert_eq!(e.vector("budget tool"), e.vector("budget tool"));
        let q = e.vector("budget tool");
        let near = cosine(&q, &e.vector("budgeting tool setup"));
        let far = cosine(&q, &e.vector("harry potter"));
        assert!(near > far, "{near} vs {far}");
        // shared term "tool": 1 / (sqrt 2 * sqrt 3)
        assert!((near - 1.0 / 6f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        assert!(KeywordEmbedder::default().vector("").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vocabulary_embedder_ignores_unknown_words() {
        let e = KeywordEmbedder::with_vocabulary(&["alpha", "beta"]);
        assert_eq!(e.dimension(), 2);
        assert_eq!(e.vector("alpha gamma"), vec![1.0, 0.0]);
    }

    #[test]
    fn oracle_definition() {
        let gold: BTreeSet<u64> = [7].into();
        assert_eq!(oracle_answer("x <session 7> y", &gold, "Oahu"), "Oahu");
        assert_eq!(oracle_answer("x <session 8> y", &gold, "Oahu"), ORACLE_WRONG_ANSWER);
    }

    #[test]
    fn keyword_proxy_ranks_overlap() {
        let prompt = "Historical Interaction Information: <session 0>\nuser: pizza recipe\n</session>\n\
                      <session 1>\nuser: budget spreadsheet tool\n</session>\n<session 2>\nuser: budget\n</session>\n\n\
                      Current Chat Context: help me with a budget tool\n\nthe top 10 most relevant";
        assert_eq!(KeywordProxy::new().ranking_for(prompt), vec![1, 2, 0]);
        assert_eq!(KeywordProxy::adversarial().ranking_for(prompt), vec![0, 2, 1]);
    }

    #[test]
    fn random_proxy_seeded() {
        let prompt = "<session 0>a</session><session 1>b</session><session 2>c</session> top 2 most relevant";
        let req = ChatRequest::single("m", prompt);
        let a = RandomProxy::new(5);
        let b = RandomProxy::new(5);
        for _ in 0..3 {
            assert_eq!(a.complete(&req).unwrap(), b.complete(&req).unwrap());
        }
    }
}
