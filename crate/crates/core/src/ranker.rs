//! Think-and-rank protocol: prompt assembly, proxy invocation and parsing
//! of `<think>…</think><ranking>id,id,…</ranking>` output.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backends::{ChatClient, EmbedClient, ModelParams};
use crate::error::{Error, Result};
use crate::memory::{render_sessions, MemoryBank};
use crate::prefilter::{prefilter, FilteredBank, PrefilterConfig};

pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/think_and_rank.txt");

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    body: String,
}

impl PromptTemplate {
    /// `{HISTORY}` and `{CONTEXT}` must each appear exactly once, `{TOP_K}`
    /// at least once.
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self> {
        let body = body.into();
        for key in ["{HISTORY}", "{CONTEXT}"] {
            match body.matches(key).count() {
                1 => {}
                0 => return Err(Error::Template(format!("missing placeholder {key}"))),
                n => return Err(Error::Template(format!("placeholder {key} appears {n} times"))),
            }
        }
        if !body.contains("{TOP_K}") {
            return Err(Error::Template("missing placeholder {TOP_K}".into()));
        }
        Ok(Self { name: name.into(), body })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(path.display().to_string(), body)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Single-pass substitution, so placeholder-like text inside the
    /// history or context is left untouched.
    pub fn render(&self, history: &str, context: &str, top_k: usize) -> String {
        static RE: OnceLock<Regex> = OnceLock::new();
        let re = RE.get_or_init(|| Regex::new(r"\{(HISTORY|CONTEXT|TOP_K)\}").expect("static regex"));
        let top_k = top_k.to_string();
        re.replace_all(&self.body, |c: &regex::Captures<'_>| match &c[1] {
            "HISTORY" => history.to_string(),
            "CONTEXT" => context.to_string(),
            _ => top_k.clone(),
        })
        .into_owned()
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new("think-and-rank", DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

/// Ranking prompt over the kept sessions, rendered in original bank order.
pub fn build_prompt(query: &str, filtered: &FilteredBank<'_>, template: &PromptTemplate, top_k: usize) -> Result<String> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let history = render_sessions(filtered.in_bank_order());
    Ok(template.render(&history, query, top_k))
}

/// A fix applied while reading a ranking block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Repair {
    Deduped,
    Truncated,
    /// The block listed fewer ids than requested; nothing was invented to fill it.
    PaddedNone,
    WhitespaceNormalized,
    DroppedNonNumeric,
    DroppedUnknownId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub rationale: String,
    pub ranked_ids: Vec<u64>,
    pub raw_output: String,
    pub repairs: Vec<Repair>,
}

impl RankingResult {
    /// Checks the structural guarantees every parsed ranking carries.
    pub fn check_invariants(&self, valid_ids: &BTreeSet<u64>, top_k: usize) -> std::result::Result<(), String> {
        let mut seen = BTreeSet::new();
        for id in &self.ranked_ids {
            if !seen.insert(id) {
                return Err(format!("duplicate id {id}"));
            }
            if !valid_ids.contains(id) {
                return Err(format!("id {id} not in the valid set"));
            }
        }
        if self.ranked_ids.is_empty() {
            return Err("empty ranking".into());
        }
        if self.ranked_ids.len() > top_k.min(valid_ids.len()) {
            return Err(format!("{} ids exceed min(top_k, |valid|)", self.ranked_ids.len()));
        }
        Ok(())
    }

    /// Canonical `<ranking>` block for these ids.
    pub fn ranking_block(&self) -> String {
        let ids: Vec<String> = self.ranked_ids.iter().map(u64::to_string).collect();
        format!("<ranking>{}</ranking>", ids.join(","))
    }
}

/// Content of the last complete `open…close` block.
fn last_block<'t>(text: &'t str, open: &str, close: &str) -> Option<&'t str> {
    let end = text.rfind(close)?;
    let start = text[..end].rfind(open)? + open.len();
    Some(&text[start..end])
}

fn rationale(raw: &str) -> String {
    if let Some(body) = last_block(raw, "<think>", "</think>") {
        return body.trim().to_string();
    }
    // Thinking models frequently omit the opening tag.
    match raw.rfind("</think>") {
        Some(end) => raw[..end].trim().to_string(),
        None => String::new(),
    }
}

/// Parse a proxy reply. Lenient mode repairs what it can and records each
/// repair; strict mode fails with [`Error::Format`] if any repair was needed.
pub fn parse_ranking(raw: &str, valid_ids: &BTreeSet<u64>, top_k: usize, strict: bool) -> Result<RankingResult> {
    if valid_ids.is_empty() {
        return Err(Error::InvalidArgument("valid id set is empty".into()));
    }
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let block = last_block(raw, "<ranking>", "</ranking>").ok_or(Error::MissingRanking)?;

    let mut repairs = Vec::new();
    let note = |r: Repair, repairs: &mut Vec<Repair>| {
        if !repairs.contains(&r) {
            repairs.push(r);
        }
    };

    let tokens: Vec<&str> = block.split(',').collect();
    let mut ids = Vec::with_capacity(tokens.len());
    let mut seen = BTreeSet::new();
    for token in &tokens {
        let trimmed = token.trim();
        if trimmed.len() != token.len() {
            note(Repair::WhitespaceNormalized, &mut repairs);
        }
        if trimmed.is_empty() || !trimmed.bytes().all(|b| b.is_ascii_digit()) {
            note(Repair::DroppedNonNumeric, &mut repairs);
            continue;
        }
        let Ok(id) = trimmed.parse::<u64>() else {
            note(Repair::DroppedNonNumeric, &mut repairs);
            continue;
        };
        if !valid_ids.contains(&id) {
            note(Repair::DroppedUnknownId, &mut repairs);
            continue;
        }
        if !seen.insert(id) {
            note(Repair::Deduped, &mut repairs);
            continue;
        }
        ids.push(id);
    }
    let wanted = top_k.min(valid_ids.len());
    if ids.len() > wanted {
        ids.truncate(wanted);
        note(Repair::Truncated, &mut repairs);
    }
    if tokens.len() < wanted {
        note(Repair::PaddedNone, &mut repairs);
    }
    if ids.is_empty() {
        return Err(Error::MissingRanking);
    }
    if strict && !repairs.is_empty() {
        return Err(Error::Format { repairs });
    }
    Ok(RankingResult { rationale: rationale(raw), ranked_ids: ids, raw_output: raw.to_string(), repairs })
}

/// Everything a ranking call produced, including what a trainer needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOutput {
    pub ranking: RankingResult,
    pub prompt: String,
    pub dropped_ids: Vec<u64>,
    pub attempts: usize,
}

/// Prefilter → prompt → proxy → lenient parse.
pub struct Ranker<'c> {
    pub proxy: &'c ChatClient,
    pub embedder: Option<&'c EmbedClient>,
    pub params: ModelParams,
    pub template: PromptTemplate,
    pub prefilter: PrefilterConfig,
    pub top_k: usize,
    pub strict: bool,
}

impl<'c> Ranker<'c> {
    pub fn new(proxy: &'c ChatClient) -> Self {
        Self {
            proxy,
            embedder: None,
            params: ModelParams { temperature: 1.0, max_output_tokens: 16_384, ..ModelParams::default() },
            template: PromptTemplate::default(),
            prefilter: PrefilterConfig::default(),
            top_k: DEFAULT_TOP_K,
            strict: false,
        }
    }

    pub fn filter<'b>(&self, query: &str, bank: &'b MemoryBank) -> Result<FilteredBank<'b>> {
        if bank.is_empty() {
            return Err(Error::InvalidArgument("cannot rank an empty bank".into()));
        }
        match (self.prefilter.enabled, self.embedder) {
            (true, Some(embedder)) => prefilter(query, bank, self.prefilter.budget_tokens, embedder),
            (true, None) if bank.total_tokens() > self.prefilter.budget_tokens => Err(Error::InvalidArgument(
                "bank exceeds the proxy budget and no embedder is configured".into(),
            )),
            _ => Ok(FilteredBank::identity(bank, self.prefilter.budget_tokens)),
        }
    }

    /// Ranks `bank` for `query`. A reply without a usable ranking block is
    /// retried once with the same prompt.
    pub fn rank(&self, query: &str, bank: &MemoryBank) -> Result<RankOutput> {
        let filtered = self.filter(query, bank)?;
        let prompt = build_prompt(query, &filtered, &self.template, self.top_k)?;
        let valid: BTreeSet<u64> = filtered.kept_ids().into_iter().collect();
        let request = self.params.request(prompt.clone());
        let mut attempts = 0;
        loop {
            attempts += 1;
            let raw = self.proxy.complete_text(&request)?;
            match parse_ranking(&raw, &valid, self.top_k, self.strict) {
                Ok(ranking) => {
                    return Ok(RankOutput { ranking, prompt, dropped_ids: filtered.dropped_ids, attempts })
                }
                Err(Error::MissingRanking) if attempts < 2 => {
                    log::warn!("proxy output had no ranking block; retrying once");
                }
                Err(e) => return Err(e),
            }
        }
    }
}
