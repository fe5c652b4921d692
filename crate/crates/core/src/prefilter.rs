//! Coarse embedding pre-filter that shrinks an over-budget bank to the
//! proxy's context window. Kept sessions retain their full content.

use serde::{Deserialize, Serialize};

use crate::backends::EmbedClient;
use crate::error::{Error, Result};
use crate::memory::{MemoryBank, Session};
use crate::scalar::cosine;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefilterConfig {
    pub enabled: bool,
    pub budget_tokens: usize,
}

impl Default for PrefilterConfig {
    fn default() -> Self {
        Self { enabled: true, budget_tokens: 131_072 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeptSession<'a> {
    pub session: &'a Session,
    /// Cosine similarity to the query; `None` when the bank fit the budget
    /// and no embedding was computed.
    pub similarity: Option<f64>,
    /// Position in the source bank.
    pub bank_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredBank<'a> {
    /// Similarity-descending (bank order when nothing was embedded).
    pub kept: Vec<KeptSession<'a>>,
    pub dropped_ids: Vec<u64>,
    pub budget_tokens: usize,
    pub warnings: Vec<String>,
}

impl<'a> FilteredBank<'a> {
    /// Every session of `bank`, no embedding performed.
    pub fn identity(bank: &'a MemoryBank, budget_tokens: usize) -> Self {
        Self {
            kept: bank
                .sessions()
                .iter()
                .enumerate()
                .map(|(bank_index, session)| KeptSession { session, similarity: None, bank_index })
                .collect(),
            dropped_ids: Vec::new(),
            budget_tokens,
            warnings: Vec::new(),
        }
    }

    pub fn kept_ids(&self) -> Vec<u64> {
        self.kept.iter().map(|k| k.session.id()).collect()
    }

    /// Kept sessions in original bank order.
    pub fn in_bank_order(&self) -> Vec<&'a Session> {
        let mut kept: Vec<&KeptSession<'a>> = self.kept.iter().collect();
        kept.sort_by_key(|k| k.bank_index);
        kept.into_iter().map(|k| k.session).collect()
    }

    pub fn kept_tokens(&self) -> usize {
        self.kept.iter().map(|k| k.session.token_count()).sum()
    }
}

/// Keep every session when the bank fits `budget_tokens`; otherwise rank
/// sessions by cosine similarity to `query` (ties: lower id first) and keep
/// the longest prefix that fits, never fewer than one session.
pub fn prefilter<'a>(
    query: &str,
    bank: &'a MemoryBank,
    budget_tokens: usize,
    embedder: &EmbedClient,
) -> Result<FilteredBank<'a>> {
    if budget_tokens == 0 {
        return Err(Error::InvalidArgument("prefilter budget must be positive".into()));
    }
    if bank.is_empty() {
        return Err(Error::InvalidArgument("cannot prefilter an empty bank".into()));
    }
    if bank.total_tokens() <= budget_tokens {
        return Ok(FilteredBank::identity(bank, budget_tokens));
    }

    let mut texts = Vec::with_capacity(bank.len() + 1);
    texts.push(query.to_string());
    texts.extend(bank.sessions().iter().map(Session::plain_text));
    let vectors = embedder.embed(&texts)?;
    let (query_vec, session_vecs) = vectors.split_first().expect("query vector present");

    let mut warnings = Vec::new();
    let zero = |v: &[f32]| v.iter().all(|&x| x == 0.0);
    if zero(query_vec) {
        warnings.push("query embedding has zero norm; all similarities set to 0".to_string());
    }
    let mut scored: Vec<KeptSession<'a>> = bank
        .sessions()
        .iter()
        .zip(session_vecs)
        .enumerate()
        .map(|(bank_index, (session, v))| {
            if zero(v) {
                warnings.push(format!("session {} embedding has zero norm; similarity set to 0", session.id()));
            }
            let a: Vec<f64> = query_vec.iter().map(|&x| f64::from(x)).collect();
            let b: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
            KeptSession { session, similarity: Some(cosine(&a, &b)), bank_index }
        })
        .collect();
    scored.sort_by(|x, y| {
        let (sx, sy) = (x.similarity.unwrap_or(0.0), y.similarity.unwrap_or(0.0));
        sy.total_cmp(&sx).then(x.session.id().cmp(&y.session.id()))
    });

    let mut used = 0usize;
    let mut cut = scored.len();
    for (i, k) in scored.iter().enumerate() {
        let next = used + k.session.token_count();
        if next > budget_tokens && i > 0 {
            cut = i;
            break;
        }
        used = next;
    }
    let dropped = scored.split_off(cut);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(FilteredBank {
        kept: scored,
        dropped_ids: dropped.iter().map(|k| k.session.id()).collect(),
        budget_tokens,
        warnings,
    })
}
