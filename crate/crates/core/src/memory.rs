//! Raw interaction history, organised as identifier-tagged sessions.
//!
//! A [`MemoryBank`] is append-only raw history: it is built once by
//! [`segment_history`] (or loaded from a JSON-lines bank file) and is
//! immutable afterwards, so it can be shared freely across threads.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
    Tool,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
    #[serde(default)]
    pub timestamp: Option<i64>,
}

impl Turn {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into(), timestamp: None }
    }

    pub fn at(mut self, timestamp: i64) -> Self {
        self.timestamp = Some(timestamp);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.content.trim().is_empty() {
            return Err(Error::InvalidArgument("turn content is empty".into()));
        }
        Ok(())
    }
}

/// Token counting strategy. The default is a chars/4 upper-bound heuristic;
/// an exact tokenizer can be plugged in by implementing this trait.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CharHeuristic;

impl TokenEstimator for CharHeuristic {
    fn estimate(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

/// `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    CharHeuristic.estimate(text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    id: u64,
    turns: Vec<Turn>,
    token_count: usize,
}

impl Session {
    pub fn new(id: u64, turns: Vec<Turn>) -> Result<Self> {
        Self::with_estimator(id, turns, &CharHeuristic)
    }

    pub fn with_estimator(id: u64, turns: Vec<Turn>, estimator: &dyn TokenEstimator) -> Result<Self> {
        if turns.is_empty() {
            return Err(Error::InvalidArgument(format!("session {id} has no turns")));
        }
        for turn in &turns {
            turn.validate()?;
        }
        let mut session = Self { id, turns, token_count: 0 };
        session.token_count = estimator.estimate(&session.render());
        Ok(session)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    /// `<session I>` block with one `role: content` line per turn.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out);
        out
    }

    pub(crate) fn render_into(&self, out: &mut String) {
        use fmt::Write as _;
        let _ = writeln!(out, "<session {}>", self.id);
        for turn in &self.turns {
            let _ = writeln!(out, "{}: {}", turn.role, turn.content);
        }
        out.push_str("</session>\n");
    }

    /// All turn text joined, without tags.
    pub fn plain_text(&self) -> String {
        self.turns.iter().map(|t| t.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MemoryBank {
    sessions: Vec<Session>,
    pub source: Option<String>,
}

impl MemoryBank {
    pub fn new(sessions: Vec<Session>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(sessions.len());
        for s in &sessions {
            if !seen.insert(s.id) {
                return Err(Error::Integrity(format!("duplicate session id {}", s.id)));
            }
        }
        Ok(Self { sessions, source: None })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Session> {
        self.sessions.iter().find(|s| s.id == id)
    }

    /// Bank-order position of a session id.
    pub fn position(&self, id: u64) -> Option<usize> {
        self.sessions.iter().position(|s| s.id == id)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.sessions.iter().map(|s| s.id).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.sessions.iter().map(|s| s.token_count).sum()
    }
}

/// How a flat turn stream is cut into sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SegmentationPolicy {
    /// Start a new session whenever the turn's session label changes.
    #[default]
    Boundaries,
    /// Start a new session when consecutive timestamps differ by more than `max_gap_secs`.
    TimeGap { max_gap_secs: i64 },
    /// Consecutive chunks of `turns` turns.
    FixedSize { turns: usize },
}

/// A turn as it arrives for ingestion, optionally labelled with the session
/// it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTurn {
    #[serde(flatten)]
    pub turn: Turn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
}

impl From<Turn> for HistoryTurn {
    fn from(turn: Turn) -> Self {
        Self { turn, session: None }
    }
}

/// Partition a turn stream into sessions with ids `0..N-1`, preserving order.
pub fn segment_history(turns: Vec<HistoryTurn>, policy: &SegmentationPolicy) -> Result<MemoryBank> {
    if turns.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if let SegmentationPolicy::FixedSize { turns: 0 } = policy {
        return Err(Error::InvalidArgument("fixed-size segmentation needs size >= 1".into()));
    }

    let mut groups: Vec<Vec<Turn>> = Vec::new();
    let mut current: Vec<Turn> = Vec::new();
    let mut label: Option<String> = None;
    let mut last_ts: Option<i64> = None;

    for HistoryTurn { turn, session } in turns {
        let split = !current.is_empty()
            && match policy {
                SegmentationPolicy::Boundaries => session.is_some() && session != label,
                SegmentationPolicy::TimeGap { max_gap_secs } => {
                    matches!((last_ts, turn.timestamp), (Some(a), Some(b)) if b - a > *max_gap_secs)
                }
                SegmentationPolicy::FixedSize { turns } => current.len() >= *turns,
            };
        if split {
            groups.push(std::mem::take(&mut current));
        }
        if session.is_some() {
            label = session;
        }
        if turn.timestamp.is_some() {
            last_ts = turn.timestamp;
        }
        current.push(turn);
    }
    groups.push(current);

    let sessions = groups
        .into_iter()
        .enumerate()
        .map(|(i, turns)| Session::new(i as u64, turns))
        .collect::<Result<Vec<_>>>()?;
    MemoryBank::new(sessions)
}

/// Read a JSON-lines turn stream for [`segment_history`].
pub fn load_history(path: impl AsRef<Path>) -> Result<Vec<HistoryTurn>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut turns = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        turns.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?);
    }
    Ok(turns)
}

/// Concatenated `<session I>…</session>` blocks in bank order.
pub fn render_sessions<'a>(sessions: impl IntoIterator<Item = &'a Session>) -> String {
    let mut out = String::new();
    for s in sessions {
        s.render_into(&mut out);
    }
    out
}

fn session_tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<session ?(\d+)>").expect("static regex"))
}

/// Session ids whose opening tag appears in `text`, in order of appearance.
/// Both `<session 3>` and `<session3>` are accepted.
pub fn parse_session_ids(text: &str) -> Vec<u64> {
    session_tag_regex()
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}

#[derive(Serialize, Deserialize)]
pub(crate) struct SessionRecord {
    pub id: u64,
    pub turns: Vec<Turn>,
}

impl From<&Session> for SessionRecord {
    fn from(s: &Session) -> Self {
        Self { id: s.id, turns: s.turns.clone() }
    }
}

impl TryFrom<SessionRecord> for Session {
    type Error = Error;

    fn try_from(r: SessionRecord) -> Result<Self> {
        Session::new(r.id, r.turns)
    }
}

pub(crate) fn sessions_from_records(records: Vec<SessionRecord>) -> Result<MemoryBank> {
    let sessions = records.into_iter().map(Session::try_from).collect::<Result<Vec<_>>>()?;
    MemoryBank::new(sessions)
}

/// Write a bank as JSON lines, one session per line.
pub fn save_bank(bank: &MemoryBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in bank.sessions() {
        serde_json::to_writer(&mut w, &SessionRecord::from(s))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_bank(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_bank(reader: impl BufRead) -> Result<MemoryBank> {
    let mut sessions = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<bank>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SessionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if !seen.insert(record.id) {
            return Err(Error::Integrity(format!("duplicate session id {} at line {line_no}", record.id)));
        }
        let session = Session::try_from(record)
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        sessions.push(session);
    }
    MemoryBank::new(sessions)
}
