//! Datasets, a templated synthetic benchmark with planted gold sessions and
//! semantic distractors, and end-to-end evaluation.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::answer;
use crate::backends::mock::{KeywordEmbedder, KeywordProxy, OracleWorkingLlm, RandomProxy};
use crate::backends::{bounded_map, ChatBackend, ChatClient, EmbedClient, HttpChat, HttpEmbedder};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::memory::{load_bank, sessions_from_records, MemoryBank, Role, Session, SessionRecord, Turn};
use crate::ranker::Ranker;
use crate::reward::{recall_at, retrieval_reward_ndcg, score_answer_f1, RewardBreakdown, RewardEngine};

/// Where a task's bank came from; decides how it is written back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BankRef {
    Inline,
    /// As written in the dataset, relative to the dataset file.
    Path(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub gold_session_ids: Option<BTreeSet<u64>>,
    pub bank: Arc<MemoryBank>,
    pub bank_ref: BankRef,
}

impl Task {
    pub fn new(
        task_id: impl Into<String>,
        question: impl Into<String>,
        gold_answers: Vec<String>,
        gold_session_ids: Option<BTreeSet<u64>>,
        bank: Arc<MemoryBank>,
    ) -> Result<Self> {
        let task = Self {
            task_id: task_id.into(),
            question: question.into(),
            gold_answers,
            gold_session_ids,
            bank,
            bank_ref: BankRef::Inline,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("task {}: {m}", self.task_id)));
        if self.task_id.trim().is_empty() {
            return bad("empty task_id".into());
        }
        if self.question.trim().is_empty() {
            return bad("empty question".into());
        }
        if self.gold_answers.is_empty() {
            return bad("gold_answers is empty".into());
        }
        if self.bank.is_empty() {
            return bad("bank is empty".into());
        }
        if let Some(gold) = &self.gold_session_ids {
            if let Some(id) = gold.iter().find(|id| self.bank.get(**id).is_none()) {
                return bad(format!("gold session {id} not in bank"));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BankSpec {
    Path { path: String },
    Inline(Vec<SessionRecord>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    task_id: String,
    question: String,
    gold_answers: Vec<String>,
    #[serde(default)]
    gold_session_ids: Option<BTreeSet<u64>>,
    bank: BankSpec,
}

impl From<&Task> for TaskRecord {
    fn from(t: &Task) -> Self {
        Self {
            task_id: t.task_id.clone(),
            question: t.question.clone(),
            gold_answers: t.gold_answers.clone(),
            gold_session_ids: t.gold_session_ids.clone(),
            bank: match &t.bank_ref {
                BankRef::Path(path) => BankSpec::Path { path: path.clone() },
                BankRef::Inline => BankSpec::Inline(t.bank.sessions().iter().map(SessionRecord::from).collect()),
            },
        }
    }
}

fn task_from_record(
    record: TaskRecord,
    index: usize,
    base: &Path,
    banks: &mut HashMap<PathBuf, Arc<MemoryBank>>,
) -> Result<Task> {
    let fail = |message: String| Error::TaskParse { index, message };
    let (bank, bank_ref) = match record.bank {
        BankSpec::Inline(sessions) => (Arc::new(sessions_from_records(sessions).map_err(|e| fail(e.to_string()))?), BankRef::Inline),
        BankSpec::Path { path: rel } => {
            let full = base.join(&rel);
            let bank = match banks.get(&full) {
                Some(b) => b.clone(),
                None => {
                    let b = Arc::new(load_bank(&full).map_err(|e| fail(format!("bank {rel}: {e}")))?);
                    banks.insert(full, b.clone());
                    b
                }
            };
            (bank, BankRef::Path(rel))
        }
    };
    let mut task = Task::new(record.task_id, record.question, record.gold_answers, record.gold_session_ids, bank)
        .map_err(|e| fail(e.to_string()))?;
    task.bank_ref = bank_ref;
    Ok(task)
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Parse a JSON-lines dataset. Bank paths are resolved relative to the
/// dataset file and each distinct file is loaded once.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Task>> {
    let path = path.as_ref();
    let base = parent_dir(path);
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut banks = HashMap::new();
    let mut ids = BTreeSet::new();
    let mut tasks = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let index = tasks.len();
        let record: TaskRecord =
            serde_json::from_str(&line).map_err(|e| Error::TaskParse { index, message: e.to_string() })?;
        if !ids.insert(record.task_id.clone()) {
            return Err(Error::TaskParse { index, message: format!("duplicate task_id {}", record.task_id) });
        }
        tasks.push(task_from_record(record, index, &base, &mut banks)?);
    }
    Ok(tasks)
}

/// A single task stored as one JSON document.
pub fn load_task(path: impl AsRef<Path>) -> Result<Task> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let record: TaskRecord =
        serde_json::from_str(&text).map_err(|e| Error::TaskParse { index: 0, message: e.to_string() })?;
    task_from_record(record, 0, &parent_dir(path), &mut HashMap::new())
}

/// JSON document for a single task.
pub fn task_to_json(task: &Task) -> Result<String> {
    Ok(serde_json::to_string_pretty(&TaskRecord::from(task))?)
}

/// JSON-lines text of a dataset.
pub fn dataset_to_jsonl(tasks: &[Task]) -> Result<String> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(&TaskRecord::from(t))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(tasks: &[Task], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_jsonl(tasks)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_tasks: usize,
    pub n_sessions: usize,
    pub n_gold: usize,
    /// Fraction of non-gold sessions that are distractors; the rest are filler.
    pub distractor_ratio: f64,
    pub seed: u64,
    /// Turns per filler session.
    pub filler_turns: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { n_tasks: 50, n_sessions: 24, n_gold: 1, distractor_ratio: 0.5, seed: 42, filler_turns: 4 }
    }
}

const ENTITIES: &[&str] = &[
    "Marisol", "Quentin", "Ottilie", "Bartholomew", "Ingrid", "Thaddeus", "Leocadia", "Florian", "Wilhelmina",
    "Cornelius", "Esperanza", "Lysander", "Philippa", "Ignatius", "Rosalind", "Barnaby", "Seraphina", "Evander",
    "Genevieve", "Ambrose", "Clementine", "Percival", "Henrietta", "Octavius", "Beatrix", "Leopold", "Mirabel",
    "Casimir", "Isadora", "Desmond",
];

/// Attribute phrases share no words with each other, so a session about a
/// different attribute of the same entity never matches every query term.
const ATTRIBUTES: &[(&str, &[&str])] = &[
    ("favorite color", &["teal", "amber", "crimson", "indigo", "ochre", "magenta"]),
    ("hometown", &["Lisbon", "Oslo", "Tbilisi", "Valparaiso", "Ljubljana", "Porto"]),
    ("pet name", &["Biscuit", "Pickles", "Waffles", "Noodle", "Sprocket", "Juniper"]),
    ("signature dish", &["paella", "moussaka", "pierogi", "ceviche", "goulash", "risotto"]),
    ("employer", &["Brightwave", "Norcastle", "Halvorsen", "Quillon", "Tessaract", "Vantora"]),
    ("instrument", &["cello", "oboe", "banjo", "harpsichord", "accordion", "sitar"]),
    ("preferred sport", &["fencing", "curling", "lacrosse", "rowing", "badminton", "squash"]),
    ("car model", &["Corolla", "Outback", "Civic", "Golf", "Leaf", "Miata"]),
    ("birth month", &["January", "March", "June", "August", "October", "December"]),
    ("allergy", &["peanuts", "shellfish", "pollen", "latex", "gluten", "penicillin"]),
];

/// Filler vocabulary is disjoint from entities, attributes and answers.
const FILLER_TOPICS: &[&str] = &[
    "gardening", "weather", "groceries", "laundry", "podcasts", "traffic", "plumbing", "recycling", "crossword",
    "houseplants", "sunsets", "stationery", "compost", "carpooling", "origami", "thunderstorms", "spreadsheets",
    "birdwatching", "ferries", "lanterns",
];

const FILLER_USER: &[&str] = &[
    "Lately I keep thinking about {a} and {b}.",
    "Any tips on {a}? Also curious about {b}.",
    "Yesterday was mostly {a}, then some {b}.",
    "Could you summarize news on {a} versus {b}?",
];

const FILLER_ASSISTANT: &[&str] = &[
    "Sure, {a} can be relaxing, and {b} too.",
    "Happy to help with {a}; {b} comes up often.",
    "Noted. {a} first, {b} afterwards.",
];

fn fill(template: &str, a: &str, b: &str) -> String {
    template.replace("{a}", a).replace("{b}", b)
}

fn fact_session(entity: &str, attribute: &str, value: &str, variant: usize) -> Vec<Turn> {
    let user = match variant % 2 {
        0 => format!("Quick note about {entity}: the {attribute} of {entity} is {value}."),
        _ => format!("Reminder, {entity} confirmed again that the {attribute} is {value}."),
    };
    vec![Turn::new(Role::User, user), Turn::new(Role::Assistant, "Got it, saved for later.")]
}

fn filler_session(rng: &mut ChaCha8Rng, turns: usize) -> Vec<Turn> {
    (0..turns.max(1))
        .map(|i| {
            let a = FILLER_TOPICS.choose(rng).expect("non-empty");
            let b = FILLER_TOPICS.choose(rng).expect("non-empty");
            if i % 2 == 0 {
                Turn::new(Role::User, fill(FILLER_USER.choose(rng).expect("non-empty"), a, b))
            } else {
                Turn::new(Role::Assistant, fill(FILLER_ASSISTANT.choose(rng).expect("non-empty"), a, b))
            }
        })
        .collect()
}

fn other_value<'a>(rng: &mut ChaCha8Rng, values: &[&'a str], not: &str) -> &'a str {
    let pool: Vec<&str> = values.iter().copied().filter(|v| *v != not).collect();
    pool.choose(rng).expect("every attribute has several values")
}

/// Deterministic synthetic tasks. Each bank holds `n_gold` sessions stating
/// the answer, distractors that share the entity or the attribute but state a
/// different value, and filler sessions on unrelated topics.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Task>> {
    let invalid = |m: &str| Err(Error::InvalidArgument(m.to_string()));
    if cfg.n_tasks == 0 {
        return invalid("n_tasks must be at least 1");
    }
    if cfg.n_gold == 0 || cfg.n_gold > cfg.n_sessions {
        return invalid("n_gold must be in 1..=n_sessions");
    }
    if !(0.0..=1.0).contains(&cfg.distractor_ratio) {
        return invalid("distractor_ratio must be in [0, 1]");
    }
    let combos = ENTITIES.len() * ATTRIBUTES.len();
    if cfg.n_tasks > combos {
        return Err(Error::InvalidArgument(format!("at most {combos} distinct synthetic tasks")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs: Vec<(usize, usize)> = (0..ENTITIES.len()).flat_map(|e| (0..ATTRIBUTES.len()).map(move |a| (e, a))).collect();
    pairs.shuffle(&mut rng);

    let non_gold = cfg.n_sessions - cfg.n_gold;
    let n_distractors = ((non_gold as f64) * cfg.distractor_ratio).round() as usize;
    let width = cfg.n_tasks.to_string().len().max(3);

    pairs
        .into_iter()
        .take(cfg.n_tasks)
        .enumerate()
        .map(|(t, (e, a))| {
            let entity = ENTITIES[e];
            let (attribute, values) = ATTRIBUTES[a];
            let value = *values.choose(&mut rng).expect("non-empty");

            let mut bodies: Vec<(bool, Vec<Turn>)> = (0..cfg.n_gold)
                .map(|g| (true, fact_session(entity, attribute, value, g)))
                .collect();
            for d in 0..n_distractors {
                let turns = if d % 2 == 0 {
                    let other = *ENTITIES.iter().filter(|x| **x != entity).collect::<Vec<_>>().choose(&mut rng).expect("non-empty");
                    fact_session(other, attribute, other_value(&mut rng, values, value), rng.random_range(0..2))
                } else {
                    let (attr2, values2) = *ATTRIBUTES.iter().filter(|(x, _)| *x != attribute).collect::<Vec<_>>().choose(&mut rng).expect("non-empty");
                    fact_session(entity, attr2, other_value(&mut rng, values2, value), rng.random_range(0..2))
                };
                bodies.push((false, turns));
            }
            while bodies.len() < cfg.n_sessions {
                bodies.push((false, filler_session(&mut rng, cfg.filler_turns)));
            }
            bodies.shuffle(&mut rng);

            let mut gold = BTreeSet::new();
            let sessions = bodies
                .into_iter()
                .enumerate()
                .map(|(i, (is_gold, turns))| {
                    if is_gold {
                        gold.insert(i as u64);
                    }
                    Session::new(i as u64, turns)
                })
                .collect::<Result<Vec<_>>>()?;
            Task::new(
                format!("syn-{t:0width$}"),
                format!("What is the {attribute} of {entity}?"),
                vec![value.to_string()],
                Some(gold),
                Arc::new(MemoryBank::new(sessions)?),
            )
        })
        .collect()
}

/// Proxy, working model and optional embedder used by an evaluation run.
pub struct Backends {
    pub proxy: ChatClient,
    pub working: ChatClient,
    pub embedder: Option<EmbedClient>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockProxy {
    Keyword,
    /// Keyword order reversed, so the best match comes last.
    Adversarial,
    Random { seed: u64 },
}

impl Backends {
    /// Offline stand-ins: a mock proxy, an oracle working model primed with
    /// every task's gold sessions and first gold answer, and a keyword embedder.
    pub fn mock(tasks: &[Task], proxy: MockProxy, cfg: &PipelineConfig) -> Result<Self> {
        let proxy: Arc<dyn ChatBackend> = match proxy {
            MockProxy::Keyword => Arc::new(KeywordProxy::new()),
            MockProxy::Adversarial => Arc::new(KeywordProxy::adversarial()),
            MockProxy::Random { seed } => Arc::new(RandomProxy::new(seed)),
        };
        let oracle = OracleWorkingLlm::new();
        for t in tasks {
            oracle.register(&t.question, t.gold_session_ids.clone().unwrap_or_default(), t.gold_answers[0].clone());
        }
        Ok(Self {
            proxy: ChatClient::new(proxy, cfg.proxy.policy)?,
            working: ChatClient::new(Arc::new(oracle), cfg.working.policy)?,
            embedder: Some(EmbedClient::new(Arc::new(KeywordEmbedder::default()), cfg.embedding.policy)?),
        })
    }

    /// HTTP backends configured from the environment.
    pub fn http(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            proxy: ChatClient::new(Arc::new(HttpChat::from_env(cfg.proxy.policy.timeout())?), cfg.proxy.policy)?,
            working: ChatClient::new(Arc::new(HttpChat::from_env(cfg.working.policy.timeout())?), cfg.working.policy)?,
            embedder: Some(
                EmbedClient::new(
                    Arc::new(HttpEmbedder::from_env(&cfg.embedding.model, cfg.embedding.policy.timeout())?),
                    cfg.embedding.policy,
                )?
                .with_batch_size(cfg.embedding.batch_size),
            ),
        })
    }

    pub fn ranker(&self, cfg: &PipelineConfig) -> Ranker<'_> {
        let mut r = Ranker::new(&self.proxy);
        r.embedder = self.embedder.as_ref();
        r.params = cfg.proxy.params();
        r.prefilter = cfg.prefilter();
        r.top_k = cfg.top_k;
        r.strict = cfg.strict_parsing;
        r
    }

    pub fn reward_engine(&self, cfg: &PipelineConfig) -> RewardEngine<'_> {
        RewardEngine::new(&self.working, cfg.working.params(), cfg.reward())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub with_reward: bool,
    /// Training step used for β annealing when rewards are computed.
    pub step: u64,
    pub concurrency: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { with_reward: false, step: 0, concurrency: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task_id: String,
    pub ranked_ids: Vec<u64>,
    pub answer: Option<String>,
    pub f1: Option<f64>,
    pub ndcg_at_1: Option<f64>,
    pub ndcg_at_5: Option<f64>,
    pub recall_at_k: Option<f64>,
    pub reward: Option<RewardBreakdown<f64>>,
    pub error: Option<String>,
}

impl EvalRow {
    fn failed(task_id: &str, error: &Error) -> Self {
        Self {
            task_id: task_id.to_string(),
            ranked_ids: Vec::new(),
            answer: None,
            f1: None,
            ndcg_at_1: None,
            ndcg_at_5: None,
            recall_at_k: None,
            reward: None,
            error: Some(error.to_string()),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// Means over successful rows; retrieval means only over rows with gold ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub n_tasks: usize,
    pub n_success: usize,
    pub mean_f1: Option<f64>,
    pub mean_ndcg_at_1: Option<f64>,
    pub mean_ndcg_at_5: Option<f64>,
    pub mean_recall_at_k: Option<f64>,
    pub mean_reward: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalAggregate {
    pub fn from_rows(rows: &[EvalRow]) -> Self {
        let ok = || rows.iter().filter(|r| r.succeeded());
        Self {
            n_tasks: rows.len(),
            n_success: ok().count(),
            mean_f1: mean_of(ok().map(|r| r.f1)),
            mean_ndcg_at_1: mean_of(ok().map(|r| r.ndcg_at_1)),
            mean_ndcg_at_5: mean_of(ok().map(|r| r.ndcg_at_5)),
            mean_recall_at_k: mean_of(ok().map(|r| r.recall_at_k)),
            mean_reward: mean_of(ok().map(|r| r.reward.as_ref().map(|b| b.r_total))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub top_k: usize,
    pub rows: Vec<EvalRow>,
    pub aggregate: EvalAggregate,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    task_id: &'a str,
    f1: Option<f64>,
    ndcg_at_1: Option<f64>,
    ndcg_at_5: Option<f64>,
    recall_at_k: Option<f64>,
    r_total: Option<f64>,
    ranked_ids: String,
    error: Option<&'a str>,
}

impl EvalReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(CsvRow {
                task_id: &r.task_id,
                f1: r.f1,
                ndcg_at_1: r.ndcg_at_1,
                ndcg_at_5: r.ndcg_at_5,
                recall_at_k: r.recall_at_k,
                r_total: r.reward.as_ref().map(|b| b.r_total),
                ranked_ids: r.ranked_ids.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
                error: r.error.as_deref(),
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn eval_task(task: &Task, cfg: &PipelineConfig, backends: &Backends, opts: &EvalOptions) -> Result<EvalRow> {
    let ranked = backends.ranker(cfg).rank(&task.question, &task.bank)?;
    let ids = ranked.ranking.ranked_ids.clone();
    let reward = if opts.with_reward {
        Some(backends.reward_engine(cfg).score(task, &ranked.ranking, &task.bank, opts.step)?)
    } else {
        None
    };
    let memory: Vec<&Session> = ids.iter().take(cfg.top_k).filter_map(|&id| task.bank.get(id)).collect();
    let reply = answer(&backends.working, &cfg.working.params(), &task.question, &memory)?;
    let f1 = score_answer_f1(&reply, &task.gold_answers);
    let (ndcg_at_1, ndcg_at_5, recall_at_k) = match &task.gold_session_ids {
        Some(gold) => (
            Some(retrieval_reward_ndcg(&ids, gold, 1)?),
            Some(retrieval_reward_ndcg(&ids, gold, 5)?),
            Some(recall_at(&ids, gold, cfg.top_k)),
        ),
        None => (None, None, None),
    };
    Ok(EvalRow {
        task_id: task.task_id.clone(),
        ranked_ids: ids,
        answer: Some(reply),
        f1: Some(f1),
        ndcg_at_1,
        ndcg_at_5,
        recall_at_k,
        reward,
        error: None,
    })
}

/// Rank, optionally score, answer and measure every task. Per-task failures
/// are recorded in their row; configuration problems abort the run.
pub fn run_eval(tasks: &[Task], cfg: &PipelineConfig, backends: &Backends, opts: &EvalOptions) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    cfg.validate()?;
    let rows = bounded_map(tasks, opts.concurrency.max(1), |_, task| match eval_task(task, cfg, backends, opts) {
        Ok(row) => row,
        Err(e) => {
            log::warn!("task {} failed: {e}", task.task_id);
            EvalRow::failed(&task.task_id, &e)
        }
    });
    Ok(EvalReport {
        config_fingerprint: cfg.fingerprint(),
        top_k: cfg.top_k,
        aggregate: EvalAggregate::from_rows(&rows),
        rows,
    })
}
