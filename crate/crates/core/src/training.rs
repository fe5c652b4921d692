//! RL data preparation: curriculum selection, zero-variance group filtering,
//! group-relative advantages, trajectory export and checkpoint averaging.
//! Policy updates happen in an external trainer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::Task;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::ranker::{build_prompt, parse_ranking, Ranker, RankingResult};
use crate::reward::{RewardBreakdown, RewardEngine};
use crate::scalar::{mean_and_std, Scalar};

/// Reward given to a rollout whose output could not be parsed into a ranking.
pub const FORMAT_FAILURE_REWARD: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub tau: f64,
    pub budget: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self { tau: 0.2, budget: 32 }
    }
}

/// The `budget` tasks whose performance is closest to `tau`, ordered by
/// distance then task id.
pub fn select_curriculum<T: Scalar>(perf: &BTreeMap<String, T>, cfg: &CurriculumConfig) -> Result<Vec<String>> {
    if cfg.budget < 1 {
        return Err(Error::InvalidArgument("curriculum budget must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.tau) {
        return Err(Error::InvalidArgument(format!("tau {} outside [0, 1]", cfg.tau)));
    }
    if perf.is_empty() {
        return Err(Error::InvalidArgument("performance map is empty".into()));
    }
    let mut scored = Vec::with_capacity(perf.len());
    for (id, &p) in perf {
        let p = p.to_f64_lossy();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("performance of {id} is {p}, outside [0, 1]")));
        }
        scored.push(((p - cfg.tau).abs(), id));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(cfg.budget).map(|(_, id)| id.clone()).collect())
}

/// One proxy rollout and what it earned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task_id: String,
    pub prompt: String,
    pub raw_output: String,
    /// `None` marks a format failure; `failure` then carries the reason.
    pub ranking: Option<RankingResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub reward: Option<RewardBreakdown<f64>>,
    /// Scalar training signal: `reward.r_total`, or the format-failure penalty.
    pub total_reward: f64,
    pub advantage: Option<f64>,
}

impl TrajectoryRecord {
    pub fn scored(task_id: &str, prompt: String, ranking: RankingResult, reward: RewardBreakdown<f64>) -> Self {
        Self {
            task_id: task_id.to_string(),
            prompt,
            raw_output: ranking.raw_output.clone(),
            total_reward: reward.r_total,
            ranking: Some(ranking),
            failure: None,
            reward: Some(reward),
            advantage: None,
        }
    }

    pub fn format_failure(task_id: &str, prompt: String, raw_output: String, reason: impl Into<String>) -> Self {
        Self {
            task_id: task_id.to_string(),
            prompt,
            raw_output,
            ranking: None,
            failure: Some(reason.into()),
            reward: None,
            total_reward: FORMAT_FAILURE_REWARD,
            advantage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: String,
    pub rollouts: Vec<TrajectoryRecord>,
}

impl RolloutGroup {
    pub fn new(task_id: impl Into<String>, rollouts: Vec<TrajectoryRecord>) -> Result<Self> {
        let task_id = task_id.into();
        if let Some(r) = rollouts.iter().find(|r| r.task_id != task_id) {
            return Err(Error::InvalidArgument(format!(
                "rollout for task {} placed in group {task_id}",
                r.task_id
            )));
        }
        Ok(Self { task_id, rollouts })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.total_reward).collect()
    }

    pub fn reward_std(&self) -> f64 {
        mean_and_std(&self.rewards()).map_or(0.0, |(_, s)| s)
    }
}

/// Drop groups whose reward standard deviation is at most `eps`; surviving
/// groups pass through untouched.
pub fn filter_groups(groups: Vec<RolloutGroup>, eps: f64) -> Vec<RolloutGroup> {
    let eps = eps.max(0.0);
    groups.into_iter().filter(|g| g.reward_std() > eps).collect()
}

/// `(r_i − mean) / std` with population std; all zeros when `std ≤ eps`.
pub fn grpo_advantages<T: Scalar>(rewards: &[T], eps: T) -> Result<Vec<T>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let (mean, std) = mean_and_std(rewards).expect("non-empty");
    if std <= eps {
        return Ok(vec![T::zero(); rewards.len()]);
    }
    Ok(rewards.iter().map(|&r| (r - mean) / std).collect())
}

pub fn assign_advantages(group: &mut RolloutGroup, eps: f64) -> Result<()> {
    let adv = grpo_advantages(&group.rewards(), eps)?;
    for (r, a) in group.rollouts.iter_mut().zip(adv) {
        r.advantage = Some(a);
    }
    Ok(())
}

fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut n = 0;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(n)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// One JSON line per rollout; returns the number of lines written.
pub fn export_trajectories(groups: &[RolloutGroup], path: impl AsRef<Path>) -> Result<usize> {
    write_jsonl(path.as_ref(), groups.iter().flat_map(|g| &g.rollouts))
}

pub fn load_trajectories(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    read_jsonl(path.as_ref())
}

/// Regroup records by task id, groups ordered by first appearance.
pub fn group_trajectories(records: Vec<TrajectoryRecord>) -> Vec<RolloutGroup> {
    let mut groups: Vec<RolloutGroup> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|g| g.task_id == r.task_id) {
            Some(g) => g.rollouts.push(r),
            None => groups.push(RolloutGroup { task_id: r.task_id.clone(), rollouts: vec![r] }),
        }
    }
    groups
}

/// Sample `n` proxy rollouts for a task and score each one. Unparseable
/// outputs become format-failure records instead of aborting the group.
pub fn collect_rollouts(
    task: &Task,
    ranker: &Ranker<'_>,
    engine: &RewardEngine<'_>,
    n: usize,
    step: u64,
) -> Result<RolloutGroup> {
    let bank: &MemoryBank = &task.bank;
    let filtered = ranker.filter(&task.question, bank)?;
    let prompt = build_prompt(&task.question, &filtered, &ranker.template, ranker.top_k)?;
    let valid: BTreeSet<u64> = filtered.kept_ids().into_iter().collect();
    let request = ranker.params.request(prompt.clone());
    let mut rollouts = Vec::with_capacity(n);
    for _ in 0..n {
        let raw = ranker.proxy.complete_text(&request)?;
        let record = match parse_ranking(&raw, &valid, ranker.top_k, ranker.strict) {
            Ok(ranking) => {
                let reward = engine.score(task, &ranking, bank, step)?;
                TrajectoryRecord::scored(&task.task_id, prompt.clone(), ranking, reward)
            }
            Err(e @ (Error::MissingRanking | Error::Format { .. })) => {
                TrajectoryRecord::format_failure(&task.task_id, prompt.clone(), raw, e.to_string())
            }
            Err(e) => return Err(e),
        };
        rollouts.push(record);
    }
    RolloutGroup::new(task.task_id.clone(), rollouts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let t = Self { shape, values };
        t.check("<tensor>")?;
        Ok(t)
    }

    fn check(&self, name: &str) -> Result<()> {
        let expected = self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if expected != Some(self.values.len()) {
            return Err(Error::Shape {
                entry: name.to_string(),
                message: format!("shape {:?} does not hold {} values", self.shape, self.values.len()),
            });
        }
        Ok(())
    }
}

/// Named parameter tensors, stored flat with their shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
pub struct ParamMap<T> {
    pub entries: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for ParamMap<T> {
    fn default() -> Self {
        Self { entries: BTreeMap::new() }
    }
}

impl<T: Scalar + Serialize + DeserializeOwned> ParamMap<T> {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn validate(&self) -> Result<()> {
        self.entries.iter().try_for_each(|(name, t)| t.check(name))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let map: Self = serde_json::from_reader(BufReader::new(file))?;
        map.validate()?;
        Ok(map)
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor { shape: t.shape.clone(), values: t.values.iter().map(|&v| v * c).collect() }))
                .collect(),
        }
    }
}

/// Elementwise arithmetic mean. Each element's inputs are summed in sorted
/// order, so the result does not depend on the order of `maps`.
pub fn merge_checkpoints<T: Scalar>(maps: &[ParamMap<T>]) -> Result<ParamMap<T>> {
    let (first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("nothing to merge".into()))?;
    for (name, t) in &first.entries {
        t.check(name)?;
    }
    for m in rest {
        for (name, t) in &m.entries {
            match first.entries.get(name) {
                None => return Err(Error::Shape { entry: name.clone(), message: "entry missing from first map".into() }),
                Some(f) if f.shape != t.shape => {
                    return Err(Error::Shape {
                        entry: name.clone(),
                        message: format!("shape {:?} differs from {:?}", t.shape, f.shape),
                    })
                }
                Some(_) => t.check(name)?,
            }
        }
        if let Some(name) = first.entries.keys().find(|k| !m.entries.contains_key(*k)) {
            return Err(Error::Shape { entry: name.clone(), message: "entry missing from a later map".into() });
        }
    }

    let n = T::of_usize(maps.len());
    let mut column = Vec::with_capacity(maps.len());
    let mut entries = BTreeMap::new();
    for (name, t) in &first.entries {
        let inputs: Vec<&[T]> = maps.iter().map(|m| m.entries[name].values.as_slice()).collect();
        let values = (0..t.values.len())
            .map(|i| {
                column.clear();
                column.extend(inputs.iter().map(|v| v[i]));
                column.sort_by(|a, b| a.total_cmp(b));
                column.iter().copied().sum::<T>() / n
            })
            .collect();
        entries.insert(name.clone(), Tensor { shape: t.shape.clone(), values });
    }
    Ok(ParamMap { entries })
}

/// Names of the `k` best-scoring checkpoints, best first, ties by name.
pub fn select_top_checkpoints(scores: &[(String, f64)], k: usize) -> Vec<String> {
    let mut sorted: Vec<&(String, f64)> = scores.iter().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    sorted.into_iter().take(k).map(|(n, _)| n.clone()).collect()
}
