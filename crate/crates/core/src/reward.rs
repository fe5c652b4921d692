//! Task-outcome reward.
//!
//! The working model answers the task with no memory (`s0`) and with the
//! top-`k` ranked sessions for each cutoff `k` of a sparse Fibonacci
//! schedule. Each tier's score lift is discounted by `D_n = 1/log2(k_n + 1)`,
//! the DCG discount of the tier's outer boundary:
//!
//! ```text
//! R_ans = Σ_n D_n · (s_{k_n} − s_{k_{n−1}})        with s_{k_0} = s0
//!       = −s0 + Σ_n w_n · s_{k_n}                   (k_1 = 1, so D_1 = 1)
//! w_n   = D_n − D_{n+1}  (n < N),   w_N = D_N
//! ```
//!
//! During warm-up an annotation-based NDCG term is mixed in:
//! `R = α·R_ans + β·R_ret`, with β annealed linearly to zero.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::answer::answer_prompt;
use crate::backends::{bounded_map, ChatClient, ModelParams};
use crate::bench::Task;
use crate::error::{Error, Result};
use crate::memory::{MemoryBank, Session};
use crate::ranker::RankingResult;
use crate::scalar::Scalar;

/// Evaluation tiers `k_1 < k_2 < … < k_N` with `k_1 = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CutoffSchedule {
    cutoffs: Vec<usize>,
}

impl CutoffSchedule {
    pub fn new(cutoffs: Vec<usize>) -> Result<Self> {
        match cutoffs.first() {
            None => return Err(Error::InvalidArgument("cutoff schedule is empty".into())),
            Some(&k) if k != 1 => return Err(Error::InvalidArgument(format!("first cutoff must be 1, got {k}"))),
            _ => {}
        }
        if cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!("cutoffs not strictly increasing: {cutoffs:?}")));
        }
        Ok(Self { cutoffs })
    }

    /// Distinct Fibonacci numbers `1, 2, 3, 5, 8, …` up to `list_len`,
    /// plus `list_len` itself when `include_full` and it is not already present.
    pub fn fibonacci(list_len: usize, include_full: bool) -> Result<Self> {
        if list_len < 1 {
            return Err(Error::InvalidArgument("list length must be at least 1".into()));
        }
        let mut cutoffs = Vec::new();
        let (mut a, mut b) = (1usize, 2usize);
        while a <= list_len {
            cutoffs.push(a);
            (a, b) = (b, a.saturating_add(b));
        }
        if include_full && cutoffs.last() != Some(&list_len) {
            cutoffs.push(list_len);
        }
        Self::new(cutoffs)
    }

    pub fn cutoffs(&self) -> &[usize] {
        &self.cutoffs
    }

    pub fn len(&self) -> usize {
        self.cutoffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cutoffs.is_empty()
    }

    pub fn deepest(&self) -> usize {
        *self.cutoffs.last().expect("schedule is never empty")
    }

    pub fn ensure_fits(&self, list_len: usize) -> Result<()> {
        if self.deepest() > list_len {
            return Err(Error::InvalidArgument(format!(
                "cutoff {} exceeds ranked list length {list_len}",
                self.deepest()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for CutoffSchedule {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CutoffSchedule> for Vec<usize> {
    fn from(s: CutoffSchedule) -> Self {
        s.cutoffs
    }
}

/// `1 / log2(k + 1)`.
pub fn discount<T: Scalar>(k: usize) -> Result<T> {
    if k < 1 {
        return Err(Error::InvalidArgument("discount rank must be at least 1".into()));
    }
    Ok(T::of_usize(k + 1).log2().recip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector<T> {
    pub discounts: Vec<T>,
    pub weights: Vec<T>,
}

/// Differential discounts `w_n = D_n − D_{n+1}`, `w_N = D_N`.
pub fn weights<T: Scalar>(schedule: &CutoffSchedule) -> WeightVector<T> {
    let discounts: Vec<T> = schedule
        .cutoffs()
        .iter()
        .map(|&k| discount(k).expect("schedule cutoffs are >= 1"))
        .collect();
    let weights = discounts
        .iter()
        .enumerate()
        .map(|(n, &d)| match discounts.get(n + 1) {
            Some(&next) => d - next,
            None => d,
        })
        .collect();
    WeightVector { discounts, weights }
}

/// Baseline score and one score per schedule tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationScores<T> {
    pub s0: T,
    pub s_at: Vec<(usize, T)>,
}

impl<T: Scalar> AblationScores<T> {
    pub fn new(s0: T, schedule: &CutoffSchedule, scores: &[T]) -> Result<Self> {
        if scores.len() != schedule.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scores for {} cutoffs",
                scores.len(),
                schedule.len()
            )));
        }
        Ok(Self { s0, s_at: schedule.cutoffs().iter().copied().zip(scores.iter().copied()).collect() })
    }

    pub fn tier_scores(&self) -> impl Iterator<Item = T> + '_ {
        self.s_at.iter().map(|&(_, s)| s)
    }

    fn check_aligned(&self, schedule: &CutoffSchedule) -> Result<()> {
        let aligned = self.s_at.len() == schedule.len()
            && self.s_at.iter().zip(schedule.cutoffs()).all(|(&(k, _), &c)| k == c);
        if aligned {
            Ok(())
        } else {
            Err(Error::InvalidArgument("scores are not aligned with the cutoff schedule".into()))
        }
    }
}

/// Regrouped form: `−s0 + Σ w_n · s_{k_n}`.
///
/// Evaluated as `Σ w_n · (s_{k_n} − s0)`, equal because the weights sum to
/// `D_1 = 1`; a flat score vector then yields exactly zero.
pub fn outcome_reward<T: Scalar>(scores: &AblationScores<T>, schedule: &CutoffSchedule) -> Result<T> {
    scores.check_aligned(schedule)?;
    let w = weights::<T>(schedule);
    Ok(scores.tier_scores().zip(&w.weights).map(|(s, &wn)| wn * (s - scores.s0)).sum())
}

/// Marginal form: `Σ D_n · (s_{k_n} − s_{k_{n−1}})` with `s_{k_0} = s0`.
/// Kept as an independent cross-check of [`outcome_reward`].
pub fn outcome_reward_marginal<T: Scalar>(scores: &AblationScores<T>, schedule: &CutoffSchedule) -> Result<T> {
    scores.check_aligned(schedule)?;
    let w = weights::<T>(schedule);
    let mut prev = scores.s0;
    let mut total = T::zero();
    for (s, &d) in scores.tier_scores().zip(&w.discounts) {
        total = total + d * (s - prev);
        prev = s;
    }
    Ok(total)
}

fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred == gold { 1.0 } else { 0.0 };
    }
    let mut remaining: Vec<&String> = gold.iter().collect();
    let mut common = 0usize;
    for t in pred {
        if let Some(i) = remaining.iter().position(|g| *g == t) {
            remaining.swap_remove(i);
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Token F1 after lowercasing, stripping punctuation and articles; best
/// over all gold answers.
pub fn score_answer_f1(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    golds.iter().map(|g| f1_tokens(&p, &normalize_answer(g))).fold(0.0, f64::max)
}

/// 1 when the normalised prediction equals any normalised gold answer.
pub fn score_answer_exact(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerScorer {
    #[default]
    F1,
    ExactMatch,
}

impl AnswerScorer {
    pub fn score(&self, pred: &str, golds: &[String]) -> f64 {
        match self {
            AnswerScorer::F1 => score_answer_f1(pred, golds),
            AnswerScorer::ExactMatch => score_answer_exact(pred, golds),
        }
    }
}

/// NDCG@k with binary gains. A repeated id only counts at its first position.
pub fn retrieval_reward_ndcg<T: Scalar>(ranked_ids: &[u64], gold_ids: &BTreeSet<u64>, k: usize) -> Result<T> {
    if k < 1 {
        return Err(Error::InvalidArgument("ndcg cutoff must be at least 1".into()));
    }
    if gold_ids.is_empty() {
        return Ok(T::zero());
    }
    let gain_at = |i: usize| T::of_usize(i + 2).log2().recip();
    let mut seen = BTreeSet::new();
    let dcg: T = ranked_ids
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| gold_ids.contains(id) && seen.insert(**id))
        .map(|(i, _)| gain_at(i))
        .sum();
    let idcg: T = (0..gold_ids.len().min(k)).map(gain_at).sum();
    Ok(dcg / idcg)
}

/// Fraction of gold ids found in the top `k`.
pub fn recall_at<T: Scalar>(ranked_ids: &[u64], gold_ids: &BTreeSet<u64>, k: usize) -> T {
    if gold_ids.is_empty() {
        return T::zero();
    }
    let hits = ranked_ids.iter().take(k).collect::<BTreeSet<_>>().into_iter().filter(|id| gold_ids.contains(id)).count();
    T::of_usize(hits) / T::of_usize(gold_ids.len())
}

/// Linear decay `β0 · max(0, 1 − step/anneal_steps)`.
pub fn anneal_beta<T: Scalar>(step: u64, beta0: T, anneal_steps: u64) -> T {
    let steps = anneal_steps.max(1);
    let frac = T::of(step as f64) / T::of(steps as f64);
    beta0 * (T::one() - frac).max(T::zero())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSchedule {
    pub beta0: f64,
    pub anneal_steps: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { beta0: 0.5, anneal_steps: 100 }
    }
}

impl AnnealSchedule {
    pub fn beta(&self, step: u64) -> f64 {
        anneal_beta(step, self.beta0, self.anneal_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridReward<T> {
    pub r_ans: T,
    pub r_ret: Option<T>,
    pub alpha: T,
    pub beta: T,
    pub r_total: T,
}

/// `α·R_ans + β·R_ret`; `R_ret` may only be absent when `β = 0`.
pub fn hybrid_reward<T: Scalar>(r_ans: T, r_ret: Option<T>, alpha: T, beta: T) -> Result<HybridReward<T>> {
    if alpha.is_nan() || beta.is_nan() || alpha < T::zero() || beta < T::zero() {
        return Err(Error::InvalidArgument(format!("weights must be non-negative (alpha {alpha}, beta {beta})")));
    }
    let ret = match r_ret {
        Some(r) => r,
        None if beta == T::zero() => T::zero(),
        None => return Err(Error::InvalidArgument("beta > 0 requires a retrieval reward".into())),
    };
    Ok(HybridReward { r_ans, r_ret, alpha, beta, r_total: alpha * r_ans + beta * ret })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<T> {
    pub r_ans: T,
    pub r_ret: Option<T>,
    pub alpha: T,
    pub beta: T,
    pub r_total: T,
    pub schedule: Vec<usize>,
    pub scores: AblationScores<T>,
    pub weights: WeightVector<T>,
}

impl<T: Scalar> RewardBreakdown<T> {
    pub fn assemble(
        scores: AblationScores<T>,
        schedule: &CutoffSchedule,
        r_ret: Option<T>,
        alpha: T,
        beta: T,
    ) -> Result<Self> {
        let r_ans = outcome_reward(&scores, schedule)?;
        let h = hybrid_reward(r_ans, r_ret, alpha, beta)?;
        Ok(Self {
            r_ans: h.r_ans,
            r_ret: h.r_ret,
            alpha: h.alpha,
            beta: h.beta,
            r_total: h.r_total,
            schedule: schedule.cutoffs().to_vec(),
            scores,
            weights: weights(schedule),
        })
    }
}

/// Score the working model on the task with no memory and with the top-`k`
/// ranked sessions (in rank order) for each schedule cutoff. Calls run
/// concurrently up to the client's policy bound; results are assembled by
/// cutoff index.
pub fn evaluate_ablation(
    task: &Task,
    ranking: &RankingResult,
    schedule: &CutoffSchedule,
    bank: &MemoryBank,
    working: &ChatClient,
    params: &ModelParams,
    scorer: AnswerScorer,
) -> Result<AblationScores<f64>> {
    if ranking.ranked_ids.is_empty() {
        return Err(Error::InvalidArgument("ranking is empty".into()));
    }
    schedule.ensure_fits(ranking.ranked_ids.len())?;
    let ranked: Vec<&Session> = ranking
        .ranked_ids
        .iter()
        .map(|&id| bank.get(id).ok_or_else(|| Error::InvalidArgument(format!("ranked id {id} not in bank"))))
        .collect::<Result<_>>()?;

    let depths: Vec<usize> = std::iter::once(0).chain(schedule.cutoffs().iter().copied()).collect();
    let bound = working.policy().max_concurrency;
    let results = bounded_map(&depths, bound, |_, &depth| {
        let prompt = answer_prompt(&task.question, &ranked[..depth]);
        let reply = working.complete_text(&params.request(prompt))?;
        let answer = crate::answer::strip_think(&reply).trim().to_string();
        Ok::<f64, Error>(scorer.score(&answer, &task.gold_answers).clamp(0.0, 1.0))
    });
    let mut scores = Vec::with_capacity(results.len());
    for (cutoff_index, r) in results.into_iter().enumerate() {
        scores.push(r.map_err(|e| Error::Ablation { cutoff_index, source: Box::new(e) })?);
    }
    AblationScores::new(scores[0], schedule, &scores[1..])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub include_full_cutoff: bool,
    pub alpha: f64,
    pub anneal: AnnealSchedule,
    pub scorer: AnswerScorer,
    /// Depth of the NDCG retrieval term.
    pub ndcg_k: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            include_full_cutoff: true,
            alpha: 1.0,
            anneal: AnnealSchedule::default(),
            scorer: AnswerScorer::F1,
            ndcg_k: 10,
        }
    }
}

/// Ablation plus hybrid reward for one ranked rollout.
pub struct RewardEngine<'c> {
    pub working: &'c ChatClient,
    pub params: ModelParams,
    pub config: RewardConfig,
}

impl<'c> RewardEngine<'c> {
    pub fn new(working: &'c ChatClient, params: ModelParams, config: RewardConfig) -> Self {
        Self { working, params, config }
    }

    pub fn schedule_for(&self, ranking: &RankingResult) -> Result<CutoffSchedule> {
        CutoffSchedule::fibonacci(ranking.ranked_ids.len(), self.config.include_full_cutoff)
    }

    pub fn score(&self, task: &Task, ranking: &RankingResult, bank: &MemoryBank, step: u64) -> Result<RewardBreakdown<f64>> {
        let schedule = self.schedule_for(ranking)?;
        self.score_with_schedule(task, ranking, bank, &schedule, step)
    }

    /// Tasks without gold session annotations get β = 0.
    pub fn score_with_schedule(
        &self,
        task: &Task,
        ranking: &RankingResult,
        bank: &MemoryBank,
        schedule: &CutoffSchedule,
        step: u64,
    ) -> Result<RewardBreakdown<f64>> {
        let scores = evaluate_ablation(task, ranking, schedule, bank, self.working, &self.params, self.config.scorer)?;
        let mut beta = self.config.anneal.beta(step);
        let r_ret = match &task.gold_session_ids {
            Some(gold) if beta > 0.0 => Some(retrieval_reward_ndcg(&ranking.ranked_ids, gold, self.config.ndcg_k)?),
            _ => {
                beta = 0.0;
                None
            }
        };
        RewardBreakdown::assemble(scores, schedule, r_ret, self.config.alpha, beta)
    }
}
