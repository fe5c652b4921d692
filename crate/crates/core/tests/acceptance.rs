//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Criterion 10 talks to a live endpoint and
//! only runs when `MEMSIFTER_LIVE_SMOKE=1`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sifter_core::backends::mock::{OracleWorkingLlm, ScriptedChat};
use sifter_core::backends::{BackendPolicy, ChatClient, EmbedClient, HttpChat, HttpEmbedder, ModelParams};
use sifter_core::bench::{generate_synthetic, run_eval, Backends, EvalOptions, MockProxy, SyntheticConfig, Task};
use sifter_core::error::Error;
use sifter_core::memory::{MemoryBank, Role, Session, Turn};
use sifter_core::ranker::{parse_ranking, RankingResult, DEFAULT_TEMPLATE};
use sifter_core::reward::{
    discount, evaluate_ablation, outcome_reward, outcome_reward_marginal, retrieval_reward_ndcg, weights,
    AblationScores, AnswerScorer, CutoffSchedule, RewardEngine,
};
use sifter_core::training::{filter_groups, grpo_advantages, merge_checkpoints, select_curriculum, CurriculumConfig, RolloutGroup, TrajectoryRecord};
use sifter_core::{load_config, PipelineConfig, Ranker};

enum Outcome {
    Pass,
    Fail(String),
    Skip(String),
}

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(f: impl FnOnce() -> Check) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Outcome::Pass,
        Ok(Err(m)) => Outcome::Fail(m),
        Err(p) => Outcome::Fail(
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()),
        ),
    }
}

fn reward_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..2000 {
        let cutoffs = common::random_schedule(&mut rng, 8, 40);
        let schedule = CutoffSchedule::new(cutoffs.clone()).map_err(|e| e.to_string())?;
        let s0 = rng.random_range(0.0..=1.0);
        let s: Vec<f64> = (0..cutoffs.len()).map(|_| rng.random_range(0.0..=1.0)).collect();
        let scores = AblationScores::new(s0, &schedule, &s).unwrap();
        let regrouped = outcome_reward(&scores, &schedule).unwrap();
        let marginal = outcome_reward_marginal(&scores, &schedule).unwrap();
        let oracle = common::reward_by_definition(s0, &s, &cutoffs);
        ensure((regrouped - marginal).abs() <= 1e-9, || format!("trial {trial}: {regrouped} vs {marginal}"))?;
        ensure((regrouped - oracle).abs() <= 1e-9, || format!("trial {trial}: {regrouped} vs oracle {oracle}"))?;
    }
    Ok(())
}

fn weight_laws() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut schedules: Vec<Vec<usize>> = (1..=60).map(|n| CutoffSchedule::fibonacci(n, true).unwrap().cutoffs().to_vec()).collect();
    schedules.extend((0..1000).map(|_| common::random_schedule(&mut rng, 12, 200)));
    for cutoffs in schedules {
        let w = weights::<f64>(&CutoffSchedule::new(cutoffs.clone()).unwrap());
        let sum: f64 = w.weights.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-12, || format!("{cutoffs:?}: sum {sum}"))?;
        ensure(w.weights.iter().all(|&x| x > 0.0), || format!("{cutoffs:?}: non-positive weight"))?;
        ensure(w.discounts.windows(2).all(|d| d[0] > d[1]), || format!("{cutoffs:?}: discounts not decreasing"))?;
        for (&k, &d) in cutoffs.iter().zip(&w.discounts) {
            ensure((d - common::discount(k)).abs() <= 1e-14, || format!("D({k}) = {d}"))?;
        }
    }
    ensure(discount::<f64>(1).unwrap() == 1.0, || "D(1) != 1".into())?;
    ensure(discount::<f64>(3).unwrap() == 0.5, || "D(3) != 0.5".into())?;
    let d2 = discount::<f64>(2).unwrap();
    ensure((d2 - 0.630_930).abs() <= 1e-6, || format!("D(2) = {d2}"))
}

fn bank_of(n: u64) -> MemoryBank {
    MemoryBank::new((0..n).map(|i| Session::new(i, vec![Turn::new(Role::User, format!("note number {i}"))]).unwrap()).collect())
        .unwrap()
}

fn task_for(bank: MemoryBank, gold: u64) -> Task {
    Task::new("t", "Which note?", vec!["seven".into()], Some(BTreeSet::from([gold])), Arc::new(bank)).unwrap()
}

fn rank_sensitivity() -> Check {
    let schedule = CutoffSchedule::new(vec![1, 2, 3, 5, 8]).unwrap();
    let mut by_rank = Vec::new();
    for rank in 1..=8usize {
        let bank = bank_of(8);
        let task = task_for(bank.clone(), 0);
        let mut order: Vec<u64> = (1..8).collect();
        order.insert(rank - 1, 0);
        let oracle = OracleWorkingLlm::new();
        oracle.register(&task.question, BTreeSet::from([0]), "seven");
        let client = ChatClient::new(Arc::new(oracle), BackendPolicy::default()).unwrap();
        let ranking = RankingResult { rationale: String::new(), ranked_ids: order, raw_output: String::new(), repairs: vec![] };
        let scores = evaluate_ablation(&task, &ranking, &schedule, &bank, &client, &ModelParams::default(), AnswerScorer::ExactMatch)
            .map_err(|e| e.to_string())?;
        by_rank.push(outcome_reward(&scores, &schedule).unwrap());
    }
    ensure((by_rank[0] - 1.0).abs() <= 1e-12, || format!("rank 1 gives {}", by_rank[0]))?;
    ensure(by_rank.windows(2).all(|w| w[1] <= w[0]), || format!("not monotone: {by_rank:?}"))?;
    for pair in [(1, 2), (2, 3), (3, 5), (5, 8)] {
        ensure(by_rank[pair.1 - 1] < by_rank[pair.0 - 1], || format!("no strict drop {pair:?}: {by_rank:?}"))?;
    }
    let last = by_rank[7];
    ensure((last - 1.0 / 9f64.log2()).abs() <= 1e-12 && (last - 0.31546).abs() <= 1e-5, || format!("rank 8 gives {last}"))
}

fn zero_utility() -> Check {
    let bank = bank_of(10);
    let task = task_for(bank.clone(), 3);
    let client = ChatClient::new(Arc::new(ScriptedChat::constant("seven")), BackendPolicy::default()).unwrap();
    for ids in [vec![3, 1, 2, 0, 4, 5, 6, 7, 8, 9], vec![9, 8, 7, 6, 5, 4, 3, 2, 1, 0], vec![5, 3]] {
        let ranking = RankingResult { rationale: String::new(), ranked_ids: ids, raw_output: String::new(), repairs: vec![] };
        for include_full in [true, false] {
            let schedule = CutoffSchedule::fibonacci(ranking.ranked_ids.len(), include_full).unwrap();
            for scorer in [AnswerScorer::F1, AnswerScorer::ExactMatch] {
                let scores = evaluate_ablation(&task, &ranking, &schedule, &bank, &client, &ModelParams::default(), scorer)
                    .map_err(|e| e.to_string())?;
                let r = outcome_reward(&scores, &schedule).unwrap();
                ensure(r == 0.0, || format!("R_ans = {r:e}"))?;
                ensure(outcome_reward_marginal(&scores, &schedule).unwrap() == 0.0, || "marginal form non-zero".into())?;
            }
        }
    }
    Ok(())
}

fn ndcg_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let universe: Vec<u64> = (1..=6).collect();
    let rankings = common::partial_permutations(&universe);
    let full = rankings.iter().filter(|r| r.len() == 6).count();
    ensure(full == 720, || format!("{full} full permutations"))?;
    let mut compared = 0usize;
    for _ in 0..10 {
        let size = rng.random_range(1..=6);
        let mut pool = universe.clone();
        pool.shuffle(&mut rng);
        let gold: BTreeSet<u64> = pool.into_iter().take(size).collect();
        for k in 1..=6 {
            let ideal = common::ideal_dcg_by_search(&universe, &gold, k);
            for r in &rankings {
                let engine: f64 = retrieval_reward_ndcg(r, &gold, k).unwrap();
                let oracle = common::ndcg_by_definition(r, &gold, k, ideal);
                ensure((engine - oracle).abs() <= 1e-12, || format!("{r:?} gold {gold:?} k {k}: {engine} vs {oracle}"))?;
                compared += 1;
            }
        }
    }
    ensure(compared >= 720 * 10, || format!("only {compared} comparisons"))
}

fn parser_robustness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut parsed = 0usize;
    for i in 0..10_000 {
        let raw = common::fuzz_output(&mut rng);
        let valid: BTreeSet<u64> = (0..16).filter(|_| rng.random_bool(0.6)).collect();
        if valid.is_empty() {
            continue;
        }
        let top_k = rng.random_range(1..=12);
        let strict = rng.random_bool(0.3);
        match parse_ranking(&raw, &valid, top_k, strict) {
            Ok(r) => {
                r.check_invariants(&valid, top_k).map_err(|m| format!("case {i} {raw:?}: {m}"))?;
                parsed += 1;
            }
            Err(Error::MissingRanking | Error::Format { .. }) => {}
            Err(e) => return Err(format!("case {i} {raw:?}: unexpected error {e}")),
        }
    }
    ensure(parsed >= 2_000, || format!("only {parsed} fuzz cases produced a ranking"))?;
    let line = DEFAULT_TEMPLATE
        .lines()
        .find(|l| l.starts_with("Example Output Format:"))
        .ok_or("template has no example line")?;
    let example = line["Example Output Format:".len()..].trim();
    let expected = [27, 13, 34, 5, 12, 8, 21, 45, 6, 19];
    let valid: BTreeSet<u64> = (0..50).collect();
    let r = parse_ranking(example, &valid, 10, true).map_err(|e| e.to_string())?;
    ensure(r.ranked_ids == expected, || format!("{example} parsed to {:?}", r.ranked_ids))
}

fn grpo_and_curriculum() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..2000 {
        let n = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let (_, std_in) = common::population_mean_std(&rewards);
        let adv = grpo_advantages(&rewards, 1e-8).unwrap();
        if std_in > 1e-8 {
            let (m, s) = common::population_mean_std(&adv);
            ensure(m.abs() <= 1e-9 && (s - 1.0).abs() <= 1e-9, || format!("mean {m}, std {s} for {rewards:?}"))?;
        }
    }
    for _ in 0..500 {
        let n = rng.random_range(1..=30);
        let perf: BTreeMap<String, f64> =
            (0..n).map(|_| (format!("task{:02}", rng.random_range(0..60)), (rng.random_range(0..=20) as f64) / 20.0)).collect();
        let tau = (rng.random_range(0..=10) as f64) / 10.0;
        let budget = rng.random_range(1..=35);
        let got = select_curriculum(&perf, &CurriculumConfig { tau, budget }).unwrap();
        let want = common::curriculum_by_sorting(&perf, tau, budget);
        ensure(got == want, || format!("tau {tau} budget {budget}: {got:?} vs {want:?}"))?;
    }
    for _ in 0..500 {
        let record = |r: f64| {
            let mut t = TrajectoryRecord::format_failure("g", String::new(), String::new(), "x");
            t.total_reward = r;
            t
        };
        let n = rng.random_range(1..=8);
        let c = rng.random_range(-1.0..=1.0);
        let flat = RolloutGroup::new("g", (0..n).map(|_| record(c)).collect()).unwrap();
        let mut mixed_rewards: Vec<f64> = (0..n).map(|_| c).collect();
        mixed_rewards.push(c + 0.5);
        let mixed = RolloutGroup::new("g", mixed_rewards.iter().map(|&r| record(r)).collect()).unwrap();
        let kept = filter_groups(vec![flat, mixed.clone()], 1e-8);
        ensure(kept == vec![mixed], || "zero-variance group survived or mixed group altered".into())?;
    }
    Ok(())
}

fn merge_laws() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let shapes = common::random_shapes(&mut rng);
        let k = rng.random_range(1..=6);
        let maps: Vec<_> = (0..k).map(|_| common::random_param_map(&mut rng, &shapes)).collect();
        let merged = merge_checkpoints(&maps).map_err(|e| e.to_string())?;
        ensure(merge_checkpoints(&maps[..1]).unwrap() == maps[0], || "singleton merge differs".into())?;
        let mut shuffled = maps.clone();
        shuffled.shuffle(&mut rng);
        ensure(merge_checkpoints(&shuffled).unwrap() == merged, || "merge depends on input order".into())?;
        let oracle = common::mean_by_definition(&maps);
        for (name, t) in &merged.entries {
            for (i, (&got, &want)) in t.values.iter().zip(&oracle[name]).enumerate() {
                ensure((f64::from(got) - want).abs() <= 1e-5 * (1.0 + want.abs()), || format!("{name}[{i}]: {got} vs {want}"))?;
            }
        }
    }
    Ok(())
}

fn end_to_end() -> Check {
    let tasks = generate_synthetic(&SyntheticConfig { n_tasks: 50, seed: 42, ..SyntheticConfig::default() }).map_err(|e| e.to_string())?;
    ensure(tasks.len() == 50, || format!("{} tasks", tasks.len()))?;
    let cfg = PipelineConfig::default();
    let opts = EvalOptions { with_reward: true, ..EvalOptions::default() };

    let good = Backends::mock(&tasks, MockProxy::Keyword, &cfg).unwrap();
    let report = run_eval(&tasks, &cfg, &good, &opts).map_err(|e| e.to_string())?;
    let a = &report.aggregate;
    ensure(a.n_success == 50, || format!("{} successes", a.n_success))?;
    ensure(a.mean_f1 == Some(1.0), || format!("mean F1 {:?}", a.mean_f1))?;
    ensure(a.mean_ndcg_at_1 == Some(1.0), || format!("ndcg@1 {:?}", a.mean_ndcg_at_1))?;

    let bad = Backends::mock(&tasks, MockProxy::Adversarial, &cfg).unwrap();
    let report = run_eval(&tasks, &cfg, &bad, &opts).map_err(|e| e.to_string())?;
    ensure(report.aggregate.mean_ndcg_at_1 == Some(0.0), || format!("adversarial ndcg@1 {:?}", report.aggregate.mean_ndcg_at_1))
}

fn live_smoke() -> Outcome {
    if std::env::var("MEMSIFTER_LIVE_SMOKE").as_deref() != Ok("1") {
        return Outcome::Skip("set MEMSIFTER_LIVE_SMOKE=1 and MEMSIFTER_API_BASE to run".into());
    }
    run(|| {
        let cfg = load_config(None).map_err(|e| e.to_string())?;
        let chat = |timeout| HttpChat::from_env(timeout).map_err(|e| e.to_string());
        let proxy = ChatClient::new(Arc::new(chat(cfg.proxy.policy.timeout())?), cfg.proxy.policy).unwrap();
        let working = ChatClient::new(Arc::new(chat(cfg.working.policy.timeout())?), cfg.working.policy).unwrap();
        let embedder = HttpEmbedder::from_env(&cfg.embedding.model, cfg.embedding.policy.timeout())
            .ok()
            .and_then(|e| EmbedClient::new(Arc::new(e), cfg.embedding.policy).ok());
        let bank = MemoryBank::new(vec![
            Session::new(0, vec![Turn::new(Role::User, "I adopted a beagle named Waffles last spring.")]).unwrap(),
            Session::new(1, vec![Turn::new(Role::User, "The quarterly budget review moved to Thursday.")]).unwrap(),
            Session::new(2, vec![Turn::new(Role::User, "My sister lives in Porto now.")]).unwrap(),
        ])
        .unwrap();
        let task = Task::new("live", "What is the name of my dog?", vec!["Waffles".into()], Some(BTreeSet::from([0])), Arc::new(bank))
            .unwrap();
        let mut ranker = Ranker::new(&proxy);
        ranker.embedder = embedder.as_ref();
        ranker.params = cfg.proxy.params();
        ranker.top_k = 3;
        let ranked = ranker.rank(&task.question, &task.bank).map_err(|e| format!("rank: {e}"))?;
        let engine = RewardEngine::new(&working, cfg.working.params(), cfg.reward());
        let breakdown = engine.score(&task, &ranked.ranking, &task.bank, 0).map_err(|e| format!("reward: {e}"))?;
        ensure(breakdown.r_total.is_finite(), || "non-finite reward".into())
    })
}

type Criterion = Box<dyn FnOnce() -> Outcome>;

fn main() -> ExitCode {
    let criteria: Vec<(&str, Criterion)> = vec![
        ("reward identity: regrouped and marginal forms agree", Box::new(|| run(reward_identity))),
        ("weight laws and discount spot values", Box::new(|| run(weight_laws))),
        ("rank sensitivity under the binary oracle", Box::new(|| run(rank_sensitivity))),
        ("zero-utility credit assignment", Box::new(|| run(zero_utility))),
        ("NDCG matches brute-force definition", Box::new(|| run(ndcg_equivalence))),
        ("parser robustness under fuzzing", Box::new(|| run(parser_robustness))),
        ("GRPO advantages, curriculum and group filtering", Box::new(|| run(grpo_and_curriculum))),
        ("checkpoint merge laws", Box::new(|| run(merge_laws))),
        ("end-to-end mock pipeline", Box::new(|| run(end_to_end))),
        ("live endpoint smoke test", Box::new(live_smoke)),
    ];
    let prev_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        match check() {
            Outcome::Pass => println!("criterion {:>2}: PASS  {name}", i + 1),
            Outcome::Skip(why) => println!("criterion {:>2}: SKIP  {name} ({why})", i + 1),
            Outcome::Fail(why) => {
                failed += 1;
                println!("criterion {:>2}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    std::panic::set_hook(prev_hook);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
