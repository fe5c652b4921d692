//! `sifter`: every pipeline stage as a subcommand. JSON goes to stdout, logs
//! to stderr. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use sifter_core::backends::mock::{KeywordEmbedder, KeywordProxy, OracleWorkingLlm, RandomProxy};
use sifter_core::backends::{ChatBackend, HttpChat, HttpEmbedder};
use sifter_core::bench::{dataset_to_jsonl, load_task, save_dataset, EvalOptions, MockProxy};
use sifter_core::training::{
    assign_advantages, export_trajectories, group_trajectories, load_trajectories, CurriculumConfig,
};
use sifter_core::{
    generate_synthetic, grpo_advantages, load_bank, load_config, load_dataset, load_history, merge_checkpoints,
    run_eval, save_bank, segment_history, select_curriculum, Backends, ChatClient, CutoffSchedule, EmbedClient, Error,
    ParamMap, PipelineConfig, PromptTemplate, Ranker, RankingResult, RewardEngine, SegmentationPolicy,
    SyntheticConfig,
};

#[derive(Parser, Debug)]
#[command(name = "sifter", version, about = "Proxy-ranked memory retrieval with outcome rewards")]
struct Cli {
    /// TOML configuration file; MEMSIFTER_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for mock backends and generators.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Boundaries,
    TimeGap,
    FixedSize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MockArg {
    Keyword,
    Adversarial,
    Random,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment a JSON-lines turn stream into a session bank.
    Ingest {
        turns: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "boundaries")]
        policy: PolicyArg,
        #[arg(long, default_value_t = 1800)]
        max_gap_secs: i64,
        #[arg(long, default_value_t = 8)]
        turns_per_session: usize,
    },
    /// Rank a bank's sessions for a query; prints the ranking.
    Rank {
        #[arg(short, long)]
        query: String,
        #[arg(short, long)]
        bank: PathBuf,
        /// Offline proxy instead of the HTTP endpoint.
        #[arg(long, value_enum, num_args = 0..=1, default_missing_value = "keyword")]
        mock: Option<MockArg>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Prompt template with {HISTORY}, {CONTEXT} and {TOP_K} placeholders.
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Score a ranking by memory ablation; prints the reward breakdown.
    Reward {
        #[arg(short, long)]
        task: PathBuf,
        #[arg(short, long)]
        ranking: PathBuf,
        /// `fib` or an explicit list such as `1,2,3`.
        #[arg(long, default_value = "fib")]
        schedule: String,
        /// Oracle working model that answers correctly iff a gold session is shown.
        #[arg(long)]
        mock_oracle: bool,
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Pick the tasks whose performance is closest to the anchor.
    Curriculum {
        #[arg(long)]
        perf: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Group-relative advantages for a JSON reward list, or for a trajectory file.
    Advantages {
        #[arg(long, conflicts_with = "trajectories", required_unless_present = "trajectories")]
        rewards: Option<PathBuf>,
        /// Filter zero-variance groups and write records with advantages to --output.
        #[arg(long, requires = "output")]
        trajectories: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Elementwise mean of parameter maps.
    Merge {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Generate a synthetic dataset (JSON lines to --output, else stdout).
    GenData {
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        n_tasks: usize,
        #[arg(long, default_value_t = 24)]
        n_sessions: usize,
        #[arg(long, default_value_t = 1)]
        n_gold: usize,
        #[arg(long, default_value_t = 0.5)]
        distractor_ratio: f64,
        #[arg(long, default_value_t = 4)]
        filler_turns: usize,
    },
    /// End-to-end evaluation; writes the report and prints the aggregate.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, num_args = 0..=1, default_missing_value = "keyword")]
        mock: Option<MockArg>,
        /// Also run the ablation reward for each task.
        #[arg(long)]
        with_reward: bool,
        #[arg(long, default_value_t = 0)]
        step: u64,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
    },
}

type CliResult = Result<Value, Error>;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn to_value<T: serde::Serialize>(v: &T) -> CliResult {
    Ok(serde_json::to_value(v)?)
}

fn mock_proxy(kind: MockArg, seed: u64) -> MockProxy {
    match kind {
        MockArg::Keyword => MockProxy::Keyword,
        MockArg::Adversarial => MockProxy::Adversarial,
        MockArg::Random => MockProxy::Random { seed },
    }
}

fn ingest(turns: &Path, output: &Path, policy: SegmentationPolicy) -> CliResult {
    let bank = segment_history(load_history(turns)?, &policy)?;
    save_bank(&bank, output)?;
    Ok(json!({
        "output": output.display().to_string(),
        "sessions": bank.len(),
        "total_tokens": bank.total_tokens(),
    }))
}

fn rank(
    cfg: &PipelineConfig,
    seed: u64,
    query: &str,
    bank: &Path,
    mock: Option<MockArg>,
    top_k: Option<usize>,
    template: Option<&Path>,
) -> CliResult {
    let bank = load_bank(bank)?;
    let (proxy, embedder): (Arc<dyn ChatBackend>, EmbedClient) = match mock {
        Some(kind) => {
            let proxy: Arc<dyn ChatBackend> = match kind {
                MockArg::Keyword => Arc::new(KeywordProxy::new()),
                MockArg::Adversarial => Arc::new(KeywordProxy::adversarial()),
                MockArg::Random => Arc::new(RandomProxy::new(seed)),
            };
            (proxy, EmbedClient::new(Arc::new(KeywordEmbedder::default()), cfg.embedding.policy)?)
        }
        None => (
            Arc::new(HttpChat::from_env(cfg.proxy.policy.timeout())?),
            EmbedClient::new(
                Arc::new(HttpEmbedder::from_env(&cfg.embedding.model, cfg.embedding.policy.timeout())?),
                cfg.embedding.policy,
            )?
            .with_batch_size(cfg.embedding.batch_size),
        ),
    };
    let client = ChatClient::new(proxy, cfg.proxy.policy)?.with_seed(seed);
    let mut ranker = Ranker::new(&client);
    ranker.embedder = Some(&embedder);
    ranker.params = cfg.proxy.params();
    ranker.prefilter = cfg.prefilter();
    ranker.top_k = top_k.unwrap_or(cfg.top_k);
    ranker.strict = cfg.strict_parsing;
    if let Some(path) = template {
        ranker.template = PromptTemplate::from_file(path)?;
    }
    let out = ranker.rank(query, &bank)?;
    if !out.dropped_ids.is_empty() {
        log::info!("pre-filter dropped {} sessions", out.dropped_ids.len());
    }
    to_value(&out.ranking)
}

fn parse_schedule(spec: &str, list_len: usize, include_full: bool) -> Result<CutoffSchedule, Error> {
    if spec.trim() == "fib" {
        return CutoffSchedule::fibonacci(list_len, include_full);
    }
    let cutoffs = spec
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad cutoff `{t}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    CutoffSchedule::new(cutoffs)
}

fn reward(
    cfg: &PipelineConfig,
    seed: u64,
    task: &Path,
    ranking: &Path,
    schedule: &str,
    mock_oracle: bool,
    step: u64,
) -> CliResult {
    let task = load_task(task)?;
    let ranking: RankingResult = read_json(ranking)?;
    let valid: BTreeSet<u64> = task.bank.ids().into_iter().collect();
    if let Some(id) = ranking.ranked_ids.iter().find(|id| !valid.contains(id)) {
        return Err(Error::InvalidArgument(format!("ranked id {id} is not in the task's bank")));
    }
    let backend: Arc<dyn ChatBackend> = if mock_oracle {
        let oracle = OracleWorkingLlm::new();
        oracle.register(&task.question, task.gold_session_ids.clone().unwrap_or_default(), task.gold_answers[0].clone());
        Arc::new(oracle)
    } else {
        Arc::new(HttpChat::from_env(cfg.working.policy.timeout())?)
    };
    let working = ChatClient::new(backend, cfg.working.policy)?.with_seed(seed);
    let engine = RewardEngine::new(&working, cfg.working.params(), cfg.reward());
    let schedule = parse_schedule(schedule, ranking.ranked_ids.len(), cfg.include_full_cutoff)?;
    let breakdown = engine.score_with_schedule(&task, &ranking, &task.bank, &schedule, step)?;
    to_value(&breakdown)
}

fn curriculum(cfg: &PipelineConfig, perf: &Path, tau: Option<f64>, budget: Option<usize>) -> CliResult {
    let perf: BTreeMap<String, f64> = read_json(perf)?;
    let defaults = cfg.curriculum();
    let cc = CurriculumConfig { tau: tau.unwrap_or(defaults.tau), budget: budget.unwrap_or(defaults.budget) };
    to_value(&select_curriculum(&perf, &cc)?)
}

fn advantages(
    cfg: &PipelineConfig,
    rewards: Option<&Path>,
    trajectories: Option<&Path>,
    output: Option<&Path>,
    eps: Option<f64>,
) -> CliResult {
    let eps = eps.unwrap_or(cfg.eps_std);
    if let Some(path) = rewards {
        let rewards: Vec<f64> = read_json(path)?;
        return to_value(&grpo_advantages(&rewards, eps)?);
    }
    let (Some(input), Some(output)) = (trajectories, output) else {
        return Err(Error::InvalidArgument("either --rewards or --trajectories with --output is required".into()));
    };
    let groups = group_trajectories(load_trajectories(input)?);
    let total = groups.len();
    let mut kept = sifter_core::filter_groups(groups, eps);
    for g in &mut kept {
        assign_advantages(g, eps)?;
    }
    let written = export_trajectories(&kept, output)?;
    Ok(json!({ "groups_in": total, "groups_kept": kept.len(), "records_written": written }))
}

fn merge(inputs: &[PathBuf], output: &Path) -> CliResult {
    let maps = inputs.iter().map(ParamMap::load).collect::<Result<Vec<_>, _>>()?;
    let merged = merge_checkpoints(&maps)?;
    merged.save(output)?;
    Ok(json!({
        "inputs": inputs.len(),
        "entries": merged.entries.len(),
        "output": output.display().to_string(),
    }))
}

fn eval(
    cfg: &PipelineConfig,
    seed: u64,
    dataset: &Path,
    report: &Path,
    csv: Option<&Path>,
    mock: Option<MockArg>,
    opts: EvalOptions,
) -> CliResult {
    let tasks = load_dataset(dataset)?;
    let backends = match mock {
        Some(kind) => Backends::mock(&tasks, mock_proxy(kind, seed), cfg)?,
        None => Backends::http(cfg)?,
    };
    let result = run_eval(&tasks, cfg, &backends, &opts)?;
    result.save_json(report)?;
    if let Some(path) = csv {
        result.save_csv(path)?;
    }
    Ok(json!({
        "report": report.display().to_string(),
        "config_fingerprint": result.config_fingerprint,
        "aggregate": result.aggregate,
    }))
}

fn run(cli: Cli) -> CliResult {
    let cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::Ingest { turns, output, policy, max_gap_secs, turns_per_session } => {
            let policy = match policy {
                PolicyArg::Boundaries => SegmentationPolicy::Boundaries,
                PolicyArg::TimeGap => SegmentationPolicy::TimeGap { max_gap_secs },
                PolicyArg::FixedSize => SegmentationPolicy::FixedSize { turns: turns_per_session },
            };
            ingest(&turns, &output, policy)
        }
        Command::Rank { query, bank, mock, top_k, template } => {
            rank(&cfg, seed, &query, &bank, mock, top_k, template.as_deref())
        }
        Command::Reward { task, ranking, schedule, mock_oracle, step } => {
            reward(&cfg, seed, &task, &ranking, &schedule, mock_oracle, step)
        }
        Command::Curriculum { perf, tau, budget } => curriculum(&cfg, &perf, tau, budget),
        Command::Advantages { rewards, trajectories, output, eps } => {
            advantages(&cfg, rewards.as_deref(), trajectories.as_deref(), output.as_deref(), eps)
        }
        Command::Merge { inputs, output } => merge(&inputs, &output),
        Command::GenData { output, n_tasks, n_sessions, n_gold, distractor_ratio, filler_turns } => {
            let sc = SyntheticConfig { n_tasks, n_sessions, n_gold, distractor_ratio, seed, filler_turns };
            let tasks = generate_synthetic(&sc)?;
            match output {
                Some(path) => {
                    save_dataset(&tasks, &path)?;
                    Ok(json!({ "output": path.display().to_string(), "tasks": tasks.len() }))
                }
                None => {
                    let mut out = std::io::stdout().lock();
                    out.write_all(dataset_to_jsonl(&tasks)?.as_bytes())
                        .map_err(|e| Error::io("<stdout>", e))?;
                    Ok(Value::Null)
                }
            }
        }
        Command::Eval { dataset, report, csv, mock, with_reward, step, concurrency } => eval(
            &cfg,
            seed,
            &dataset,
            &report,
            csv.as_deref(),
            mock,
            EvalOptions { with_reward, step, concurrency },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    match run(cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON value serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
