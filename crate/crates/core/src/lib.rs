//! Memory retrieval through a small reasoning proxy, trained by the task
//! outcome of a larger working model.
//!
//! Interaction history is segmented into tagged sessions ([`memory`]),
//! optionally shrunk by an embedding pre-filter ([`prefilter`]), and ranked
//! by a proxy that thinks before emitting a `<ranking>` list ([`ranker`]).
//! The ranking is scored by ablating memory depth against the working model
//! ([`reward`]), and rollouts are prepared for group-relative policy training
//! ([`training`]). [`bench`] generates and evaluates datasets end to end.
//!
//! Reward, metric and training math is generic over [`Scalar`] (`f32` or
//! `f64`); the aliases below fix the precision used by the pipeline.

pub mod answer;
pub mod backends;
pub mod bench;
pub mod config;
pub mod error;
pub mod memory;
pub mod prefilter;
pub mod ranker;
pub mod reward;
pub mod scalar;
pub mod text;
pub mod training;

pub use backends::{BackendPolicy, ChatBackend, ChatClient, ChatRequest, EmbedClient, EmbeddingBackend, ModelParams};
pub use bench::{generate_synthetic, load_dataset, run_eval, Backends, EvalReport, SyntheticConfig, Task};
pub use config::{load_config, resolve_config, PipelineConfig};
pub use error::{BackendError, Error, Result};
pub use memory::{load_bank, load_history, save_bank, segment_history, HistoryTurn, MemoryBank, Role, SegmentationPolicy, Session, Turn};
pub use prefilter::{prefilter, FilteredBank, PrefilterConfig};
pub use ranker::{build_prompt, parse_ranking, PromptTemplate, Ranker, RankingResult, Repair};
pub use reward::{
    anneal_beta, evaluate_ablation, hybrid_reward, outcome_reward, outcome_reward_marginal, retrieval_reward_ndcg,
    weights, AnswerScorer, CutoffSchedule, RewardEngine,
};
pub use scalar::Scalar;
pub use training::{filter_groups, grpo_advantages, merge_checkpoints, select_curriculum, RolloutGroup, TrajectoryRecord};

/// Precision used for rewards and metrics.
pub type Real = f64;
/// Parameter precision for checkpoint averaging.
pub type ParamReal = f32;

pub type AblationScores = reward::AblationScores<Real>;
pub type WeightVector = reward::WeightVector<Real>;
pub type HybridReward = reward::HybridReward<Real>;
pub type RewardBreakdown = reward::RewardBreakdown<Real>;
pub type Tensor = training::Tensor<ParamReal>;
pub type ParamMap = training::ParamMap<ParamReal>;
