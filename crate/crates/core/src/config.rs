//! Typed pipeline configuration.
//!
//! Resolution is layered: built-in defaults, then a TOML file, then
//! environment variables. An environment variable `MEMSIFTER_<PATH>` sets the
//! key `<path>` lowercased, with `__` separating nested tables:
//!
//! ```text
//! MEMSIFTER_TAU=0.3                      -> tau = 0.3
//! MEMSIFTER_PROXY__MODEL=qwen3-4b        -> [proxy] model = "qwen3-4b"
//! MEMSIFTER_WORKING__POLICY__MAX_RETRIES=5
//! ```
//!
//! Values are read as TOML literals and fall back to plain strings.
//! `MEMSIFTER_API_KEY`, `MEMSIFTER_API_BASE` and `MEMSIFTER_EMBED_BASE` are
//! connection settings consumed by the HTTP backends and are not config keys.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::backends::{BackendPolicy, ModelParams, ENV_API_BASE, ENV_API_KEY, ENV_EMBED_BASE};
use crate::error::{Error, Result};
use crate::prefilter::PrefilterConfig;
use crate::reward::{AnnealSchedule, AnswerScorer, RewardConfig};
use crate::training::CurriculumConfig;

pub const ENV_PREFIX: &str = "MEMSIFTER_";

/// Model parameters plus transport policy for one backend role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub policy: BackendPolicy,
}

impl EndpointConfig {
    fn with(model: &str, temperature: f64, max_output_tokens: u32) -> Self {
        Self { model: model.into(), temperature, max_output_tokens, policy: BackendPolicy::default() }
    }

    pub fn params(&self) -> ModelParams {
        ModelParams { model: self.model.clone(), temperature: self.temperature, max_output_tokens: self.max_output_tokens }
    }
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self::with("default", 0.0, 1024)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub model: String,
    pub batch_size: usize,
    pub policy: BackendPolicy,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { model: "text-embedding-3-small".into(), batch_size: 64, policy: BackendPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub top_k: usize,
    pub proxy_context_budget_tokens: usize,
    pub prefilter_enabled: bool,
    pub include_full_cutoff: bool,
    pub alpha: f64,
    pub beta0: f64,
    pub anneal_steps: u64,
    pub tau: f64,
    pub grpo_group_size: usize,
    pub batch_size: usize,
    pub eps_std: f64,
    pub scorer: AnswerScorer,
    pub strict_parsing: bool,
    pub merge_top_k: usize,
    pub proxy: EndpointConfig,
    pub working: EndpointConfig,
    pub embedding: EmbeddingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            proxy_context_budget_tokens: 131_072,
            prefilter_enabled: true,
            include_full_cutoff: true,
            alpha: 1.0,
            beta0: 0.5,
            anneal_steps: 100,
            tau: 0.2,
            grpo_group_size: 6,
            batch_size: 32,
            eps_std: 1e-8,
            scorer: AnswerScorer::F1,
            strict_parsing: false,
            merge_top_k: 3,
            proxy: EndpointConfig::with("qwen3-4b", 1.0, 16_384),
            working: EndpointConfig::with("deepseek-chat", 0.0, 1024),
            embedding: EmbeddingConfig::default(),
        }
    }
}

fn check(ok: bool, field: &str, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, message()))
    }
}

fn check_policy(prefix: &str, policy: &BackendPolicy) -> Result<()> {
    policy.validate().map_err(|e| match e {
        Error::Config { field, message } => Error::config(format!("{prefix}.policy.{field}"), message),
        other => other,
    })
}

fn check_endpoint(prefix: &str, e: &EndpointConfig) -> Result<()> {
    check(!e.model.trim().is_empty(), &format!("{prefix}.model"), || "must not be empty".into())?;
    check(e.temperature.is_finite() && e.temperature >= 0.0, &format!("{prefix}.temperature"), || {
        format!("{} must be a finite value >= 0", e.temperature)
    })?;
    check(e.max_output_tokens >= 1, &format!("{prefix}.max_output_tokens"), || "must be >= 1".into())?;
    check_policy(prefix, &e.policy)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.top_k >= 1, "top_k", || "must be >= 1".into())?;
        check(self.proxy_context_budget_tokens >= 1, "proxy_context_budget_tokens", || "must be >= 1".into())?;
        check(self.alpha.is_finite() && self.alpha >= 0.0, "alpha", || format!("{} must be >= 0", self.alpha))?;
        check(self.beta0.is_finite() && self.beta0 >= 0.0, "beta0", || format!("{} must be >= 0", self.beta0))?;
        check(self.anneal_steps >= 1, "anneal_steps", || "must be >= 1".into())?;
        check((0.0..=1.0).contains(&self.tau), "tau", || format!("{} outside [0, 1]", self.tau))?;
        check(self.grpo_group_size >= 2, "grpo_group_size", || "must be >= 2".into())?;
        check(self.batch_size >= 1, "batch_size", || "must be >= 1".into())?;
        check(self.eps_std.is_finite() && self.eps_std >= 0.0, "eps_std", || format!("{} must be >= 0", self.eps_std))?;
        check(self.merge_top_k >= 1, "merge_top_k", || "must be >= 1".into())?;
        check_endpoint("proxy", &self.proxy)?;
        check_endpoint("working", &self.working)?;
        check(!self.embedding.model.trim().is_empty(), "embedding.model", || "must not be empty".into())?;
        check(self.embedding.batch_size >= 1, "embedding.batch_size", || "must be >= 1".into())?;
        check_policy("embedding", &self.embedding.policy)
    }

    /// Hex SHA-256 of the canonical JSON form; changes iff a resolved value changes.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn prefilter(&self) -> PrefilterConfig {
        PrefilterConfig { enabled: self.prefilter_enabled, budget_tokens: self.proxy_context_budget_tokens }
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            include_full_cutoff: self.include_full_cutoff,
            alpha: self.alpha,
            anneal: AnnealSchedule { beta0: self.beta0, anneal_steps: self.anneal_steps },
            scorer: self.scorer,
            ndcg_k: self.top_k,
        }
    }

    pub fn curriculum(&self) -> CurriculumConfig {
        CurriculumConfig { tau: self.tau, budget: self.batch_size }
    }
}

fn merge_tables(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn env_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn env_overlay(vars: impl IntoIterator<Item = (String, String)>) -> Result<Table> {
    let reserved = [ENV_API_KEY, ENV_API_BASE, ENV_EMBED_BASE];
    let mut overlay = Table::new();
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !reserved.contains(&k.as_str()))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::config(key, "malformed environment key"));
        }
        let (leaf, parents) = path.split_last().expect("non-empty path");
        let mut table = &mut overlay;
        for p in parents {
            table = match table.entry(p.clone()).or_insert_with(|| Value::Table(Table::new())) {
                Value::Table(t) => t,
                _ => return Err(Error::config(key.clone(), "conflicts with a scalar key")),
            };
        }
        table.insert(leaf.clone(), env_value(&raw));
    }
    Ok(overlay)
}

fn field_from_message(message: &str) -> String {
    const MARKER: &str = "unknown field `";
    if let Some(i) = message.find(MARKER) {
        let rest = &message[i + MARKER.len()..];
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    "<config>".to_string()
}

/// Defaults, then the file at `path` (if any), then the `MEMSIFTER_*`
/// entries of `env`. The result is validated.
pub fn resolve_config(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<PipelineConfig> {
    let mut merged = Table::try_from(PipelineConfig::default()).expect("defaults serialize to TOML");
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(path.display().to_string(), e.to_string()))?;
        merge_tables(&mut merged, file);
    }
    merge_tables(&mut merged, env_overlay(env)?);
    let cfg: PipelineConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(field_from_message(e.message()), e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// [`resolve_config`] against the process environment.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    resolve_config(path, std::env::vars())
}
