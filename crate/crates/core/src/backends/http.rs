//! Chat-completions and embeddings over HTTP, using the common
//! `POST {base}/chat/completions` and `POST {base}/embeddings` JSON shapes.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{ChatBackend, ChatRequest, EmbeddingBackend};
use crate::error::{BackendError, Error, Result};

pub const ENV_API_KEY: &str = "MEMSIFTER_API_KEY";
pub const ENV_API_BASE: &str = "MEMSIFTER_API_BASE";
pub const ENV_EMBED_BASE: &str = "MEMSIFTER_EMBED_BASE";

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

fn env_nonempty(key: &str) -> Option<String> {
    std::env::var(key).ok().filter(|v| !v.trim().is_empty())
}

fn transport_error(e: ureq::Error) -> Error {
    match e {
        ureq::Error::Timeout(_)
        | ureq::Error::Io(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound
        | ureq::Error::BodyStalled => Error::Backend(BackendError::transient(None, e.to_string())),
        other => Error::Backend(BackendError::fatal(None, other.to_string())),
    }
}

/// Map a non-2xx response onto the error taxonomy.
pub(crate) fn classify_status(status: u16, body: &str) -> Error {
    let lower = body.to_ascii_lowercase();
    if (status == 400 || status == 413)
        && (lower.contains("context_length") || lower.contains("context length") || lower.contains("too many tokens"))
    {
        return Error::ContextOverflow(body.chars().take(500).collect());
    }
    let message: String = body.chars().take(500).collect();
    if status == 408 || status == 409 || status == 429 || status >= 500 {
        Error::Backend(BackendError::transient(Some(status), message))
    } else {
        Error::Backend(BackendError::fatal(Some(status), message))
    }
}

fn post_json(agent: &ureq::Agent, url: &str, key: Option<&str>, body: serde_json::Value) -> Result<String> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(body).map_err(transport_error)?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(transport_error)?;
    if !(200..300).contains(&status) {
        return Err(classify_status(status, &text));
    }
    Ok(text)
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    reasoning_content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: usize,
    embedding: Vec<f32>,
}

/// Chat-completions client.
pub struct HttpChat {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
}

impl HttpChat {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        Self { agent: agent(timeout), base_url: base_url.into(), api_key }
    }

    /// Reads `MEMSIFTER_API_BASE` (required) and `MEMSIFTER_API_KEY`.
    pub fn from_env(timeout: Duration) -> Result<Self> {
        let base = env_nonempty(ENV_API_BASE).ok_or_else(|| Error::config(ENV_API_BASE, "not set"))?;
        Ok(Self::new(base, env_nonempty(ENV_API_KEY), timeout))
    }

    pub(crate) fn parse_response(body: &str) -> Result<String> {
        let parsed: ChatResponse = serde_json::from_str(body)
            .map_err(|e| Error::Backend(BackendError::fatal(None, format!("malformed chat response: {e}"))))?;
        let message = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Backend(BackendError::fatal(None, "chat response has no choices")))?
            .message;
        let content = message.content.unwrap_or_default();
        // Some servers split reasoning into a separate field; re-attach it as a
        // think block so downstream parsing sees one protocol.
        Ok(match message.reasoning_content {
            Some(r) if !r.is_empty() && !content.contains("</think>") => format!("<think>{r}</think>{content}"),
            _ => content,
        })
    }
}

impl ChatBackend for HttpChat {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
        });
        let text = post_json(&self.agent, &endpoint(&self.base_url, "chat/completions"), self.api_key.as_deref(), body)?;
        Self::parse_response(&text)
    }
}

/// Embeddings client.
pub struct HttpEmbedder {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
    model: String,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>, timeout: Duration) -> Self {
        Self { agent: agent(timeout), base_url: base_url.into(), api_key, model: model.into() }
    }

    /// Reads `MEMSIFTER_EMBED_BASE`, falling back to `MEMSIFTER_API_BASE`.
    pub fn from_env(model: impl Into<String>, timeout: Duration) -> Result<Self> {
        let base = env_nonempty(ENV_EMBED_BASE)
            .or_else(|| env_nonempty(ENV_API_BASE))
            .ok_or_else(|| Error::config(ENV_EMBED_BASE, "not set"))?;
        Ok(Self::new(base, env_nonempty(ENV_API_KEY), model, timeout))
    }

    pub(crate) fn parse_response(body: &str, expected: usize) -> Result<Vec<Vec<f32>>> {
        let mut parsed: EmbeddingResponse = serde_json::from_str(body)
            .map_err(|e| Error::Backend(BackendError::fatal(None, format!("malformed embedding response: {e}"))))?;
        if parsed.data.len() != expected {
            return Err(Error::Backend(BackendError::fatal(
                None,
                format!("expected {expected} embeddings, got {}", parsed.data.len()),
            )));
        }
        parsed.data.sort_by_key(|d| d.index);
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let body = json!({ "model": self.model, "input": texts });
        let text = post_json(&self.agent, &endpoint(&self.base_url, "embeddings"), self.api_key.as_deref(), body)?;
        Self::parse_response(&text, texts.len())
    }
}
