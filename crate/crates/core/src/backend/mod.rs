//! Text-generation backends behind one blocking interface.

mod cache;
mod http;
mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{with_cache, CachedBackend};
pub use http::{HttpBackend, HttpConfig, RetryPolicy, API_KEY_ENV};
pub use scripted::ScriptedBackend;

/// Lowest temperature on the sweep grid; stands in for greedy decoding.
pub const GREEDY_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self::greedy()
    }
}

impl DecodingParams {
    /// Temperature at the grid minimum with top-k 1. Chat-completion servers
    /// have no true greedy switch.
    pub fn greedy() -> Self {
        Self {
            temperature: Some(GREEDY_TEMPERATURE),
            top_k: Some(1),
            top_p: None,
            max_tokens: 512,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let unit = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x > 0.0 && x <= 1.0) => Err(BackendError::InvalidRequest(format!(
                "{name} must be in (0, 1], got {x}"
            ))),
            _ => Ok(()),
        };
        unit("temperature", self.temperature)?;
        unit("top_p", self.top_p)?;
        if self.top_k == Some(0) {
            return Err(BackendError::InvalidRequest("top_k must be positive".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallPurpose {
    #[default]
    Generate,
    Rewrite,
    Judge,
}

/// Identifies one call within an experiment: which trial, which attempt
/// inside the trial's strategy loop and what the call is for. Part of the
/// cache key, so repeated attempts with an identical prompt stay distinct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CallId {
    pub trial: u64,
    pub attempt: u32,
    pub purpose: CallPurpose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub params: DecodingParams,
    /// Keywords the prompt asks for, in prompt order. Never sent upstream;
    /// the synthetic model reads it instead of parsing the prompt.
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub call: CallId,
}

impl GenerationRequest {
    pub fn user_prompt(model_id: impl Into<String>, prompt: impl Into<String>, params: DecodingParams) -> Self {
        Self {
            model_id: model_id.into(),
            messages: vec![Message::user(prompt)],
            params,
            keywords: Vec::new(),
            call: CallId::default(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.messages.last() {
            None => return Err(BackendError::InvalidRequest("request has no messages".into())),
            Some(m) if m.role != Role::User => {
                return Err(BackendError::InvalidRequest("last message must have role user".into()))
            }
            _ => {}
        }
        self.params.validate()
    }

    /// Content of the final user message.
    pub fn prompt(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub latency_ms: f64,
    pub prompt_tokens: Option<u32>,
    pub completion_tokens: Option<u32>,
    pub backend_id: String,
    /// Set when the result was served from the response cache.
    #[serde(default)]
    pub cached: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("rate limited after {attempts} attempts: {body}")]
    RateLimited { attempts: u32, body: String },
    #[error("upstream returned HTTP {status} after {attempts} attempts: {body}")]
    Upstream { status: u16, attempts: u32, body: String },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed upstream response ({reason}): {body}")]
    Malformed { reason: String, body: String },
    #[error("scripted backend exhausted after {calls} calls")]
    QueueExhausted { calls: usize },
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    /// Whether the backend honours `top_k`. Hosted GPT endpoints do not.
    fn supports_top_k(&self) -> bool {
        true
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(req)
    }

    fn supports_top_k(&self) -> bool {
        (**self).supports_top_k()
    }
}
