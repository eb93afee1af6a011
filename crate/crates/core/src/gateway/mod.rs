//! Black-box model access: endpoint descriptions, prompt construction, and a
//! rate-limited, retrying, cache-backed response collector.

mod collect;
mod http;
mod prompt;
mod ratelimit;

use std::time::{SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

pub use collect::{Collection, FailedRequest, Gateway, PromptItem, RetryPolicy};
pub use http::HttpBackend;
pub use prompt::{build_prompt, PromptTemplate};
pub use ratelimit::RateLimiter;

/// Default number of retries after the first failed request.
pub const DEFAULT_MAX_RETRIES: u32 = 3;
/// Default number of reference pairs.
pub const DEFAULT_REFERENCE_PAIRS: usize = 5;
/// Temperature used by reference endpoints unless configured otherwise.
pub const REFERENCE_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Suspect,
    ReferenceRaw,
    ReferenceTuned,
    Rephraser,
    EmbedderBackend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    /// `None` leaves the provider default in place.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Responses requested per prompt.
    #[serde(default = "default_n_samples")]
    pub n_samples: u32,
}

fn default_max_tokens() -> u32 {
    512
}

fn default_n_samples() -> u32 {
    crate::inference::DEFAULT_K
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: None,
            max_tokens: default_max_tokens(),
            n_samples: default_n_samples(),
        }
    }
}

impl DecodingParams {
    pub fn reference() -> Self {
        DecodingParams {
            temperature: Some(REFERENCE_TEMPERATURE),
            n_samples: 1,
            ..Default::default()
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = Some(t);
        self
    }
}

/// An addressable black-box model.
///
/// `base_url` is either an HTTP(S) URL for the chat-completion protocol or
/// `synthetic:<profile>` for an in-process simulated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub name: String,
    pub role: Role,
    pub base_url: String,
    pub model_id: String,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub decoding: DecodingParams,
    /// Requests per second; unlimited when absent.
    #[serde(default)]
    pub rate_limit: Option<f64>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Concurrent in-flight requests.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub supports_logprobs: bool,
}

fn default_max_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

fn default_concurrency() -> usize {
    8
}

impl ModelEndpoint {
    pub fn new(name: impl Into<String>, role: Role, base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        let decoding = match role {
            Role::ReferenceRaw | Role::ReferenceTuned => DecodingParams::reference(),
            _ => DecodingParams::default(),
        };
        ModelEndpoint {
            name: name.into(),
            role,
            base_url: base_url.into(),
            model_id: model_id.into(),
            auth_env: None,
            decoding,
            rate_limit: None,
            max_retries: DEFAULT_MAX_RETRIES,
            concurrency: default_concurrency(),
            supports_logprobs: false,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.base_url.starts_with("synthetic:")
    }
}

/// A non-trained reference model and its fine-tuned counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePair {
    pub index: usize,
    pub architecture: String,
    pub raw: ModelEndpoint,
    pub tuned: ModelEndpoint,
}

impl ReferencePair {
    pub fn validate(&self) -> crate::Result<()> {
        if self.raw.name == self.tuned.name
            || (self.raw.base_url == self.tuned.base_url && self.raw.model_id == self.tuned.model_id)
        {
            return Err(crate::Error::config(
                format!("pair[{}]", self.index),
                "raw and tuned references must be different models",
            ));
        }
        if self.raw.role != Role::ReferenceRaw || self.tuned.role != Role::ReferenceTuned {
            return Err(crate::Error::config(
                format!("pair[{}]", self.index),
                "pair members must have roles reference_raw and reference_tuned",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Network,
    Cache,
    Synthetic,
}

/// One text response from one endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub endpoint_name: String,
    pub sample_id: String,
    pub attempt: u32,
    pub text: String,
    pub decoding: DecodingParams,
    pub byte_len: usize,
    pub origin: Origin,
    /// Milliseconds since the Unix epoch when the response was produced.
    pub timestamp_ms: u64,
}

impl ResponseRecord {
    pub fn new(
        endpoint_name: impl Into<String>,
        sample_id: impl Into<String>,
        attempt: u32,
        text: String,
        decoding: DecodingParams,
        origin: Origin,
    ) -> Self {
        ResponseRecord {
            endpoint_name: endpoint_name.into(),
            sample_id: sample_id.into(),
            attempt,
            byte_len: text.len(),
            text,
            decoding,
            origin,
            timestamp_ms: now_ms(),
        }
    }
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// Failure of a single request against an endpoint.
#[derive(Debug, Clone, thiserror::Error)]
pub enum RequestError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("{0}")]
    Capability(String),
    #[error("{0}")]
    Protocol(String),
    #[error("credentials: {0}")]
    Credentials(String),
}

impl RequestError {
    /// Transport failures, rate limiting and server errors are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            RequestError::Transport(_) => true,
            RequestError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Something that answers prompts on behalf of endpoints.
#[async_trait]
pub trait Backend: Send + Sync {
    /// Origin stamped on freshly produced records.
    fn origin(&self, endpoint: &ModelEndpoint) -> Origin {
        if endpoint.is_synthetic() {
            Origin::Synthetic
        } else {
            Origin::Network
        }
    }

    /// One chat completion. `attempt` distinguishes the independent samples
    /// drawn for one prompt.
    async fn chat(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        decoding: &DecodingParams,
        attempt: u32,
    ) -> Result<String, RequestError>;

    /// Per-token log-probabilities of `continuation` forced after `prompt`.
    async fn logprobs(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, RequestError>;
}
