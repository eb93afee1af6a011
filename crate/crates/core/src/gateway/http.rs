use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Backend, DecodingParams, ModelEndpoint, RequestError, TokenLogprob};

/// Chat-completion compatible HTTP client.
///
/// Chat: `POST {base_url}/chat/completions`, text from
/// `choices[0].message.content`. Log-probabilities: `POST {base_url}/completions`
/// with `echo` so the prompt plus forced continuation are scored, read from
/// `choices[0].logprobs` (`tokens`, `token_logprobs`, `text_offset` in
/// characters).
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    send_seed: bool,
}

impl Default for HttpBackend {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client builds");
        HttpBackend {
            client,
            send_seed: true,
        }
    }

    /// Whether the attempt index is sent as the `seed` field (default on).
    pub fn with_seed_field(mut self, send_seed: bool) -> Self {
        self.send_seed = send_seed;
        self
    }

    async fn post(&self, endpoint: &ModelEndpoint, path: &str, body: Value) -> Result<Value, RequestError> {
        let url = format!("{}/{path}", endpoint.base_url.trim_end_matches('/'));
        let mut req = self.client.post(&url).json(&body);
        if let Some(var) = &endpoint.auth_env {
            let token = std::env::var(var)
                .map_err(|_| RequestError::Credentials(format!("environment variable {var} is not set")))?;
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| RequestError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 404 && path == "completions" {
            return Err(RequestError::Capability(format!("{url} not found; no completion endpoint")));
        }
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(RequestError::Status {
                status: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        resp.json::<Value>()
            .await
            .map_err(|e| RequestError::Decode(e.to_string()))
    }
}

#[derive(Deserialize)]
struct LogprobBlock {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

/// Pick the continuation's tokens out of an echoed completion.
pub(crate) fn continuation_logprobs(
    block: Value,
    prompt: &str,
    continuation: &str,
) -> Result<Vec<TokenLogprob>, RequestError> {
    let block: LogprobBlock = serde_json::from_value(block)
        .map_err(|e| RequestError::Capability(format!("response has no usable logprobs: {e}")))?;
    if block.tokens.len() != block.token_logprobs.len() || block.tokens.len() != block.text_offset.len() {
        return Err(RequestError::Protocol("logprob arrays differ in length".into()));
    }
    let start = prompt.chars().count();
    let mut out = Vec::new();
    for ((token, lp), offset) in block.tokens.into_iter().zip(block.token_logprobs).zip(block.text_offset) {
        if offset < start {
            continue;
        }
        let logprob = lp.ok_or_else(|| RequestError::Protocol(format!("no logprob for token {token:?}")))?;
        if logprob > 0.0 || logprob.is_nan() {
            return Err(RequestError::Protocol(format!("logprob {logprob} for token {token:?} is not <= 0")));
        }
        out.push(TokenLogprob { token, logprob });
    }
    let joined: String = out.iter().map(|t| t.token.as_str()).collect();
    if joined != continuation {
        return Err(RequestError::Protocol(format!(
            "tokenization mismatch: {} continuation tokens cover {} chars, continuation has {} chars",
            out.len(),
            joined.chars().count(),
            continuation.chars().count()
        )));
    }
    Ok(out)
}

#[async_trait]
impl Backend for HttpBackend {
    async fn chat(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        decoding: &DecodingParams,
        attempt: u32,
    ) -> Result<String, RequestError> {
        let mut body = json!({
            "model": endpoint.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": decoding.max_tokens,
        });
        if let Some(t) = decoding.temperature {
            body["temperature"] = json!(t);
        }
        if self.send_seed {
            body["seed"] = json!(attempt);
        }
        let value = self.post(endpoint, "chat/completions", body).await?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| RequestError::Decode("missing choices[0].message.content".into()))
    }

    async fn logprobs(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, RequestError> {
        let body = json!({
            "model": endpoint.model_id,
            "prompt": format!("{prompt}{continuation}"),
            "echo": true,
            "logprobs": 0,
            "max_tokens": 0,
            "temperature": 0.0,
        });
        let value = self.post(endpoint, "completions", body).await?;
        let block = value
            .pointer("/choices/0/logprobs")
            .cloned()
            .filter(|v| !v.is_null())
            .ok_or_else(|| RequestError::Capability("response carries no logprobs".into()))?;
        continuation_logprobs(block, prompt, continuation)
    }
}
