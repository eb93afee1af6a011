//! Token embedding providers for the greedy-match metric.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::word_tokens;

/// Largest batch sent to the embedding sidecar in one request.
pub const SIDECAR_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderProvider {
    SidecarService,
    MockOnehot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderInfo {
    pub provider: EmbedderProvider,
    /// `None` for the open-vocabulary one-hot embedder.
    pub dimension: Option<usize>,
    pub model_version: String,
}

/// One token's vector.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenVector {
    /// Unit basis vector identified by its token; distinct keys are orthogonal.
    Basis(String),
    Dense(Vec<f32>),
}

impl TokenVector {
    /// Cosine similarity. Mixed representations are treated as orthogonal.
    pub fn cosine(&self, other: &TokenVector) -> f64 {
        match (self, other) {
            (TokenVector::Basis(a), TokenVector::Basis(b)) => {
                if a == b {
                    1.0
                } else {
                    0.0
                }
            }
            (TokenVector::Dense(a), TokenVector::Dense(b)) => {
                let mut dot = 0.0f64;
                let mut na = 0.0f64;
                let mut nb = 0.0f64;
                for (x, y) in a.iter().zip(b) {
                    let (x, y) = (*x as f64, *y as f64);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                let denom = na.sqrt() * nb.sqrt();
                if denom > 0.0 {
                    dot / denom
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    }
}

/// Token-aligned vectors for one text.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVectors {
    pub tokens: Vec<String>,
    pub vectors: Vec<TokenVector>,
}

pub trait TokenEmbedder: Send + Sync {
    fn info(&self) -> EmbedderInfo;

    /// Embed each text; the output has one entry per input, in order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Arc<TokenVectors>>>;
}

/// Every distinct lowercased word token maps to its own basis vector.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockOneHotEmbedder;

impl TokenEmbedder for MockOneHotEmbedder {
    fn info(&self) -> EmbedderInfo {
        EmbedderInfo {
            provider: EmbedderProvider::MockOnehot,
            dimension: None,
            model_version: "mock-onehot-v1".into(),
        }
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Arc<TokenVectors>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let tokens = word_tokens(t);
                let vectors = tokens.iter().cloned().map(TokenVector::Basis).collect();
                Arc::new(TokenVectors { tokens, vectors })
            })
            .collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedItem {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    vectors: Vec<Vec<f32>>,
    #[serde(default)]
    truncated: bool,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    items: Vec<EmbedItem>,
    dim: usize,
    model_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct SidecarHealth {
    pub status: String,
    pub model_version: String,
    pub dim: usize,
}

/// Client for the embedding sidecar (`POST /embed`, `GET /health`).
///
/// Embeddings are memoized per text for the lifetime of the client, so
/// repeated scoring of the same oracle outputs costs one request.
pub struct SidecarEmbedder {
    base_url: String,
    agent: ureq::Agent,
    health: SidecarHealth,
    memo: Mutex<HashMap<String, Arc<TokenVectors>>>,
}

impl SidecarEmbedder {
    /// Connect and read the model version and dimension from `/health`.
    pub fn connect(base_url: impl Into<String>) -> Result<Self> {
        let base_url = base_url.into().trim_end_matches('/').to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        let health: SidecarHealth = agent
            .get(format!("{base_url}/health"))
            .call()
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| sidecar_error(&base_url, e))?;
        Ok(SidecarEmbedder {
            base_url,
            agent,
            health,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn health(&self) -> &SidecarHealth {
        &self.health
    }

    fn protocol(&self, message: String) -> Error {
        Error::Protocol {
            endpoint: self.base_url.clone(),
            message,
        }
    }

    fn fetch(&self, texts: &[&str]) -> Result<Vec<Arc<TokenVectors>>> {
        let resp: EmbedResponse = self
            .agent
            .post(format!("{}/embed", self.base_url))
            .send_json(EmbedRequest { texts })
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| sidecar_error(&self.base_url, e))?;
        if resp.items.len() != texts.len() {
            return Err(self.protocol(format!(
                "{} items for {} texts",
                resp.items.len(),
                texts.len()
            )));
        }
        if resp.dim != self.health.dim || resp.model_version != self.health.model_version {
            return Err(self.protocol(format!(
                "model changed mid-run: {}/{} vs {}/{}",
                resp.model_version, resp.dim, self.health.model_version, self.health.dim
            )));
        }
        let mut out = Vec::with_capacity(texts.len());
        for (text, item) in texts.iter().zip(resp.items) {
            if let Some(err) = item.error {
                return Err(Error::Similarity(format!("sidecar rejected text {text:?}: {err}")));
            }
            if item.tokens.len() != item.vectors.len() {
                return Err(self.protocol(format!(
                    "{} tokens but {} vectors",
                    item.tokens.len(),
                    item.vectors.len()
                )));
            }
            if let Some(v) = item.vectors.iter().find(|v| v.len() != resp.dim) {
                return Err(self.protocol(format!("vector of length {} (dim {})", v.len(), resp.dim)));
            }
            if item.truncated {
                tracing::warn!(text_bytes = text.len(), "sidecar truncated an over-length text");
            }
            out.push(Arc::new(TokenVectors {
                tokens: item.tokens,
                vectors: item.vectors.into_iter().map(TokenVector::Dense).collect(),
            }));
        }
        Ok(out)
    }
}

fn sidecar_error(base_url: &str, e: ureq::Error) -> Error {
    Error::Protocol {
        endpoint: base_url.to_string(),
        message: format!("embedding sidecar: {e}"),
    }
}

impl TokenEmbedder for SidecarEmbedder {
    fn info(&self) -> EmbedderInfo {
        EmbedderInfo {
            provider: EmbedderProvider::SidecarService,
            dimension: Some(self.health.dim),
            model_version: self.health.model_version.clone(),
        }
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Arc<TokenVectors>>> {
        let missing: Vec<&str> = {
            let memo = self.memo.lock().expect("memo lock");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !memo.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        for chunk in missing.chunks(SIDECAR_BATCH) {
            let fetched = self.fetch(chunk)?;
            let mut memo = self.memo.lock().expect("memo lock");
            for (text, vectors) in chunk.iter().zip(fetched) {
                memo.insert((*text).to_string(), vectors);
            }
        }
        let memo = self.memo.lock().expect("memo lock");
        Ok(texts.iter().map(|t| Arc::clone(&memo[*t])).collect())
    }
}
