use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::store::{cache_key, ResponseStore};

use super::{
    build_prompt, Backend, DecodingParams, ModelEndpoint, RateLimiter, RequestError, ResponseRecord,
    TokenLogprob,
};

/// Exponential backoff between retries: `base_delay * factor^n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(retry as i32))
    }
}

/// A prompt to send, tagged with the sample it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptItem {
    pub sample_id: String,
    pub prompt: String,
}

impl PromptItem {
    pub fn from_sample(s: &Sample) -> Result<Self> {
        Ok(PromptItem {
            sample_id: s.id.clone(),
            prompt: build_prompt(s)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRequest {
    pub endpoint_name: String,
    pub sample_id: String,
    pub attempt: u32,
    pub error: String,
}

/// Responses gathered from one endpoint, ordered by (item order, attempt).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collection {
    pub records: Vec<ResponseRecord>,
    pub failures: Vec<FailedRequest>,
}

impl Collection {
    /// Records grouped by sample id, each group in attempt order.
    pub fn by_sample(&self) -> HashMap<&str, Vec<&ResponseRecord>> {
        let mut map: HashMap<&str, Vec<&ResponseRecord>> = HashMap::new();
        for r in &self.records {
            map.entry(r.sample_id.as_str()).or_default().push(r);
        }
        map
    }
}

/// Issues requests for endpoints through a [`Backend`], with per-endpoint
/// rate limits and concurrency ceilings, retries, and an optional response
/// cache.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    store: Option<Arc<ResponseStore>>,
    retry: RetryPolicy,
    cache_only: bool,
    limiters: Mutex<HashMap<String, Arc<RateLimiter>>>,
    requests: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            store: None,
            retry: RetryPolicy::default(),
            cache_only: false,
            limiters: Mutex::new(HashMap::new()),
            requests: AtomicU64::new(0),
        }
    }

    pub fn with_store(mut self, store: Arc<ResponseStore>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Refuse to issue requests; cache misses become errors.
    pub fn cache_only(mut self, on: bool) -> Self {
        self.cache_only = on;
        self
    }

    pub fn store(&self) -> Option<&Arc<ResponseStore>> {
        self.store.as_ref()
    }

    /// Backend requests issued so far, retries included.
    pub fn requests_issued(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn limiter(&self, endpoint: &ModelEndpoint) -> Option<Arc<RateLimiter>> {
        let rate = endpoint.rate_limit?;
        let mut map = self.limiters.lock().expect("limiter lock");
        Some(Arc::clone(
            map.entry(endpoint.name.clone())
                .or_insert_with(|| Arc::new(RateLimiter::per_second(rate))),
        ))
    }

    fn check_credentials(endpoint: &ModelEndpoint) -> Result<()> {
        if let Some(var) = &endpoint.auth_env {
            if std::env::var_os(var).is_none() {
                return Err(Error::config(
                    format!("endpoint.{}.auth_env", endpoint.name),
                    format!("environment variable {var} is not set"),
                ));
            }
        }
        Ok(())
    }

    async fn chat_with_retry(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        decoding: &DecodingParams,
        attempt: u32,
        limiter: Option<&RateLimiter>,
    ) -> std::result::Result<String, RequestError> {
        let mut retry = 0;
        loop {
            if let Some(l) = limiter {
                l.acquire().await;
            }
            self.requests.fetch_add(1, Ordering::Relaxed);
            match self.backend.chat(endpoint, prompt, decoding, attempt).await {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && retry < endpoint.max_retries => {
                    tracing::debug!(endpoint = %endpoint.name, retry, error = %e, "retrying");
                    tokio::time::sleep(self.retry.delay(retry)).await;
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// `k` responses per sample from `endpoint` using its configured decoding.
    pub async fn collect_responses(&self, endpoint: &ModelEndpoint, samples: &[Sample], k: u32) -> Result<Collection> {
        let items = samples.iter().map(PromptItem::from_sample).collect::<Result<Vec<_>>>()?;
        let mut decoding = endpoint.decoding.clone();
        decoding.n_samples = k;
        self.collect_prompts(endpoint, &items, &decoding).await
    }

    /// `decoding.n_samples` independent responses per item.
    ///
    /// Failures after retries are reported per request; the call only fails
    /// outright on configuration or store errors, or when every request
    /// failed.
    pub async fn collect_prompts(
        &self,
        endpoint: &ModelEndpoint,
        items: &[PromptItem],
        decoding: &DecodingParams,
    ) -> Result<Collection> {
        if decoding.n_samples == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let k = decoding.n_samples;
        let jobs: Vec<(usize, u32)> = (0..items.len())
            .flat_map(|i| (0..k).map(move |a| (i, a)))
            .collect();
        let keys: Vec<_> = jobs
            .iter()
            .map(|&(i, a)| cache_key(endpoint, &items[i].sample_id, &items[i].prompt, decoding, a))
            .collect();

        let missing: Vec<usize> = match &self.store {
            Some(store) => (0..jobs.len()).filter(|&j| !store.contains(&keys[j])).collect(),
            None => (0..jobs.len()).collect(),
        };
        if !missing.is_empty() {
            if self.cache_only {
                return Err(Error::CacheMiss(
                    missing
                        .iter()
                        .map(|&j| {
                            let (i, a) = jobs[j];
                            format!("{}/{}#{a}", endpoint.name, items[i].sample_id)
                        })
                        .collect(),
                ));
            }
            Self::check_credentials(endpoint)?;
        }

        let limiter = self.limiter(endpoint);
        let origin = self.backend.origin(endpoint);
        let outcomes: Vec<(usize, Result<std::result::Result<ResponseRecord, RequestError>>)> =
            stream::iter(jobs.iter().enumerate())
                .map(|(j, &(i, attempt))| {
                    let item = &items[i];
                    let key = &keys[j];
                    let limiter = limiter.as_deref();
                    async move {
                        let produce = || async {
                            let text = self
                                .chat_with_retry(endpoint, &item.prompt, decoding, attempt, limiter)
                                .await?;
                            Ok(ResponseRecord::new(
                                endpoint.name.clone(),
                                item.sample_id.clone(),
                                attempt,
                                text,
                                decoding.clone(),
                                origin,
                            ))
                        };
                        let out = match &self.store {
                            Some(store) => store.fetch_or_query(key, produce).await,
                            None => Ok(produce().await),
                        };
                        (j, out)
                    }
                })
                .buffer_unordered(endpoint.concurrency.max(1))
                .collect()
                .await;

        let mut outcomes = outcomes;
        outcomes.sort_by_key(|(j, _)| *j);
        let mut collection = Collection::default();
        for (j, outcome) in outcomes {
            let (i, attempt) = jobs[j];
            match outcome? {
                Ok(record) => collection.records.push(record),
                Err(e) => collection.failures.push(FailedRequest {
                    endpoint_name: endpoint.name.clone(),
                    sample_id: items[i].sample_id.clone(),
                    attempt,
                    error: e.to_string(),
                }),
            }
        }
        if collection.records.is_empty() && !collection.failures.is_empty() {
            return Err(Error::EndpointUnreachable {
                endpoint: endpoint.name.clone(),
                failed: collection.failures.len(),
                last: collection.failures.last().map(|f| f.error.clone()).unwrap_or_default(),
            });
        }
        Ok(collection)
    }

    /// Per-token log-probabilities of `continuation` after `prompt` under
    /// `endpoint`, one entry per continuation token.
    pub async fn query_logprobs(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>> {
        if !endpoint.supports_logprobs {
            return Err(Error::Capability {
                endpoint: endpoint.name.clone(),
                capability: "token log-probabilities".into(),
            });
        }
        if continuation.is_empty() {
            return Ok(Vec::new());
        }
        if self.cache_only {
            return Err(Error::CacheMiss(vec![format!("{}/logprobs", endpoint.name)]));
        }
        Self::check_credentials(endpoint)?;
        let limiter = self.limiter(endpoint);
        let mut retry = 0;
        let tokens = loop {
            if let Some(l) = &limiter {
                l.acquire().await;
            }
            self.requests.fetch_add(1, Ordering::Relaxed);
            match self.backend.logprobs(endpoint, prompt, continuation).await {
                Ok(t) => break t,
                Err(e) if e.is_retryable() && retry < endpoint.max_retries => {
                    tokio::time::sleep(self.retry.delay(retry)).await;
                    retry += 1;
                }
                Err(RequestError::Capability(msg)) => {
                    return Err(Error::Capability {
                        endpoint: endpoint.name.clone(),
                        capability: msg,
                    })
                }
                Err(e) => {
                    return Err(Error::Protocol {
                        endpoint: endpoint.name.clone(),
                        message: e.to_string(),
                    })
                }
            }
        };
        if let Some(bad) = tokens.iter().find(|t| t.logprob > 0.0 || t.logprob.is_nan()) {
            return Err(Error::Protocol {
                endpoint: endpoint.name.clone(),
                message: format!("logprob {} for token {:?} is not <= 0", bad.logprob, bad.token),
            });
        }
        Ok(tokens)
    }
}
