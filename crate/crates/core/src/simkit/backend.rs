use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use async_trait::async_trait;

use super::{ProfileKind, SynthProfile};
use crate::corpus::{Dataset, Sample};
use crate::digest::sha256_hex;
use crate::gateway::{build_prompt, Backend, DecodingParams, HttpBackend, ModelEndpoint, Origin, RequestError, TokenLogprob};

/// In-process backend answering for synthetic profiles.
///
/// Profiles are looked up by the `synthetic:<profile>` suffix of the base URL,
/// or by model id for any other endpoint. Prompts are mapped back to samples
/// through the datasets the backend was built with.
#[derive(Debug, Clone)]
pub struct SynthBackend {
    profiles: BTreeMap<String, SynthProfile>,
    by_prompt: HashMap<String, Sample>,
}

impl SynthBackend {
    pub fn new<'a>(profiles: BTreeMap<String, SynthProfile>, datasets: impl IntoIterator<Item = &'a Dataset>) -> Self {
        let by_prompt = datasets
            .into_iter()
            .flat_map(|d| d.samples.iter())
            .filter_map(|s| build_prompt(s).ok().map(|p| (p, s.clone())))
            .collect();
        SynthBackend { profiles, by_prompt }
    }

    pub fn profile_name(endpoint: &ModelEndpoint) -> &str {
        endpoint.base_url.strip_prefix("synthetic:").unwrap_or(&endpoint.model_id)
    }

    pub fn profile(&self, name: &str) -> Result<&SynthProfile, RequestError> {
        self.profiles.get(name).ok_or_else(|| RequestError::Status {
            status: 404,
            body: format!("unknown synthetic model {name:?}"),
        })
    }

    pub fn sample_for(&self, prompt: &str) -> Option<&Sample> {
        self.by_prompt.get(prompt)
    }

    pub fn respond(&self, profile: &str, prompt: &str, temperature: Option<f64>, attempt: u32) -> Result<String, RequestError> {
        let p = self.profile(profile)?;
        let t = temperature.unwrap_or(1.0);
        Ok(match (p.kind, self.sample_for(prompt)) {
            (ProfileKind::ShuffleRephraser, _) => p.rephrase(prompt),
            (_, Some(s)) => p.respond_text(s, attempt, t),
            (_, None) => p.noise_text(&sha256_hex(prompt.as_bytes()), attempt, t),
        })
    }

    /// Log-probabilities of `continuation` after `prompt`.
    pub fn score(&self, profile: &str, prompt: &str, continuation: &str) -> Result<Vec<TokenLogprob>, RequestError> {
        let p = self.profile(profile)?;
        Ok(p
            .token_logprobs(self.sample_for(prompt), prompt, continuation)
            .into_iter()
            .map(|(token, logprob)| TokenLogprob { token, logprob })
            .collect())
    }
}

#[async_trait]
impl Backend for SynthBackend {
    fn origin(&self, _: &ModelEndpoint) -> Origin {
        Origin::Synthetic
    }

    async fn chat(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        decoding: &DecodingParams,
        attempt: u32,
    ) -> Result<String, RequestError> {
        self.respond(Self::profile_name(endpoint), prompt, decoding.temperature, attempt)
    }

    async fn logprobs(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, RequestError> {
        self.score(Self::profile_name(endpoint), prompt, continuation)
    }
}

/// Sends `synthetic:` endpoints to a [`SynthBackend`] and everything else
/// over HTTP.
pub struct RoutingBackend {
    synth: Option<Arc<SynthBackend>>,
    http: HttpBackend,
}

impl RoutingBackend {
    pub fn new(http: HttpBackend, synth: Option<Arc<SynthBackend>>) -> Self {
        RoutingBackend { synth, http }
    }

    fn pick(&self, endpoint: &ModelEndpoint) -> Result<&dyn Backend, RequestError> {
        if !endpoint.is_synthetic() {
            return Ok(&self.http);
        }
        match &self.synth {
            Some(s) => Ok(s.as_ref()),
            None => Err(RequestError::Protocol(format!(
                "endpoint {} is synthetic but no synthetic world is loaded",
                endpoint.name
            ))),
        }
    }
}

#[async_trait]
impl Backend for RoutingBackend {
    fn origin(&self, endpoint: &ModelEndpoint) -> Origin {
        if endpoint.is_synthetic() {
            Origin::Synthetic
        } else {
            Origin::Network
        }
    }

    async fn chat(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        decoding: &DecodingParams,
        attempt: u32,
    ) -> Result<String, RequestError> {
        self.pick(endpoint)?.chat(endpoint, prompt, decoding, attempt).await
    }

    async fn logprobs(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, RequestError> {
        self.pick(endpoint)?.logprobs(endpoint, prompt, continuation).await
    }
}
