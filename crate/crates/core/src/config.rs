//! TOML configuration: the audit settings file and the endpoints file.
//!
//! Relative paths are resolved against the directory of the file that
//! names them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audit::AuditParams;
use crate::corpus::{DEFAULT_CAP, DEFAULT_DEDUP_THRESHOLD};
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::gateway::{DecodingParams, ModelEndpoint, ReferencePair, Role};
use crate::inference::{SelectionMode, DEFAULT_DELTA_T, DEFAULT_K, DEFAULT_MU};
use crate::similarity::Metric;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default)]
    pub cap_seed: u64,
}

fn default_cap() -> usize {
    DEFAULT_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub seed: u64,
    pub dedup_threshold: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            seed: 0,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub endpoints: PathBuf,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// World file written by `simulate`; serves `synthetic:` endpoints.
    #[serde(default)]
    pub synthetic_world: Option<PathBuf>,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSection {
    pub mu: usize,
    pub delta_t: f64,
    pub delta_s: Option<f64>,
    pub k: u32,
    pub selection: SelectionMode,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        ThresholdSection {
            mu: DEFAULT_MU,
            delta_t: DEFAULT_DELTA_T,
            delta_s: None,
            k: DEFAULT_K,
            selection: SelectionMode::Disparity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilaritySection {
    pub metric: Metric,
    /// Embedding sidecar for `greedy_embed_f1`; one-hot vectors without it.
    pub sidecar_url: Option<String>,
}

impl Default for SimilaritySection {
    fn default() -> Self {
        SimilaritySection {
            metric: Metric::GreedyEmbedF1,
            sidecar_url: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    /// Endpoint fine-tuned on the member pool; must expose logprobs.
    pub reference: String,
    pub member_pool: PathBuf,
    pub nonmember_pool: PathBuf,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_train_size() -> usize {
    crate::baseline::DEFAULT_TRAIN_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub temperatures: Vec<f64>,
    pub rephraser: Option<String>,
    /// Another run's out directory, for tainted-set overlap.
    pub compare_with: Option<PathBuf>,
    pub census_threshold: f64,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            temperatures: vec![0.0, 0.5, 1.0],
            rephraser: None,
            compare_with: None,
            census_threshold: crate::studies::DEFAULT_CENSUS_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSection,
    pub paths: PathsSection,
    #[serde(default)]
    pub thresholds: ThresholdSection,
    #[serde(default)]
    pub similarity: SimilaritySection,
    /// Suspect endpoint name; may be overridden on the command line.
    #[serde(default)]
    pub suspect: Option<String>,
    #[serde(default)]
    pub baseline: Option<BaselineSection>,
    /// Directory relative paths were resolved against, when loaded from disk.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
    #[serde(default)]
    pub study: StudySection,
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

impl AuditConfig {
    /// Parse, resolve relative paths and validate.
    pub fn load(path: impl AsRef<Path>) -> Result<AuditConfig> {
        let path = path.as_ref();
        let mut cfg: AuditConfig = parse_toml(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.for_each_path(|p| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        });
        cfg.base_dir = Some(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn for_each_path(&mut self, mut f: impl FnMut(&mut PathBuf)) {
        f(&mut self.dataset.path);
        f(&mut self.paths.endpoints);
        f(&mut self.paths.cache_dir);
        f(&mut self.paths.out_dir);
        if let Some(w) = self.paths.synthetic_world.as_mut() {
            f(w);
        }
        if let Some(b) = self.baseline.as_mut() {
            f(&mut b.member_pool);
            f(&mut b.nonmember_pool);
        }
        if let Some(c) = self.study.compare_with.as_mut() {
            f(c);
        }
    }

    pub fn params(&self) -> AuditParams {
        let t = &self.thresholds;
        AuditParams {
            mu: t.mu,
            delta_t: t.delta_t,
            delta_s: t.delta_s,
            k: t.k,
            selection: t.selection,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("thresholds.{field}"), message),
            other => other,
        })?;
        if self.dataset.cap == 0 {
            return Err(Error::config("dataset.cap", "must be positive"));
        }
        let d = self.split.dedup_threshold;
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::config("split.dedup_threshold", format!("{d} is outside [0, 1]")));
        }
        validate_temperatures(&self.study.temperatures)?;
        let c = self.study.census_threshold;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::config("study.census_threshold", format!("{c} is outside [0, 1]")));
        }
        if let Some(b) = &self.baseline {
            if b.train_size == 0 {
                return Err(Error::config("baseline.train_size", "must be positive"));
            }
        }
        Ok(())
    }

    /// Digest over the effective configuration. Paths inside the config
    /// directory are hashed relative to it, so a moved project keeps its digest.
    pub fn digest(&self, endpoints: &EndpointsConfig) -> String {
        let mut cfg = self.clone();
        if let Some(base) = &self.base_dir {
            cfg.for_each_path(|p| {
                if let Ok(rel) = p.strip_prefix(base) {
                    *p = rel.to_path_buf();
                }
            });
        }
        json_digest(&(cfg, endpoints))
    }
}

pub fn validate_temperatures(temps: &[f64]) -> Result<()> {
    if temps.is_empty() {
        return Err(Error::config("study.temperatures", "at least one temperature is required"));
    }
    if let Some(t) = temps.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(Error::config("study.temperatures", format!("{t} is not a non-negative temperature")));
    }
    Ok(())
}

/// One `[[endpoint]]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSpec {
    pub name: String,
    pub role: Role,
    pub base_url: String,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub auth_env: Option<String>,
    /// Provider default when absent, except for references (1.0).
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub rate_limit: Option<f64>,
    #[serde(default)]
    pub max_retries: Option<u32>,
    #[serde(default)]
    pub concurrency: Option<usize>,
    #[serde(default)]
    pub supports_logprobs: bool,
}

impl EndpointSpec {
    pub fn to_endpoint(&self) -> Result<ModelEndpoint> {
        let field = |f: &str| format!("endpoint.{}.{f}", self.name);
        if self.name.is_empty() {
            return Err(Error::config("endpoint.name", "must not be empty"));
        }
        let url_ok = self.base_url.starts_with("http://")
            || self.base_url.starts_with("https://")
            || self.base_url.strip_prefix("synthetic:").is_some_and(|p| !p.is_empty());
        if !url_ok {
            return Err(Error::config(
                field("base_url"),
                format!("{:?} is neither an http(s) URL nor synthetic:<profile>", self.base_url),
            ));
        }
        let model_id = self.model_id.clone().unwrap_or_else(|| self.name.clone());
        let mut e = ModelEndpoint::new(&self.name, self.role, &self.base_url, model_id);
        if let Some(t) = self.temperature {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::config(field("temperature"), format!("{t} is not a valid temperature")));
            }
            e.decoding.temperature = Some(t);
        }
        if let Some(m) = self.max_tokens {
            if m == 0 {
                return Err(Error::config(field("max_tokens"), "must be positive"));
            }
            e.decoding.max_tokens = m;
        }
        if let Some(r) = self.rate_limit {
            if !r.is_finite() || r <= 0.0 {
                return Err(Error::config(field("rate_limit"), "must be a positive number of requests per second"));
            }
            e.rate_limit = Some(r);
        }
        if let Some(n) = self.max_retries {
            e.max_retries = n;
        }
        if let Some(c) = self.concurrency {
            if c == 0 {
                return Err(Error::config(field("concurrency"), "must be at least 1"));
            }
            e.concurrency = c;
        }
        e.auth_env = self.auth_env.clone();
        e.supports_logprobs = self.supports_logprobs;
        Ok(e)
    }
}

/// One `[[pair]]` table: names of a raw and a tuned endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub architecture: String,
    pub raw: String,
    pub tuned: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointsConfig {
    #[serde(default, rename = "endpoint")]
    pub endpoints: Vec<EndpointSpec>,
    #[serde(default, rename = "pair")]
    pub pairs: Vec<PairSpec>,
}

/// Validated endpoints, keyed by name.
#[derive(Debug, Clone)]
pub struct Endpoints {
    pub by_name: BTreeMap<String, ModelEndpoint>,
    pub pairs: Vec<ReferencePair>,
}

impl Endpoints {
    pub fn get(&self, name: &str, field: &str) -> Result<&ModelEndpoint> {
        self.by_name
            .get(name)
            .ok_or_else(|| Error::config(field, format!("no endpoint named {name:?}")))
    }
}

impl EndpointsConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<EndpointsConfig> {
        parse_toml(path.as_ref())
    }

    pub fn from_toml(text: &str) -> Result<EndpointsConfig> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: "<endpoints>".into(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("endpoints do not serialize: {e}")))
    }

    pub fn resolve(&self) -> Result<Endpoints> {
        let mut by_name = BTreeMap::new();
        for spec in &self.endpoints {
            let e = spec.to_endpoint()?;
            if by_name.insert(e.name.clone(), e).is_some() {
                return Err(Error::config(format!("endpoint.{}", spec.name), "duplicate endpoint name"));
            }
        }
        let mut pairs = Vec::new();
        let mut used = BTreeSet::new();
        for (index, p) in self.pairs.iter().enumerate() {
            let lookup = |name: &str, part: &str| {
                by_name
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::config(format!("pair[{index}].{part}"), format!("no endpoint named {name:?}")))
            };
            let pair = ReferencePair {
                index,
                architecture: p.architecture.clone(),
                raw: lookup(&p.raw, "raw")?,
                tuned: lookup(&p.tuned, "tuned")?,
            };
            pair.validate()?;
            for name in [&p.raw, &p.tuned] {
                if !used.insert(name.clone()) {
                    return Err(Error::config(format!("pair[{index}]"), format!("endpoint {name:?} is used by two pairs")));
                }
            }
            pairs.push(pair);
        }
        Ok(Endpoints { by_name, pairs })
    }
}

impl From<&ModelEndpoint> for EndpointSpec {
    fn from(e: &ModelEndpoint) -> Self {
        let defaults = ModelEndpoint::new(&e.name, e.role, &e.base_url, &e.model_id);
        let d: &DecodingParams = &e.decoding;
        EndpointSpec {
            name: e.name.clone(),
            role: e.role,
            base_url: e.base_url.clone(),
            model_id: Some(e.model_id.clone()),
            auth_env: e.auth_env.clone(),
            temperature: d.temperature.filter(|_| d.temperature != defaults.decoding.temperature),
            max_tokens: Some(d.max_tokens),
            rate_limit: e.rate_limit,
            max_retries: Some(e.max_retries),
            concurrency: Some(e.concurrency),
            supports_logprobs: e.supports_logprobs,
        }
    }
}
