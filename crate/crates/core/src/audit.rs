//! End-to-end audit orchestration.
//!
//! The offline phase queries every reference pair once per sample, applies
//! the length filter and selects tainted samples. The online phase queries
//! the suspect `k` times per tainted sample, classifies each sample and
//! produces the verdict.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::gateway::{Collection, DecodingParams, FailedRequest, Gateway, ModelEndpoint, ReferencePair, ResponseRecord};
use crate::inference::{
    classify_sample, infer_membership, prefilter, select_tainted, Decision, PrefilterOutcome, ReferenceResponses,
    ReferenceTexts, SampleEvidence, SelectionMode, TaintedSet, Verdict, DEFAULT_DELTA_T, DEFAULT_K, DEFAULT_MU,
};
use crate::similarity::TextSimilarity;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Thresholds and counts governing one audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditParams {
    /// Minimum response size in bytes.
    pub mu: usize,
    pub delta_t: f64,
    /// Defaults to `delta_t` when absent.
    pub delta_s: Option<f64>,
    pub k: u32,
    pub selection: SelectionMode,
}

impl Default for AuditParams {
    fn default() -> Self {
        AuditParams {
            mu: DEFAULT_MU,
            delta_t: DEFAULT_DELTA_T,
            delta_s: None,
            k: DEFAULT_K,
            selection: SelectionMode::Disparity,
        }
    }
}

impl AuditParams {
    pub fn delta_s(&self) -> f64 {
        self.delta_s.unwrap_or(self.delta_t)
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.delta_t) {
            return Err(Error::config("delta_t", format!("{} is outside (0, 1)", self.delta_t)));
        }
        if let Some(ds) = self.delta_s {
            if !open_unit(ds) {
                return Err(Error::config("delta_s", format!("{ds} is outside (0, 1)")));
            }
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        Ok(())
    }
}

/// Digest identifying the reference configuration.
pub fn reference_config_digest(pairs: &[ReferencePair]) -> String {
    let ids: Vec<_> = pairs
        .iter()
        .map(|p| {
            (
                &p.architecture,
                (&p.raw.name, &p.raw.base_url, &p.raw.model_id, &p.raw.decoding),
                (&p.tuned.name, &p.tuned.base_url, &p.tuned.model_id, &p.tuned.decoding),
            )
        })
        .collect();
    json_digest(&ids)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub collection_ms: f64,
    pub decision_ms: f64,
}

impl PhaseTiming {
    pub fn total_ms(&self) -> f64 {
        self.collection_ms + self.decision_ms
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone)]
pub struct OfflinePhase {
    pub references: ReferenceResponses,
    pub prefilter: PrefilterOutcome,
    pub tainted: TaintedSet,
    pub failures: Vec<FailedRequest>,
    pub timing: PhaseTiming,
    /// Collection wall time per reference endpoint.
    pub endpoint_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct OnlinePhase {
    pub suspect: String,
    pub responses: Vec<ResponseRecord>,
    pub verdict: Verdict,
    pub failures: Vec<FailedRequest>,
    pub timing: PhaseTiming,
}

pub struct Auditor<'a> {
    pub gateway: &'a Gateway,
    pub dataset: &'a Dataset,
    pub pairs: &'a [ReferencePair],
    pub metric: &'a dyn TextSimilarity,
    pub params: AuditParams,
}

impl<'a> Auditor<'a> {
    pub fn new(
        gateway: &'a Gateway,
        dataset: &'a Dataset,
        pairs: &'a [ReferencePair],
        metric: &'a dyn TextSimilarity,
        params: AuditParams,
    ) -> Result<Self> {
        params.validate()?;
        if pairs.is_empty() {
            return Err(Error::config("pairs", "at least one reference pair is required"));
        }
        for p in pairs {
            p.validate()?;
        }
        Ok(Auditor {
            gateway,
            dataset,
            pairs,
            metric,
            params,
        })
    }

    /// One response per sample from every reference endpoint.
    pub async fn collect_references(&self) -> Result<(ReferenceResponses, Vec<FailedRequest>)> {
        self.collect_references_timed().await.map(|(r, f, _)| (r, f))
    }

    async fn collect_references_timed(
        &self,
    ) -> Result<(ReferenceResponses, Vec<FailedRequest>, BTreeMap<String, f64>)> {
        let endpoints: Vec<&ModelEndpoint> = self.pairs.iter().flat_map(|p| [&p.raw, &p.tuned]).collect();
        let collections = futures::future::join_all(endpoints.iter().map(|e| async move {
            let started = Instant::now();
            let c = self.gateway.collect_responses(e, &self.dataset.samples, 1).await;
            (c, ms(started.elapsed()))
        }))
        .await;
        let mut failures = Vec::new();
        let mut endpoint_ms = BTreeMap::new();
        let mut texts: Vec<HashMap<String, String>> = Vec::with_capacity(endpoints.len());
        for (e, (c, elapsed)) in endpoints.iter().zip(collections) {
            let c = c?;
            endpoint_ms.insert(e.name.clone(), elapsed);
            failures.extend(c.failures);
            texts.push(c.records.into_iter().map(|r| (r.sample_id, r.text)).collect());
        }
        let mut out = ReferenceResponses::new();
        for s in &self.dataset.samples {
            let refs: Option<Vec<ReferenceTexts>> = (0..self.pairs.len())
                .map(|i| {
                    Some(ReferenceTexts {
                        raw: texts[2 * i].get(&s.id)?.clone(),
                        tuned: texts[2 * i + 1].get(&s.id)?.clone(),
                    })
                })
                .collect();
            if let Some(refs) = refs {
                out.insert(s.id.clone(), refs);
            }
        }
        Ok((out, failures, endpoint_ms))
    }

    /// Pre-filter and tainted selection over collected reference responses.
    pub fn select(&self, references: &ReferenceResponses) -> Result<(PrefilterOutcome, TaintedSet)> {
        let pre = prefilter(&self.dataset.samples, references, self.pairs.len(), self.params.mu);
        let tainted = select_tainted(
            self.dataset,
            references,
            &pre.retained,
            self.metric,
            self.params.delta_t,
            self.params.selection,
            &reference_config_digest(self.pairs),
        )?;
        Ok((pre, tainted))
    }

    pub async fn offline(&self) -> Result<OfflinePhase> {
        let started = Instant::now();
        let (references, failures, endpoint_ms) = self.collect_references_timed().await?;
        let collected = Instant::now();
        let (prefilter, tainted) = self.select(&references)?;
        Ok(OfflinePhase {
            references,
            prefilter,
            tainted,
            failures,
            timing: PhaseTiming {
                collection_ms: ms(collected - started),
                decision_ms: ms(collected.elapsed()),
            },
            endpoint_ms,
        })
    }

    /// `k` suspect responses for every tainted sample.
    pub async fn collect_suspect(
        &self,
        suspect: &ModelEndpoint,
        tainted: &TaintedSet,
        decoding: Option<DecodingParams>,
    ) -> Result<Collection> {
        let samples: Vec<_> = tainted
            .ids()
            .into_iter()
            .filter_map(|id| self.dataset.get(id).cloned())
            .collect();
        if samples.is_empty() {
            return Ok(Collection::default());
        }
        let mut endpoint = suspect.clone();
        if let Some(d) = decoding {
            endpoint.decoding = d;
        }
        self.gateway.collect_responses(&endpoint, &samples, self.params.k).await
    }

    /// Classify every tainted sample from suspect `records` and aggregate.
    pub fn classify(&self, offline: &OfflinePhase, records: &[ResponseRecord]) -> Result<Verdict> {
        let mut by_sample: HashMap<&str, Vec<(u32, &str)>> = HashMap::new();
        for r in records {
            by_sample
                .entry(r.sample_id.as_str())
                .or_default()
                .push((r.attempt, r.text.as_str()));
        }
        let delta_s = self.params.delta_s();
        let evidence = offline
            .tainted
            .ids()
            .into_iter()
            .filter_map(|id| by_sample.get(id).map(|resps| (id, resps)))
            .map(|(id, resps)| {
                let refs = offline
                    .references
                    .get(id)
                    .ok_or_else(|| Error::MissingResponses(vec![id.to_string()]))?;
                classify_sample(id, resps, refs, self.metric, self.params.mu, delta_s)
            })
            .collect::<Result<Vec<SampleEvidence>>>()?;
        Ok(infer_membership(&offline.tainted, evidence))
    }

    pub async fn online(&self, offline: &OfflinePhase, suspect: &ModelEndpoint) -> Result<OnlinePhase> {
        let started = Instant::now();
        let collection = self.collect_suspect(suspect, &offline.tainted, None).await?;
        let collected = Instant::now();
        let verdict = self.classify(offline, &collection.records)?;
        Ok(OnlinePhase {
            suspect: suspect.name.clone(),
            responses: collection.records,
            verdict,
            failures: collection.failures,
            timing: PhaseTiming {
                collection_ms: ms(collected - started),
                decision_ms: ms(collected.elapsed()),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub samples: usize,
    pub content_digest: String,
    pub source_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Digests {
    pub reference_config: String,
    pub config: Option<String>,
    pub cache_state: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaintedSummary {
    pub mode: SelectionMode,
    pub delta_t: f64,
    pub count: usize,
    pub ids: Vec<String>,
}

/// Machine-readable audit result. Timings live in [`TimingReport`] so that
/// re-running against a warm cache reproduces this file byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub suspect: String,
    pub decision: Decision,
    pub positive_count: usize,
    pub negative_count: usize,
    pub abstained_count: usize,
    pub warnings: Vec<String>,
    pub params: AuditParams,
    pub metric: String,
    pub dataset: DatasetSummary,
    pub digests: Digests,
    pub prefilter: PrefilterOutcome,
    pub tainted: TaintedSummary,
    pub evidence: Vec<SampleEvidence>,
    pub failures: Vec<FailedRequest>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub offline: PhaseTiming,
    pub online: PhaseTiming,
    pub total_ms: f64,
    /// Collection wall time per endpoint; reference endpoints run
    /// concurrently, so these overlap.
    pub endpoints: BTreeMap<String, f64>,
}

impl TimingReport {
    pub fn from_phases(offline: &OfflinePhase, online: &OnlinePhase) -> Self {
        let mut endpoints = offline.endpoint_ms.clone();
        endpoints.insert(online.suspect.clone(), online.timing.collection_ms);
        TimingReport {
            offline: offline.timing,
            online: online.timing,
            total_ms: offline.timing.total_ms() + online.timing.total_ms(),
            endpoints,
        }
    }
}

impl AuditReport {
    pub fn new(auditor: &Auditor<'_>, offline: &OfflinePhase, online: &OnlinePhase) -> Self {
        let v = &online.verdict;
        let mut failures = offline.failures.clone();
        failures.extend(online.failures.iter().cloned());
        AuditReport {
            schema_version: REPORT_SCHEMA_VERSION,
            suspect: online.suspect.clone(),
            decision: v.decision,
            positive_count: v.positive_count,
            negative_count: v.negative_count,
            abstained_count: v.abstained_count,
            warnings: v.warnings.clone(),
            params: auditor.params.clone(),
            metric: auditor.metric.variant(),
            dataset: DatasetSummary {
                name: auditor.dataset.name.clone(),
                samples: auditor.dataset.len(),
                content_digest: auditor.dataset.content_digest(),
                source_digest: auditor.dataset.provenance.digest.clone(),
            },
            digests: Digests {
                reference_config: offline.tainted.reference_config_digest.clone(),
                config: None,
                cache_state: None,
            },
            prefilter: offline.prefilter.clone(),
            tainted: TaintedSummary {
                mode: offline.tainted.mode,
                delta_t: offline.tainted.delta_t,
                count: offline.tainted.len(),
                ids: offline.tainted.ids().into_iter().map(String::from).collect(),
            },
            evidence: v.evidence.clone(),
            failures,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Short human-readable rendering.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let decision = match self.decision {
            Decision::Member => "MEMBER (trained on the dataset)",
            Decision::NonMember => "NON-MEMBER",
        };
        let _ = writeln!(s, "suspect:   {}", self.suspect);
        let _ = writeln!(s, "dataset:   {} ({} samples)", self.dataset.name, self.dataset.samples);
        let _ = writeln!(s, "verdict:   {decision}");
        let _ = writeln!(
            s,
            "tainted:   {} selected ({:?}, delta_t = {}), {} retained of {}",
            self.tainted.count,
            self.tainted.mode,
            self.tainted.delta_t,
            self.prefilter.retained.len(),
            self.dataset.samples
        );
        let _ = writeln!(
            s,
            "counts:    {} positive, {} negative, {} abstained",
            self.positive_count, self.negative_count, self.abstained_count
        );
        let _ = writeln!(
            s,
            "params:    mu = {} bytes, delta_s = {}, k = {}",
            self.params.mu,
            self.params.delta_s.unwrap_or(self.params.delta_t),
            self.params.k
        );
        let _ = writeln!(s, "metric:    {}", self.metric);
        if !self.failures.is_empty() {
            let _ = writeln!(s, "failures:  {} request(s) failed after retries", self.failures.len());
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning:   {w}");
        }
        s
    }
}
