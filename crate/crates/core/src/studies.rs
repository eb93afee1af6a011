//! Auxiliary analyses: tainted-sample census, tainted-set overlap and
//! robustness sweeps over suspect temperature and response rephrasing.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::audit::{Auditor, OfflinePhase};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::gateway::{DecodingParams, Gateway, ModelEndpoint, PromptItem, ResponseRecord};
use crate::inference::{Classification, SampleEvidence, TaintedSet, Verdict};
use crate::similarity::TextSimilarity;

/// Responses scoring strictly above this against the oracle count as tainted.
pub const DEFAULT_CENSUS_THRESHOLD: f64 = 0.95;

/// Category label for samples without one.
pub const UNCATEGORIZED: &str = "uncategorized";

/// Prompt header sent to the rephraser ahead of each suspect response.
pub const REPHRASE_PREFIX: &str = "Rephrase the following text, keeping its meaning:\n\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub category: String,
    pub total: usize,
    pub tainted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusReport {
    pub model: String,
    pub metric: String,
    pub threshold: f64,
    /// Sorted by category name.
    pub categories: Vec<CategoryCount>,
    pub tainted_ids: Vec<String>,
}

impl CensusReport {
    pub fn total(&self) -> usize {
        self.categories.iter().map(|c| c.total).sum()
    }

    pub fn tainted(&self) -> usize {
        self.categories.iter().map(|c| c.tainted).sum()
    }
}

/// Census over already collected responses (`sample id -> text`).
pub fn census_from_responses(
    d: &Dataset,
    model: &str,
    responses: &HashMap<String, String>,
    metric: &dyn TextSimilarity,
    threshold: f64,
) -> Result<CensusReport> {
    let missing: Vec<String> = d
        .samples
        .iter()
        .filter(|s| !responses.contains_key(&s.id))
        .map(|s| s.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingResponses(missing));
    }
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut tainted_ids = Vec::new();
    for s in &d.samples {
        let cat = s.category.clone().unwrap_or_else(|| UNCATEGORIZED.to_string());
        let entry = counts.entry(cat).or_default();
        entry.0 += 1;
        if metric.score(&responses[&s.id], &s.oracle_output)?.value > threshold {
            entry.1 += 1;
            tainted_ids.push(s.id.clone());
        }
    }
    Ok(CensusReport {
        model: model.to_string(),
        metric: metric.variant(),
        threshold,
        categories: counts
            .into_iter()
            .map(|(category, (total, tainted))| CategoryCount { category, total, tainted })
            .collect(),
        tainted_ids,
    })
}

/// Query `model` once per sample and count near-verbatim reproductions of
/// the oracle output per category.
pub async fn tainted_census(
    gateway: &Gateway,
    d: &Dataset,
    model: &ModelEndpoint,
    metric: &dyn TextSimilarity,
    threshold: f64,
) -> Result<CensusReport> {
    let collection = gateway.collect_responses(model, &d.samples, 1).await?;
    let responses = collection.records.into_iter().map(|r| (r.sample_id, r.text)).collect();
    census_from_responses(d, &model.name, &responses, metric, threshold)
}

/// One row per category, `total` followed by one tainted-count column per
/// report. Reports are assumed to cover the same dataset.
pub fn census_csv(reports: &[&CensusReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["category".to_string(), "total".to_string()];
    header.extend(reports.iter().map(|r| r.model.clone()));
    w.write_record(&header).map_err(csv_error)?;
    let categories: BTreeSet<&str> = reports
        .iter()
        .flat_map(|r| r.categories.iter().map(|c| c.category.as_str()))
        .collect();
    for cat in categories {
        let find = |r: &CensusReport| r.categories.iter().find(|c| c.category == cat).cloned();
        let total = reports.iter().find_map(|r| find(r)).map_or(0, |c| c.total);
        let mut row = vec![cat.to_string(), total.to_string()];
        row.extend(reports.iter().map(|r| find(r).map_or(0, |c| c.tainted).to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positive: usize,
    pub negative: usize,
    pub abstain: usize,
    /// Members with no attached classification.
    pub unclassified: usize,
}

/// A tainted set with the classifications of one audit run, if any.
#[derive(Debug, Clone, Copy)]
pub struct LabeledTainted<'a> {
    pub set: &'a TaintedSet,
    pub evidence: Option<&'a [SampleEvidence]>,
}

impl LabeledTainted<'_> {
    fn classes(&self) -> Option<HashMap<&str, Classification>> {
        self.evidence
            .map(|ev| ev.iter().map(|e| (e.sample_id.as_str(), e.classification)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaintedOverlap {
    pub shared: Vec<String>,
    pub only_a: Vec<String>,
    pub only_b: Vec<String>,
    /// Shared ids classified positive in both runs.
    pub shared_positive: Option<usize>,
    pub shared_a_classes: Option<ClassCounts>,
    pub shared_b_classes: Option<ClassCounts>,
}

fn class_counts<'a>(ids: impl Iterator<Item = &'a String>, classes: &HashMap<&str, Classification>) -> ClassCounts {
    let mut c = ClassCounts::default();
    for id in ids {
        match classes.get(id.as_str()) {
            Some(Classification::Positive) => c.positive += 1,
            Some(Classification::Negative) => c.negative += 1,
            Some(Classification::Abstain) => c.abstain += 1,
            None => c.unclassified += 1,
        }
    }
    c
}

/// Intersection and differences of two tainted sets by sample id.
pub fn tainted_overlap(a: LabeledTainted<'_>, b: LabeledTainted<'_>) -> Result<TaintedOverlap> {
    if a.set.dataset_digest != b.set.dataset_digest {
        return Err(Error::DigestMismatch(format!(
            "tainted sets come from different datasets ({} vs {})",
            a.set.dataset_digest, b.set.dataset_digest
        )));
    }
    let ids = |s: &TaintedSet| -> BTreeSet<String> { s.ids().into_iter().map(String::from).collect() };
    let (sa, sb) = (ids(a.set), ids(b.set));
    let shared: Vec<String> = sa.intersection(&sb).cloned().collect();
    let (ca, cb) = (a.classes(), b.classes());
    let shared_positive = match (&ca, &cb) {
        (Some(ca), Some(cb)) => Some(
            shared
                .iter()
                .filter(|id| {
                    ca.get(id.as_str()) == Some(&Classification::Positive)
                        && cb.get(id.as_str()) == Some(&Classification::Positive)
                })
                .count(),
        ),
        _ => None,
    };
    Ok(TaintedOverlap {
        only_a: sa.difference(&sb).cloned().collect(),
        only_b: sb.difference(&sa).cloned().collect(),
        shared_positive,
        shared_a_classes: ca.as_ref().map(|c| class_counts(shared.iter(), c)),
        shared_b_classes: cb.as_ref().map(|c| class_counts(shared.iter(), c)),
        shared,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RobustnessVariant {
    TemperatureSweep { temperatures: Vec<f64> },
    Rephrase { rephraser: ModelEndpoint },
}

/// Everything needed to replay one robustness point from the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessProvenance {
    pub suspect: String,
    pub suspect_decoding: DecodingParams,
    /// `(endpoint, temperature)` for every reference endpoint.
    pub reference_temperatures: Vec<(String, Option<f64>)>,
    pub rephraser: Option<String>,
    pub rephraser_model: Option<String>,
    pub rephrase_prefix: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    /// `temperature=<t>` or `rephrase=<endpoint>`.
    pub label: String,
    pub provenance: RobustnessProvenance,
    pub verdict: Verdict,
}

fn reference_temperatures(auditor: &Auditor<'_>) -> Vec<(String, Option<f64>)> {
    auditor
        .pairs
        .iter()
        .flat_map(|p| [&p.raw, &p.tuned])
        .map(|e| (e.name.clone(), e.decoding.temperature))
        .collect()
}

/// Replace every response text with the rephraser's rewrite. Responses the
/// rephraser failed on are dropped.
pub async fn rephrase_records(
    gateway: &Gateway,
    rephraser: &ModelEndpoint,
    records: &[ResponseRecord],
) -> Result<Vec<ResponseRecord>> {
    let items: Vec<PromptItem> = records
        .iter()
        .map(|r| PromptItem {
            sample_id: format!("{}@{}#{}", r.sample_id, r.endpoint_name, r.attempt),
            prompt: format!("{REPHRASE_PREFIX}{}", r.text),
        })
        .collect();
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let mut decoding = rephraser.decoding.clone();
    decoding.n_samples = 1;
    let out = gateway.collect_prompts(rephraser, &items, &decoding).await?;
    let rewritten: HashMap<&str, &str> = out
        .records
        .iter()
        .map(|r| (r.sample_id.as_str(), r.text.as_str()))
        .collect();
    Ok(records
        .iter()
        .zip(&items)
        .filter_map(|(r, item)| {
            rewritten.get(item.sample_id.as_str()).map(|text| {
                let mut r = r.clone();
                r.text = text.to_string();
                r.byte_len = r.text.len();
                r
            })
        })
        .collect())
}

/// Re-audit `suspect` under each point of `variant`, reusing the offline
/// phase. References keep their configured decoding throughout.
pub async fn robustness_run(
    auditor: &Auditor<'_>,
    offline: &OfflinePhase,
    suspect: &ModelEndpoint,
    variant: &RobustnessVariant,
) -> Result<Vec<RobustnessPoint>> {
    let refs = reference_temperatures(auditor);
    match variant {
        RobustnessVariant::TemperatureSweep { temperatures } => {
            crate::config::validate_temperatures(temperatures)?;
            let mut points = Vec::new();
            for &t in temperatures {
                let decoding = suspect.decoding.clone().with_temperature(t);
                let collection = auditor
                    .collect_suspect(suspect, &offline.tainted, Some(decoding.clone()))
                    .await?;
                points.push(RobustnessPoint {
                    label: format!("temperature={t}"),
                    provenance: RobustnessProvenance {
                        suspect: suspect.name.clone(),
                        suspect_decoding: decoding,
                        reference_temperatures: refs.clone(),
                        rephraser: None,
                        rephraser_model: None,
                        rephrase_prefix: None,
                    },
                    verdict: auditor.classify(offline, &collection.records)?,
                });
            }
            Ok(points)
        }
        RobustnessVariant::Rephrase { rephraser } => {
            let collection = auditor.collect_suspect(suspect, &offline.tainted, None).await?;
            let rephrased = rephrase_records(auditor.gateway, rephraser, &collection.records).await?;
            Ok(vec![RobustnessPoint {
                label: format!("rephrase={}", rephraser.name),
                provenance: RobustnessProvenance {
                    suspect: suspect.name.clone(),
                    suspect_decoding: suspect.decoding.clone(),
                    reference_temperatures: refs,
                    rephraser: Some(rephraser.name.clone()),
                    rephraser_model: Some(rephraser.model_id.clone()),
                    rephrase_prefix: Some(REPHRASE_PREFIX.to_string()),
                },
                verdict: auditor.classify(offline, &rephrased)?,
            }])
        }
    }
}

/// Comma-separated summary of robustness points.
pub fn robustness_csv(points: &[RobustnessPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "suspect", "decision", "positive", "negative", "abstained"])
        .map_err(csv_error)?;
    for p in points {
        let decision = serde_json::to_value(p.verdict.decision)?;
        w.write_record([
            p.label.clone(),
            p.provenance.suspect.clone(),
            decision.as_str().unwrap_or_default().to_string(),
            p.verdict.positive_count.to_string(),
            p.verdict.negative_count.to_string(),
            p.verdict.abstained_count.to_string(),
        ])
        .map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
