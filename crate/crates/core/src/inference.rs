//! The decision procedure: length pre-filtering, tainted-sample selection,
//! per-sample classification against the suspect, and the majority verdict.
//!
//! Everything here is pure over already-collected texts and scores.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::similarity::TextSimilarity;

/// Default minimum response size in bytes.
pub const DEFAULT_MU: usize = 20;
/// Default disparity threshold for tainted selection.
pub const DEFAULT_DELTA_T: f64 = 0.30;
/// Default number of suspect responses per tainted sample.
pub const DEFAULT_K: u32 = 3;

/// Similarity to the non-trained (`raw`) and fine-tuned (`tuned`) member of one
/// reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub raw: f64,
    pub tuned: f64,
}

impl ScorePair {
    pub fn diff(&self) -> f64 {
        self.tuned - self.raw
    }
}

/// Per-reference score pairs for one sample (or one suspect response).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityVector {
    pub sample_id: String,
    pub pairs: Vec<ScorePair>,
}

impl DisparityVector {
    pub fn diffs(&self) -> Vec<f64> {
        self.pairs.iter().map(ScorePair::diff).collect()
    }

    /// Smallest tuned-minus-raw difference; `-inf` for an empty vector.
    pub fn min_diff(&self) -> f64 {
        if self.pairs.is_empty() {
            return f64::NEG_INFINITY;
        }
        self.pairs.iter().map(ScorePair::diff).fold(f64::INFINITY, f64::min)
    }

    /// Every reference pair shows a disparity strictly above `delta`.
    pub fn exceeds(&self, delta: f64) -> bool {
        !self.pairs.is_empty() && self.min_diff() > delta
    }
}

/// One reference pair's responses to a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceTexts {
    pub raw: String,
    pub tuned: String,
}

/// Reference responses keyed by sample id, one entry per reference pair in
/// pair order.
pub type ReferenceResponses = BTreeMap<String, Vec<ReferenceTexts>>;

/// `true` unless `text` is shorter than `mu` bytes.
pub fn long_enough(text: &str, mu: usize) -> bool {
    text.len() >= mu
}

/// At least `mu` bytes and at least one word token; a long run of
/// punctuation carries nothing to score.
pub fn analyzable(text: &str, mu: usize) -> bool {
    long_enough(text, mu) && !crate::tokenize::word_tokens(text).is_empty()
}

/// Outcome of the offline length filter.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefilterOutcome {
    pub retained: Vec<String>,
    pub too_short: Vec<String>,
    /// Samples lacking a response from some reference model.
    pub incomplete: Vec<String>,
}

/// Keep a sample iff its oracle output and all `2n` reference responses are at
/// least `mu` bytes long and contain a word.
pub fn prefilter(
    samples: &[Sample],
    responses: &ReferenceResponses,
    n_pairs: usize,
    mu: usize,
) -> PrefilterOutcome {
    let mut out = PrefilterOutcome::default();
    for s in samples {
        match responses.get(&s.id) {
            Some(refs) if refs.len() == n_pairs && n_pairs > 0 => {
                let ok = analyzable(&s.oracle_output, mu)
                    && refs
                        .iter()
                        .all(|r| analyzable(&r.raw, mu) && analyzable(&r.tuned, mu));
                if ok {
                    out.retained.push(s.id.clone());
                } else {
                    out.too_short.push(s.id.clone());
                }
            }
            _ => out.incomplete.push(s.id.clone()),
        }
    }
    out
}

/// Score `text` against each reference pair's responses.
pub fn disparity(
    sample_id: &str,
    text: &str,
    refs: &[ReferenceTexts],
    metric: &dyn TextSimilarity,
) -> Result<DisparityVector> {
    let pairs = refs
        .iter()
        .map(|r| {
            Ok(ScorePair {
                raw: metric.score(&r.raw, text)?.value,
                tuned: metric.score(&r.tuned, text)?.value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DisparityVector {
        sample_id: sample_id.to_string(),
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Members satisfy the disparity rule at the recorded threshold.
    Disparity,
    /// Ablation: every retained sample is a member.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaintedSet {
    pub dataset_digest: String,
    pub reference_config_digest: String,
    pub delta_t: f64,
    pub mode: SelectionMode,
    /// Number of samples that survived pre-filtering.
    pub retained: usize,
    pub members: Vec<DisparityVector>,
}

impl TaintedSet {
    pub fn ids(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.sample_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.members.iter().any(|m| m.sample_id == id)
    }
}

/// Vectors whose every difference strictly exceeds `delta_t`, in input order.
pub fn select_from_vectors(vectors: &[DisparityVector], delta_t: f64) -> Vec<DisparityVector> {
    vectors.iter().filter(|v| v.exceeds(delta_t)).cloned().collect()
}

/// Disparity vectors of the retained samples, each reference response scored
/// against the oracle output.
pub fn oracle_disparities(
    dataset: &Dataset,
    responses: &ReferenceResponses,
    retained: &[String],
    metric: &dyn TextSimilarity,
) -> Result<Vec<DisparityVector>> {
    let keep: HashSet<&str> = retained.iter().map(String::as_str).collect();
    dataset
        .samples
        .iter()
        .filter(|s| keep.contains(s.id.as_str()))
        .map(|s| {
            let refs = responses
                .get(&s.id)
                .ok_or_else(|| Error::MissingResponses(vec![s.id.clone()]))?;
            disparity(&s.id, &s.oracle_output, refs, metric)
        })
        .collect()
}

/// Select tainted samples from the retained ones. With `mode = Disabled`
/// every retained sample becomes a member.
pub fn select_tainted(
    dataset: &Dataset,
    responses: &ReferenceResponses,
    retained: &[String],
    metric: &dyn TextSimilarity,
    delta_t: f64,
    mode: SelectionMode,
    reference_config_digest: &str,
) -> Result<TaintedSet> {
    if retained.is_empty() {
        return Err(Error::NoAnalyzableSamples);
    }
    let vectors = oracle_disparities(dataset, responses, retained, metric)?;
    let members = match mode {
        SelectionMode::Disparity => select_from_vectors(&vectors, delta_t),
        SelectionMode::Disabled => vectors,
    };
    Ok(TaintedSet {
        dataset_digest: dataset.content_digest(),
        reference_config_digest: reference_config_digest.to_string(),
        delta_t,
        mode,
        retained: retained.len(),
        members,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Positive,
    Negative,
    Abstain,
}

/// One suspect response's contribution to a sample's classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEvidence {
    pub attempt: u32,
    pub byte_len: usize,
    /// Score pairs against each reference pair; absent when the response was
    /// shorter than `mu`.
    pub pairs: Option<Vec<ScorePair>>,
}

impl ResponseEvidence {
    /// Smallest tuned-minus-raw difference over the reference pairs.
    pub fn statistic(&self) -> Option<f64> {
        self.pairs.as_ref().map(|p| {
            p.iter().map(ScorePair::diff).fold(f64::INFINITY, f64::min)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEvidence {
    pub sample_id: String,
    pub classification: Classification,
    /// Largest per-response statistic, if any response passed the filter.
    pub statistic: Option<f64>,
    pub responses: Vec<ResponseEvidence>,
}

/// Positive iff the largest per-response statistic exceeds `delta_s`;
/// abstain when no response statistic is available.
pub fn classify_statistics(stats: &[Option<f64>], delta_s: f64) -> (Classification, Option<f64>) {
    let best = stats.iter().flatten().copied().fold(None, |acc: Option<f64>, m| {
        Some(acc.map_or(m, |a| a.max(m)))
    });
    match best {
        None => (Classification::Abstain, None),
        Some(m) if m > delta_s => (Classification::Positive, Some(m)),
        Some(m) => (Classification::Negative, Some(m)),
    }
}

/// Classify one tainted sample from the suspect's responses `(attempt, text)`.
pub fn classify_sample(
    sample_id: &str,
    suspect_responses: &[(u32, &str)],
    refs: &[ReferenceTexts],
    metric: &dyn TextSimilarity,
    mu: usize,
    delta_s: f64,
) -> Result<SampleEvidence> {
    if refs.is_empty() {
        return Err(Error::MissingResponses(vec![sample_id.to_string()]));
    }
    let responses = suspect_responses
        .iter()
        .map(|&(attempt, text)| {
            let pairs = if analyzable(text, mu) {
                Some(disparity(sample_id, text, refs, metric)?.pairs)
            } else {
                None
            };
            Ok(ResponseEvidence {
                attempt,
                byte_len: text.len(),
                pairs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stats: Vec<Option<f64>> = responses.iter().map(ResponseEvidence::statistic).collect();
    let (classification, statistic) = classify_statistics(&stats, delta_s);
    Ok(SampleEvidence {
        sample_id: sample_id.to_string(),
        classification,
        statistic,
        responses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Member,
    NonMember,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub positive_count: usize,
    pub negative_count: usize,
    pub abstained_count: usize,
    pub decision: Decision,
    pub warnings: Vec<String>,
    pub evidence: Vec<SampleEvidence>,
}

/// Member iff strictly more positive than negative tainted samples.
/// Abstentions count for neither side.
pub fn decide(positive: usize, negative: usize) -> Decision {
    if positive > negative {
        Decision::Member
    } else {
        Decision::NonMember
    }
}

/// Aggregate per-sample classifications of `tainted` into a verdict. Tainted
/// samples without evidence are counted as abstained.
pub fn infer_membership(tainted: &TaintedSet, classifications: Vec<SampleEvidence>) -> Verdict {
    let mut by_id: BTreeMap<String, SampleEvidence> = classifications
        .into_iter()
        .filter(|e| tainted.contains(&e.sample_id))
        .map(|e| (e.sample_id.clone(), e))
        .collect();
    let mut evidence = Vec::with_capacity(tainted.len());
    let mut unclassified = 0;
    for id in tainted.ids() {
        match by_id.remove(id) {
            Some(e) => evidence.push(e),
            None => {
                unclassified += 1;
                evidence.push(SampleEvidence {
                    sample_id: id.to_string(),
                    classification: Classification::Abstain,
                    statistic: None,
                    responses: Vec::new(),
                });
            }
        }
    }
    let count = |c: Classification| evidence.iter().filter(|e| e.classification == c).count();
    let positive_count = count(Classification::Positive);
    let negative_count = count(Classification::Negative);
    let abstained_count = count(Classification::Abstain);

    let mut warnings = Vec::new();
    if tainted.is_empty() {
        warnings.push("no tainted samples were selected; the verdict carries no evidence".into());
    } else if positive_count + negative_count == 0 {
        warnings.push(format!(
            "all {abstained_count} tainted samples abstained; the verdict carries no evidence"
        ));
    }
    if unclassified > 0 {
        warnings.push(format!("{unclassified} tainted samples had no suspect responses"));
    }
    Verdict {
        positive_count,
        negative_count,
        abstained_count,
        decision: decide(positive_count, negative_count),
        warnings,
        evidence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::LcsRatio;

    fn vector(diffs: &[f64]) -> DisparityVector {
        DisparityVector {
            sample_id: "s".into(),
            pairs: diffs.iter().map(|&d| ScorePair { raw: 0.0, tuned: d }).collect(),
        }
    }

    fn sample(id: &str, output: &str) -> Sample {
        Sample {
            id: id.into(),
            instruction: "q".into(),
            context: None,
            oracle_output: output.into(),
            category: None,
        }
    }

    #[test]
    fn selection_quantifier_and_strictness() {
        assert!(vector(&[0.40, 0.35]).exceeds(0.30));
        assert!(!vector(&[0.40, 0.25]).exceeds(0.30));
        assert!(!vector(&[0.31, 0.30]).exceeds(0.30));
        assert!(!vector(&[]).exceeds(0.30));
    }

    #[test]
    fn max_rule_classification() {
        let p = classify_statistics(&[Some(0.10), Some(0.35), Some(-0.20)], 0.30);
        assert_eq!(p, (Classification::Positive, Some(0.35)));
        let n = classify_statistics(&[Some(0.10), Some(0.20), Some(0.29)], 0.30);
        assert_eq!(n.0, Classification::Negative);
        let a = classify_statistics(&[None, None, None], 0.30);
        assert_eq!(a, (Classification::Abstain, None));
    }

    #[test]
    fn prefilter_byte_semantics() {
        let long = "x".repeat(20);
        let refs = |t: &str| {
            vec![ReferenceTexts {
                raw: t.to_string(),
                tuned: t.to_string(),
            }]
        };
        let multibyte = "あいうえおかき"; // 7 chars, 21 bytes
        assert_eq!(multibyte.len(), 21);
        let samples = vec![sample("short", "12345"), sample("edge", &long), sample("mb", multibyte)];
        let mut responses = ReferenceResponses::new();
        responses.insert("short".into(), refs(&long));
        responses.insert("edge".into(), refs(&long));
        responses.insert("mb".into(), refs(multibyte));
        let out = prefilter(&samples, &responses, 1, DEFAULT_MU);
        assert_eq!(out.retained, vec!["edge", "mb"]);
        assert_eq!(out.too_short, vec!["short"]);
    }

    #[test]
    fn prefilter_flags_incomplete_references() {
        let samples = vec![sample("a", &"y".repeat(30))];
        let out = prefilter(&samples, &ReferenceResponses::new(), 2, DEFAULT_MU);
        assert_eq!(out.incomplete, vec!["a"]);
    }

    #[test]
    fn verdict_majority_and_ties() {
        assert_eq!(decide(10, 4), Decision::Member);
        assert_eq!(decide(5, 5), Decision::NonMember);
        assert_eq!(decide(0, 0), Decision::NonMember);
    }

    #[test]
    fn all_abstain_warns() {
        let tainted = TaintedSet {
            dataset_digest: "d".into(),
            reference_config_digest: "r".into(),
            delta_t: 0.3,
            mode: SelectionMode::Disparity,
            retained: 12,
            members: (0..12)
                .map(|i| DisparityVector {
                    sample_id: format!("s{i}"),
                    pairs: vec![],
                })
                .collect(),
        };
        let evidence = (0..12)
            .map(|i| SampleEvidence {
                sample_id: format!("s{i}"),
                classification: Classification::Abstain,
                statistic: None,
                responses: vec![],
            })
            .collect();
        let v = infer_membership(&tainted, evidence);
        assert_eq!((v.positive_count, v.negative_count, v.abstained_count), (0, 0, 12));
        assert_eq!(v.decision, Decision::NonMember);
        assert_eq!(v.warnings.len(), 1);
    }

    #[test]
    fn classify_sample_filters_short_responses() {
        let refs = vec![ReferenceTexts {
            raw: "zeta eta theta iota kappa lambda".into(),
            tuned: "alpha beta gamma delta epsilon".into(),
        }];
        let long = "alpha beta gamma delta epsilon";
        let ev = classify_sample("s", &[(0, "tiny"), (1, long)], &refs, &LcsRatio, 20, 0.3).unwrap();
        assert!(ev.responses[0].pairs.is_none());
        assert_eq!(ev.classification, Classification::Positive);
        assert_eq!(ev.statistic, Some(1.0));
        assert!(classify_sample("s", &[(0, long)], &[], &LcsRatio, 20, 0.3).is_err());
    }
}
