//! Independent brute-force oracles and fixtures shared by the integration
//! tests. Nothing here calls into the decision or metric code under test.

#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taintscope::corpus::{Dataset, Sample};
use taintscope::error::Result;
use taintscope::inference::{
    classify_sample, infer_membership, prefilter, select_tainted, Classification, Decision,
    ReferenceResponses, ReferenceTexts, SelectionMode, Verdict,
};
use taintscope::similarity::{Metric, SimilarityScore, TextSimilarity};

const PAD: &str = "|padding-to-pass-the-length-filter";

/// Pre-drawn similarity scores for one synthetic audit.
#[derive(Debug, Clone)]
pub struct ScoreTensor {
    pub n_pairs: usize,
    pub delta_t: f64,
    pub delta_s: f64,
    /// Per sample, per pair: (raw, tuned) similarity to the oracle output.
    pub oracle: Vec<Vec<(f64, f64)>>,
    /// Per sample, per response: `None` for a response below the length
    /// filter, else per pair (raw, tuned) similarity.
    pub responses: Vec<Vec<Option<Vec<(f64, f64)>>>>,
}

pub const MU: usize = 20;

impl ScoreTensor {
    pub fn random(rng: &mut ChaCha8Rng) -> ScoreTensor {
        let n = rng.random_range(1..=7);
        let samples = rng.random_range(1..=200);
        let k = rng.random_range(1..=5);
        // Half the tensors use a coarse grid so exact ties with the thresholds occur.
        let coarse = rng.random_bool(0.5);
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            let u: f64 = rng.random();
            if coarse {
                (u * 20.0).floor() / 20.0
            } else {
                u
            }
        };
        let delta_t = if coarse { 0.3 } else { rng.random_range(0.05..0.6) };
        let delta_s = if rng.random_bool(0.5) { delta_t } else { rng.random_range(0.05..0.6) };
        let short_rate = rng.random_range(0.0..0.4);
        let pairs = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| (draw(rng), draw(rng))).collect::<Vec<_>>();
        let oracle: Vec<_> = (0..samples).map(|_| pairs(rng, n)).collect();
        let responses = (0..samples)
            .map(|_| {
                (0..k)
                    .map(|_| (!rng.random_bool(short_rate)).then(|| pairs(rng, n)))
                    .collect()
            })
            .collect();
        ScoreTensor { n_pairs: n, delta_t, delta_s, oracle, responses }
    }

    /// Same tensor with one more reference pair appended.
    pub fn with_extra_pair(&self, rng: &mut ChaCha8Rng) -> ScoreTensor {
        let mut t = self.clone();
        t.n_pairs += 1;
        for o in &mut t.oracle {
            o.push((rng.random(), rng.random()));
        }
        for rs in &mut t.responses {
            for r in rs.iter_mut().flatten() {
                r.push((rng.random(), rng.random()));
            }
        }
        t
    }

    pub fn sample_id(i: usize) -> String {
        format!("s{i:04}")
    }

    pub fn dataset(&self) -> Dataset {
        let samples = (0..self.oracle.len())
            .map(|i| Sample {
                id: Self::sample_id(i),
                instruction: format!("question {i}"),
                context: None,
                oracle_output: format!("orc|{i}|0{PAD}"),
                category: None,
            })
            .collect();
        Dataset::from_samples("tensor", samples).unwrap()
    }

    pub fn references(&self) -> ReferenceResponses {
        (0..self.oracle.len())
            .map(|i| {
                let refs = (0..self.n_pairs)
                    .map(|p| ReferenceTexts {
                        raw: format!("ref|{i}|{p}|0{PAD}"),
                        tuned: format!("ref|{i}|{p}|1{PAD}"),
                    })
                    .collect();
                (Self::sample_id(i), refs)
            })
            .collect()
    }

    /// `(attempt, text)` suspect responses for sample `i`.
    pub fn suspect_texts(&self, i: usize) -> Vec<(u32, String)> {
        self.responses[i]
            .iter()
            .enumerate()
            .map(|(a, r)| {
                let text = match r {
                    Some(_) => format!("rsp|{i}|{a}{PAD}"),
                    None => format!("r{a}"),
                };
                (a as u32, text)
            })
            .collect()
    }
}

/// Metric that looks scores up in a [`ScoreTensor`] by decoding the texts.
pub struct TableMetric<'a>(pub &'a ScoreTensor);

impl TextSimilarity for TableMetric<'_> {
    fn metric(&self) -> Metric {
        Metric::LcsRatio
    }

    fn variant(&self) -> String {
        "table".into()
    }

    // Called as score(reference response, scored text).
    fn score(&self, reference: &str, candidate: &str) -> Result<SimilarityScore> {
        let r: Vec<&str> = reference.split('|').collect();
        let c: Vec<&str> = candidate.split('|').collect();
        assert_eq!(r[0], "ref", "first argument must be a reference response");
        let (i, p, tuned): (usize, usize, bool) = (r[1].parse().unwrap(), r[2].parse().unwrap(), r[3] == "1");
        assert_eq!(c[1].parse::<usize>().unwrap(), i, "scored against another sample");
        let pair = match c[0] {
            "orc" => self.0.oracle[i][p],
            "rsp" => self.0.responses[i][c[2].parse::<usize>().unwrap()].as_ref().expect("short response scored")[p],
            other => panic!("unexpected text kind {other}"),
        };
        let value = if tuned { pair.1 } else { pair.0 };
        Ok(SimilarityScore { value, metric: Metric::LcsRatio })
    }
}

/// Run the library's selection, classification and aggregation over `t`.
pub fn run_library(t: &ScoreTensor) -> (Vec<usize>, Verdict) {
    let d = t.dataset();
    let refs = t.references();
    let metric = TableMetric(t);
    let pre = prefilter(&d.samples, &refs, t.n_pairs, MU);
    assert!(pre.too_short.is_empty() && pre.incomplete.is_empty());
    let tainted = select_tainted(&d, &refs, &pre.retained, &metric, t.delta_t, SelectionMode::Disparity, "tensor").unwrap();
    let evidence = tainted
        .ids()
        .iter()
        .map(|id| {
            let i: usize = id[1..].parse().unwrap();
            let texts = t.suspect_texts(i);
            let borrowed: Vec<(u32, &str)> = texts.iter().map(|(a, s)| (*a, s.as_str())).collect();
            classify_sample(id, &borrowed, &refs[*id], &metric, MU, t.delta_s).unwrap()
        })
        .collect();
    let ids = tainted.ids().iter().map(|id| id[1..].parse().unwrap()).collect();
    let verdict = infer_membership(&tainted, evidence);
    (ids, verdict)
}

/// Differences between the library run and the brute-force oracle; empty
/// when they agree on the tainted set, every classification and the verdict.
pub fn mismatches(t: &ScoreTensor) -> Vec<String> {
    let expected = brute_force(t);
    let (ids, verdict) = run_library(t);
    let mut out = Vec::new();
    if ids != expected.tainted {
        out.push(format!("tainted {:?} != {:?}", ids, expected.tainted));
        return out;
    }
    for (e, want) in verdict.evidence.iter().zip(&expected.classes) {
        let got = match e.classification {
            Classification::Positive => OracleClass::Positive,
            Classification::Negative => OracleClass::Negative,
            Classification::Abstain => OracleClass::Abstain,
        };
        if got != *want {
            out.push(format!("{}: {:?} != {:?}", e.sample_id, got, want));
        }
    }
    let member = verdict.decision == Decision::Member;
    if (verdict.positive_count, verdict.negative_count, verdict.abstained_count, member)
        != (expected.positive, expected.negative, expected.abstained, expected.member)
    {
        out.push(format!(
            "counts ({}, {}, {}, {member}) != ({}, {}, {}, {})",
            verdict.positive_count,
            verdict.negative_count,
            verdict.abstained_count,
            expected.positive,
            expected.negative,
            expected.abstained,
            expected.member
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleClass {
    Positive,
    Negative,
    Abstain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleVerdict {
    pub tainted: Vec<usize>,
    pub classes: Vec<OracleClass>,
    pub positive: usize,
    pub negative: usize,
    pub abstained: usize,
    pub member: bool,
}

/// Literal evaluation: a sample is tainted when every pair's tuned-minus-raw
/// oracle similarity exceeds delta_t; it is positive when some long-enough
/// response has every pair's difference above delta_s.
pub fn brute_force(t: &ScoreTensor) -> OracleVerdict {
    let mut tainted = Vec::new();
    for (i, pairs) in t.oracle.iter().enumerate() {
        let mut all = true;
        for &(raw, tuned) in pairs {
            if !(tuned - raw > t.delta_t) {
                all = false;
            }
        }
        if all {
            tainted.push(i);
        }
    }
    let mut classes = Vec::new();
    for &i in &tainted {
        let mut any_scored = false;
        let mut any_exceeds = false;
        for r in t.responses[i].iter().flatten() {
            any_scored = true;
            let mut m = f64::INFINITY;
            for &(raw, tuned) in r {
                let d = tuned - raw;
                if d < m {
                    m = d;
                }
            }
            if m > t.delta_s {
                any_exceeds = true;
            }
        }
        classes.push(if !any_scored {
            OracleClass::Abstain
        } else if any_exceeds {
            OracleClass::Positive
        } else {
            OracleClass::Negative
        });
    }
    let count = |c| classes.iter().filter(|&&x| x == c).count();
    let (positive, negative, abstained) = (count(OracleClass::Positive), count(OracleClass::Negative), count(OracleClass::Abstain));
    OracleVerdict {
        tainted,
        classes,
        positive,
        negative,
        abstained,
        member: positive > negative,
    }
}

pub fn tokens(text: &str) -> Vec<String> {
    taintscope::tokenize::word_tokens(text)
}

/// Jaccard over token sets with the "both empty is 1" convention.
pub fn jaccard_oracle(a: &str, b: &str) -> f64 {
    let sa: HashSet<String> = tokens(a).into_iter().collect();
    let sb: HashSet<String> = tokens(b).into_iter().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.iter().filter(|t| sb.contains(*t)).count();
    let union = sa.len() + sb.len() - inter;
    inter as f64 / union as f64
}

/// F1 of the greedy match under one-hot vectors, by counting: a token counts
/// as matched when its type occurs anywhere on the other side.
pub fn onehot_f1_oracle(candidate: &[String], reference: &[String]) -> f64 {
    let cset: HashSet<&String> = candidate.iter().collect();
    let rset: HashSet<&String> = reference.iter().collect();
    let p = candidate.iter().filter(|t| rset.contains(t)).count() as f64 / candidate.len() as f64;
    let r = reference.iter().filter(|t| cset.contains(t)).count() as f64 / reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// TF-IDF cosine computed from scratch.
pub fn tfidf_oracle(a: &str, b: &str, corpus: &[&str]) -> f64 {
    let n = corpus.len() as f64;
    let docs: Vec<HashSet<String>> = corpus.iter().map(|d| tokens(d).into_iter().collect()).collect();
    let idf = |t: &str| {
        let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
        ((1.0 + n) / (1.0 + df)).ln() + 1.0
    };
    let vec = |text: &str| {
        let mut tf: HashMap<String, f64> = HashMap::new();
        for t in tokens(text) {
            *tf.entry(t).or_insert(0.0) += 1.0;
        }
        tf.into_iter().map(|(t, c)| {
            let w = c * idf(&t);
            (t, w)
        }).collect::<HashMap<_, _>>()
    };
    let (va, vb) = (vec(a), vec(b));
    if va.is_empty() && vb.is_empty() {
        return 1.0;
    }
    let dot: f64 = va.iter().map(|(t, w)| w * vb.get(t).copied().unwrap_or(0.0)).sum();
    let na = va.values().map(|w| w * w).sum::<f64>().sqrt();
    let nb = vb.values().map(|w| w * w).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

/// LCS length by exhaustive recursion; only for short inputs.
pub fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if a[0] == b[0] {
        1 + lcs_oracle(&a[1..], &b[1..])
    } else {
        lcs_oracle(&a[1..], b).max(lcs_oracle(a, &b[1..]))
    }
}

/// Random text over a small vocabulary, so tokens repeat and overlap.
pub fn random_text(rng: &mut ChaCha8Rng, vocab: usize, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| format!("w{}", rng.random_range(0..vocab)))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fixture for deduplication: `base` random samples plus near-copies of some
/// of them (one token changed in input and output) and some copies with only
/// the input kept.
pub fn dedup_fixture(seed: u64, base: usize) -> Dataset {
    let mut r = rng(seed);
    let mut samples = Vec::new();
    for i in 0..base {
        samples.push(Sample {
            id: format!("b{i}"),
            instruction: random_text(&mut r, 400, 12, 20),
            context: r.random_bool(0.3).then(|| random_text(&mut r, 400, 5, 10)),
            oracle_output: random_text(&mut r, 400, 12, 20),
            category: None,
        });
    }
    for i in 0..base / 3 {
        let src = samples[r.random_range(0..base)].clone();
        let tweak = |text: &str, r: &mut ChaCha8Rng| {
            let mut toks: Vec<String> = text.split(' ').map(String::from).collect();
            if r.random_bool(0.5) {
                let j = r.random_range(0..toks.len());
                toks[j] = format!("z{i}");
            }
            toks.join(" ")
        };
        let keep_output = r.random_bool(0.7);
        samples.push(Sample {
            id: format!("d{i}"),
            instruction: tweak(&src.instruction, &mut r),
            context: src.context.clone(),
            oracle_output: if keep_output {
                tweak(&src.oracle_output, &mut r)
            } else {
                random_text(&mut r, 400, 12, 20)
            },
            category: None,
        });
    }
    Dataset::from_samples("dedup", samples).unwrap()
}

fn passes_filter(text: &str) -> bool {
    text.len() >= MU && !tokens(text).is_empty()
}

/// Score tensor measured directly from endpoint responses, bypassing the
/// auditor: references and suspect are queried through `gateway`, every
/// sample passing the length filter is scored with `metric`. Returns the
/// tensor and the sample id of each tensor row.
pub async fn measured_tensor(
    gateway: &taintscope::gateway::Gateway,
    dataset: &Dataset,
    pairs: &[taintscope::gateway::ReferencePair],
    suspect: &taintscope::gateway::ModelEndpoint,
    metric: &dyn TextSimilarity,
    delta_t: f64,
    delta_s: f64,
    k: u32,
) -> (ScoreTensor, Vec<String>) {
    let text_of = |c: taintscope::gateway::Collection| -> HashMap<String, String> {
        c.records.into_iter().map(|r| (r.sample_id, r.text)).collect()
    };
    let mut per_endpoint = Vec::new();
    for p in pairs {
        let raw = text_of(gateway.collect_responses(&p.raw, &dataset.samples, 1).await.unwrap());
        let tuned = text_of(gateway.collect_responses(&p.tuned, &dataset.samples, 1).await.unwrap());
        per_endpoint.push((raw, tuned));
    }
    let mut rows = Vec::new();
    let mut oracle = Vec::new();
    for s in &dataset.samples {
        let refs: Option<Vec<(&String, &String)>> =
            per_endpoint.iter().map(|(r, t)| Some((r.get(&s.id)?, t.get(&s.id)?))).collect();
        let Some(refs) = refs else { continue };
        if !passes_filter(&s.oracle_output) || !refs.iter().all(|(r, t)| passes_filter(r) && passes_filter(t)) {
            continue;
        }
        let scores = refs
            .iter()
            .map(|(r, t)| {
                (
                    metric.score(r, &s.oracle_output).unwrap().value,
                    metric.score(t, &s.oracle_output).unwrap().value,
                )
            })
            .collect();
        rows.push(s.clone());
        oracle.push(scores);
    }
    let collected = gateway.collect_responses(suspect, &rows, k).await.unwrap();
    let mut responses = Vec::new();
    for s in &rows {
        let mut mine: Vec<_> = collected.records.iter().filter(|r| r.sample_id == s.id).collect();
        mine.sort_by_key(|r| r.attempt);
        let row = mine
            .iter()
            .map(|r| {
                passes_filter(&r.text).then(|| {
                    per_endpoint
                        .iter()
                        .map(|(raw, tuned)| {
                            (
                                metric.score(&raw[&s.id], &r.text).unwrap().value,
                                metric.score(&tuned[&s.id], &r.text).unwrap().value,
                            )
                        })
                        .collect()
                })
            })
            .collect();
        responses.push(row);
    }
    let tensor = ScoreTensor {
        n_pairs: pairs.len(),
        delta_t,
        delta_s,
        oracle,
        responses,
    };
    (tensor, rows.into_iter().map(|s| s.id).collect())
}

fn input_of(s: &Sample) -> String {
    format!("{} {}", s.context.clone().unwrap_or_default(), s.instruction)
}

fn near_duplicate(x: &Sample, y: &Sample, threshold: f64) -> bool {
    jaccard_oracle(&input_of(x), &input_of(y)) >= threshold
        && jaccard_oracle(&x.oracle_output, &y.oracle_output) >= threshold
}

/// Ids of the non-victim samples of `d` that near-duplicate some victim
/// sample, by exhaustive pairwise comparison.
pub fn dedup_oracle(d: &Dataset, victim: &Dataset, threshold: f64) -> Vec<String> {
    let victim_ids: HashSet<&str> = victim.samples.iter().map(|s| s.id.as_str()).collect();
    let mut out: Vec<String> = d
        .samples
        .iter()
        .filter(|y| !victim_ids.contains(y.id.as_str()))
        .filter(|y| victim.samples.iter().any(|x| near_duplicate(x, y, threshold)))
        .map(|y| y.id.clone())
        .collect();
    out.sort();
    out
}

/// Victim/holdout pairs that are near-duplicates of each other.
pub fn cross_violations(victim: &Dataset, holdout: &Dataset, threshold: f64) -> usize {
    victim
        .samples
        .iter()
        .map(|x| holdout.samples.iter().filter(|y| near_duplicate(x, y, threshold)).count())
        .sum()
}
