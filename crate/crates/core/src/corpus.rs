//! Victim datasets: JSONL loading, capping, IID splitting and Jaccard
//! deduplication.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::{json_digest, sha256_hex};
use crate::error::{Error, Result};
use crate::tokenize::token_set;

/// Default cap applied to large victim datasets.
pub const DEFAULT_CAP: usize = 50_000;
/// Default Jaccard threshold above which a held-out sample counts as a duplicate.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.8;

/// One instruction record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    /// The output packaged with the sample.
    #[serde(rename = "output")]
    pub oracle_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl Sample {
    /// Input side of the record (context followed by instruction), used for
    /// deduplication.
    pub fn input_text(&self) -> String {
        match self.context.as_deref() {
            Some(ctx) if !ctx.is_empty() => format!("{ctx}\n\n{}", self.instruction),
            _ => self.instruction.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// SHA-256 of the source bytes.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub operation: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
    pub seed_log: Vec<SeedEntry>,
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    instruction: Option<String>,
    #[serde(default)]
    context: Option<String>,
    #[serde(default)]
    output: Option<String>,
    #[serde(default)]
    category: Option<String>,
}

impl Dataset {
    /// Load a JSONL dataset. Blank lines are skipped; every other line must be
    /// a record with `instruction` and `output`.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string());
        Self::from_jsonl_bytes(name, &path.display().to_string(), &bytes)
    }

    pub fn from_jsonl_bytes(name: impl Into<String>, source: &str, bytes: &[u8]) -> Result<Dataset> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
            path: source.to_string(),
            message: format!("not valid UTF-8: {e}"),
        })?;
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| Error::MalformedRecord {
                path: source.to_string(),
                line: line_no,
                message,
            };
            let raw: RawRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            let instruction = raw
                .instruction
                .ok_or_else(|| malformed("missing `instruction`".into()))?;
            if instruction.trim().is_empty() {
                return Err(malformed("empty `instruction`".into()));
            }
            let oracle_output = raw.output.ok_or_else(|| malformed("missing `output`".into()))?;
            let id = raw.id.unwrap_or_else(|| format!("line-{line_no}"));
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId {
                    path: source.to_string(),
                    id,
                    line: line_no,
                });
            }
            samples.push(Sample {
                id,
                instruction,
                context: raw.context,
                oracle_output,
                category: raw.category,
            });
        }
        if samples.is_empty() {
            return Err(Error::EmptyDataset(source.to_string()));
        }
        Ok(Dataset {
            name: name.into(),
            samples,
            provenance: Provenance {
                source: source.to_string(),
                digest: sha256_hex(bytes),
            },
            seed_log: Vec::new(),
        })
    }

    /// Build an in-memory dataset; ids must be unique.
    pub fn from_samples(name: impl Into<String>, samples: Vec<Sample>) -> Result<Dataset> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate sample id {:?}", s.id)));
            }
        }
        let bytes = to_jsonl_bytes(&samples);
        Ok(Dataset {
            name: name.into(),
            provenance: Provenance {
                source: "memory".to_string(),
                digest: sha256_hex(&bytes),
            },
            samples,
            seed_log: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Digest of the sample contents; stable under re-load and independent of
    /// the source path.
    pub fn content_digest(&self) -> String {
        json_digest(&self.samples)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&to_jsonl_bytes(&self.samples))
            .map_err(|e| Error::io(path, e))
    }

    /// Uniformly sample `limit` records when the dataset is larger than that.
    /// Selected records keep their original relative order.
    pub fn cap_sample(&self, limit: usize, seed: u64) -> Result<Dataset> {
        if limit == 0 {
            return Err(Error::InvalidArgument("cap limit must be positive".into()));
        }
        let mut out = self.clone();
        out.seed_log.push(SeedEntry {
            operation: "cap_sample".into(),
            seed,
        });
        if self.len() <= limit {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, self.len(), limit).into_vec();
        picked.sort_unstable();
        out.samples = picked.into_iter().map(|i| self.samples[i].clone()).collect();
        Ok(out)
    }
}

fn to_jsonl_bytes(samples: &[Sample]) -> Vec<u8> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).expect("samples serialize");
        buf.push(b'\n');
    }
    buf
}

/// Jaccard similarity of the lowercased word-token sets of `a` and `b`.
/// Two texts without any tokens score 1.0.
pub fn jaccard_similarity(a: &str, b: &str) -> f64 {
    jaccard_sets(&token_set(a), &token_set(b))
}

fn jaccard_sets(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Result of an IID split: the victim half, the deduplicated held-out half and
/// the ids dropped from the held-out half.
#[derive(Debug, Clone)]
pub struct IidSplit {
    pub victim: Dataset,
    pub holdout: Dataset,
    pub removed: Vec<String>,
}

/// Evenly split `d` at random, then drop every held-out sample whose input and
/// output both reach `dedup_threshold` Jaccard similarity with the input and
/// output of a single victim sample.
pub fn iid_split(d: &Dataset, seed: u64, dedup_threshold: f64) -> Result<IidSplit> {
    if d.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "iid split needs at least 2 samples, got {}",
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let half = d.len().div_ceil(2);
    let (x_idx, y_idx) = order.split_at(half);

    let fields = |i: usize| {
        let s = &d.samples[i];
        (token_set(&s.input_text()), token_set(&s.oracle_output))
    };
    let x_fields: Vec<_> = x_idx.iter().map(|&i| fields(i)).collect();

    let mut kept = Vec::with_capacity(y_idx.len());
    let mut removed = Vec::new();
    for &yi in y_idx {
        let (y_in, y_out) = fields(yi);
        let duplicate = x_fields.iter().any(|(x_in, x_out)| {
            jaccard_sets(&y_in, x_in) >= dedup_threshold
                && jaccard_sets(&y_out, x_out) >= dedup_threshold
        });
        if duplicate {
            removed.push(d.samples[yi].id.clone());
        } else {
            kept.push(yi);
        }
    }

    let mut x_sorted = x_idx.to_vec();
    x_sorted.sort_unstable();
    kept.sort_unstable();
    removed.sort();

    let mut seed_log = d.seed_log.clone();
    seed_log.push(SeedEntry {
        operation: "iid_split".into(),
        seed,
    });
    let part = |suffix: &str, idx: &[usize]| Dataset {
        name: format!("{}-{suffix}", d.name),
        samples: idx.iter().map(|&i| d.samples[i].clone()).collect(),
        provenance: d.provenance.clone(),
        seed_log: seed_log.clone(),
    };
    Ok(IidSplit {
        victim: part("x", &x_sorted),
        holdout: part("y", &kept),
        removed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, instruction: &str, output: &str) -> Sample {
        Sample {
            id: id.into(),
            instruction: instruction.into(),
            context: None,
            oracle_output: output.into(),
            category: None,
        }
    }

    fn load(text: &str) -> Result<Dataset> {
        Dataset::from_jsonl_bytes("t", "t.jsonl", text.as_bytes())
    }

    #[test]
    fn loads_three_records_in_order() {
        let d = load(concat!(
            r#"{"id":"a","instruction":"one","output":"1"}"#,
            "\n",
            r#"{"id":"b","instruction":"two","context":"c","output":"2","category":"open_qa"}"#,
            "\n",
            r#"{"instruction":"three","output":"3"}"#,
            "\n"
        ))
        .unwrap();
        let ids: Vec<_> = d.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "line-3"]);
        assert_eq!(d.samples[1].context.as_deref(), Some("c"));
    }

    #[test]
    fn missing_output_names_line() {
        let err = load("{\"id\":\"a\",\"instruction\":\"x\",\"output\":\"y\"}\n{\"id\":\"b\",\"instruction\":\"x\"}\n")
            .unwrap_err();
        match err {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = load("{\"id\":\"q1\",\"instruction\":\"x\",\"output\":\"y\"}\n{\"id\":\"q1\",\"instruction\":\"z\",\"output\":\"w\"}\n")
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateId { ref id, .. } if id == "q1"));
    }

    #[test]
    fn empty_file_rejected() {
        assert!(matches!(load("\n\n"), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn digest_stable_across_reloads() {
        let text = "{\"id\":\"a\",\"instruction\":\"x\",\"output\":\"y\"}\n";
        assert_eq!(load(text).unwrap().provenance, load(text).unwrap().provenance);
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_similarity("the cat sat", "the cat sat"), 1.0);
        assert_eq!(jaccard_similarity("a b", "c d"), 0.0);
        assert_eq!(jaccard_similarity("a b c", "b c d"), 0.5);
        assert_eq!(jaccard_similarity("", "  "), 1.0);
    }

    fn numbered(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| sample(&format!("s{i}"), &format!("question w{i}a w{i}b"), &format!("answer v{i}a v{i}b")))
            .collect();
        Dataset::from_samples("n", samples).unwrap()
    }

    #[test]
    fn cap_leaves_small_datasets_alone() {
        let d = numbered(100);
        let capped = d.cap_sample(DEFAULT_CAP, 1).unwrap();
        assert_eq!(capped.samples, d.samples);
        assert_eq!(capped.seed_log.last().unwrap().seed, 1);
    }

    #[test]
    fn cap_is_seed_deterministic() {
        let d = numbered(10);
        let a = d.cap_sample(5, 7).unwrap();
        let b = d.cap_sample(5, 7).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.len(), 5);
        assert!(d.cap_sample(0, 7).is_err());
    }

    #[test]
    fn even_split_without_duplicates() {
        let split = iid_split(&numbered(10), 3, DEFAULT_DEDUP_THRESHOLD).unwrap();
        assert_eq!(split.victim.len(), 5);
        assert_eq!(split.holdout.len(), 5);
        assert!(split.removed.is_empty());
    }

    #[test]
    fn split_rejects_tiny_dataset() {
        assert!(iid_split(&numbered(1), 3, 0.8).is_err());
    }

    #[test]
    fn input_match_alone_is_not_a_duplicate() {
        // input Jaccard 0.9, output Jaccard 0.5
        let input_a = "a b c d e f g h i j";
        let input_b = "a b c d e f g h i j k";
        assert!((jaccard_similarity(input_a, input_b) - 10.0 / 11.0).abs() < 1e-12);
        let samples = vec![sample("p", input_a, "x y z"), sample("q", input_b, "x y w")];
        assert_eq!(jaccard_similarity("x y z", "x y w"), 0.5);
        let d = Dataset::from_samples("pair", samples).unwrap();
        for seed in 0..8 {
            let split = iid_split(&d, seed, 0.8).unwrap();
            assert!(split.removed.is_empty());
            assert_eq!(split.holdout.len(), 1);
        }
    }
}
