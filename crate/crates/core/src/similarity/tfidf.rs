use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::word_tokens;

use super::{Metric, SimilarityScore, TextSimilarity};

/// Document frequencies over a reference corpus (the audited dataset's oracle
/// outputs).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: u64,
    pub df: BTreeMap<String, u64>,
}

impl CorpusStats {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut stats = CorpusStats::default();
        for text in texts {
            stats.documents += 1;
            let unique: BTreeSet<String> = word_tokens(text).into_iter().collect();
            for tok in unique {
                *stats.df.entry(tok).or_default() += 1;
            }
        }
        stats
    }

    /// Smoothed inverse document frequency, `ln((1 + N) / (1 + df)) + 1`.
    /// Tokens absent from the corpus get the largest weight.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0);
        ((1.0 + self.documents as f64) / (1.0 + df as f64)).ln() + 1.0
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    fn weights(&self, text: &str) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for tok in word_tokens(text) {
            *tf.entry(tok).or_default() += 1.0;
        }
        for (tok, w) in tf.iter_mut() {
            *w *= self.idf(tok);
        }
        tf
    }
}

/// Cosine of TF-IDF vectors (raw term counts times smoothed IDF).
pub fn tfidf_cosine(candidate: &str, reference: &str, stats: &CorpusStats) -> SimilarityScore {
    let a = stats.weights(candidate);
    let b = stats.weights(reference);
    if a.is_empty() && b.is_empty() {
        return SimilarityScore::new(1.0, Metric::TfidfCosine);
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(tok, wa)| b.get(tok).map(|wb| wa * wb))
        .sum();
    let norm = |v: &BTreeMap<String, f64>| v.values().map(|w| w * w).sum::<f64>().sqrt();
    let denom = norm(&a) * norm(&b);
    let value = if denom > 0.0 { dot / denom } else { 0.0 };
    SimilarityScore::new(value, Metric::TfidfCosine)
}

#[derive(Debug, Clone)]
pub struct TfidfCosine {
    stats: CorpusStats,
}

impl TfidfCosine {
    pub fn new(stats: CorpusStats) -> Self {
        TfidfCosine { stats }
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }
}

impl TextSimilarity for TfidfCosine {
    fn metric(&self) -> Metric {
        Metric::TfidfCosine
    }

    fn variant(&self) -> String {
        format!(
            "tfidf_cosine(raw tf, smoothed idf, {} documents)",
            self.stats.documents
        )
    }

    fn score(&self, candidate: &str, reference: &str) -> Result<SimilarityScore> {
        Ok(tfidf_cosine(candidate, reference, &self.stats))
    }
}
