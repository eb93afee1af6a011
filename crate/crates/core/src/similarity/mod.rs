//! Text similarity metrics: greedy embedding match (BERTScore-style F1),
//! TF-IDF cosine and word-level LCS ratio.

mod embed;
mod greedy;
mod lcs;
mod tfidf;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use embed::{EmbedderInfo, EmbedderProvider, MockOneHotEmbedder, SidecarEmbedder, TokenEmbedder, TokenVector, TokenVectors};
pub use greedy::{greedy_components, greedy_match_score, GreedyMatch, GreedyScore};
pub use lcs::{lcs_highlight, lcs_len, lcs_ratio, LcsRatio};
pub use tfidf::{tfidf_cosine, CorpusStats, TfidfCosine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    GreedyEmbedF1,
    TfidfCosine,
    LcsRatio,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::GreedyEmbedF1 => "greedy_embed_f1",
            Metric::TfidfCosine => "tfidf_cosine",
            Metric::LcsRatio => "lcs_ratio",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy_embed_f1" | "bertscore" => Ok(Metric::GreedyEmbedF1),
            "tfidf_cosine" | "tfidf" => Ok(Metric::TfidfCosine),
            "lcs_ratio" | "lcs" => Ok(Metric::LcsRatio),
            other => Err(format!(
                "unknown metric {other:?} (expected greedy_embed_f1, tfidf_cosine or lcs_ratio)"
            )),
        }
    }
}

/// A score in `[0, 1]` tagged with the metric that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    pub metric: Metric,
}

impl SimilarityScore {
    pub(crate) fn new(value: f64, metric: Metric) -> Self {
        let value = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) };
        SimilarityScore { value, metric }
    }
}

/// A similarity metric usable by the decision procedure.
pub trait TextSimilarity: Send + Sync {
    fn metric(&self) -> Metric;

    /// Human-readable description of the exact variant, recorded in reports.
    fn variant(&self) -> String;

    fn score(&self, candidate: &str, reference: &str) -> Result<SimilarityScore>;
}

/// Instantiate `metric`. TF-IDF statistics come from `corpus` (normally the
/// dataset's oracle outputs); the greedy match falls back to one-hot token
/// vectors when no embedder is given.
pub fn build_metric<'a>(
    metric: Metric,
    corpus: impl IntoIterator<Item = &'a str>,
    embedder: Option<std::sync::Arc<dyn TokenEmbedder>>,
) -> Box<dyn TextSimilarity> {
    match metric {
        Metric::GreedyEmbedF1 => Box::new(GreedyMatch::new(
            embedder.unwrap_or_else(|| std::sync::Arc::new(MockOneHotEmbedder)),
        )),
        Metric::TfidfCosine => Box::new(TfidfCosine::new(CorpusStats::from_texts(corpus))),
        Metric::LcsRatio => Box::new(LcsRatio),
    }
}
