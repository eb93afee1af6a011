use std::sync::Arc;

use crate::error::{Error, Result};

use super::{Metric, SimilarityScore, TextSimilarity, TokenEmbedder, TokenVectors};

/// Precision, recall and F1 of a greedy token match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedy cosine matching over token vectors: precision averages, over
/// candidate tokens, the best clamped cosine to any reference token; recall
/// does the same from the reference side. No IDF weighting, no rescaling.
pub fn greedy_components(candidate: &TokenVectors, reference: &TokenVectors) -> Result<GreedyScore> {
    if candidate.vectors.is_empty() || reference.vectors.is_empty() {
        return Err(Error::Similarity(
            "greedy match needs at least one token on each side".into(),
        ));
    }
    let sims: Vec<Vec<f64>> = candidate
        .vectors
        .iter()
        .map(|c| {
            reference
                .vectors
                .iter()
                .map(|r| c.cosine(r).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    let precision = sims
        .iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / sims.len() as f64;
    let recall = (0..reference.vectors.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(0.0, f64::max))
        .sum::<f64>()
        / reference.vectors.len() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(GreedyScore {
        precision,
        recall,
        f1,
    })
}

/// BERTScore-style F1 between `candidate` and `reference` under `emb`.
pub fn greedy_match_score(
    candidate: &str,
    reference: &str,
    emb: &dyn TokenEmbedder,
) -> Result<SimilarityScore> {
    let vecs = emb.embed(&[candidate, reference])?;
    let score = greedy_components(&vecs[0], &vecs[1])?;
    Ok(SimilarityScore::new(score.f1, Metric::GreedyEmbedF1))
}

#[derive(Clone)]
pub struct GreedyMatch {
    embedder: Arc<dyn TokenEmbedder>,
}

impl GreedyMatch {
    pub fn new(embedder: Arc<dyn TokenEmbedder>) -> Self {
        GreedyMatch { embedder }
    }
}

impl TextSimilarity for GreedyMatch {
    fn metric(&self) -> Metric {
        Metric::GreedyEmbedF1
    }

    fn variant(&self) -> String {
        let info = self.embedder.info();
        format!(
            "greedy_embed_f1(F1, cosine clamped at 0, no idf, no rescaling; embedder {:?} {})",
            info.provider, info.model_version
        )
    }

    fn score(&self, candidate: &str, reference: &str) -> Result<SimilarityScore> {
        greedy_match_score(candidate, reference, self.embedder.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::super::MockOneHotEmbedder;
    use super::*;

    #[test]
    fn one_hot_examples() {
        let emb = MockOneHotEmbedder;
        assert_eq!(greedy_match_score("a b c", "a b c", &emb).unwrap().value, 1.0);
        assert_eq!(greedy_match_score("x y", "p q", &emb).unwrap().value, 0.0);
        let vecs = emb.embed(&["a b", "a"]).unwrap();
        let s = greedy_components(&vecs[0], &vecs[1]).unwrap();
        assert_eq!(s.precision, 0.5);
        assert_eq!(s.recall, 1.0);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_side_is_an_error() {
        assert!(greedy_match_score("", "a", &MockOneHotEmbedder).is_err());
        assert!(greedy_match_score("a", "...", &MockOneHotEmbedder).is_err());
    }
}
