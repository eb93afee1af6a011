use crate::error::Result;
use crate::tokenize::word_tokens;

use super::{Metric, SimilarityScore, TextSimilarity};

/// Length of the longest common subsequence of two token slices.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word-level LCS length divided by the longer token count. Both empty is 1.0.
pub fn lcs_ratio(candidate: &str, reference: &str) -> SimilarityScore {
    let a = word_tokens(candidate);
    let b = word_tokens(reference);
    let longest = a.len().max(b.len());
    let value = if longest == 0 {
        1.0
    } else {
        lcs_len(&a, &b) as f64 / longest as f64
    };
    SimilarityScore::new(value, Metric::LcsRatio)
}

/// Candidate tokens paired with whether they belong to one longest common
/// subsequence with the reference, for highlighting copied spans.
pub fn lcs_highlight(candidate: &str, reference: &str) -> Vec<(String, bool)> {
    let a = word_tokens(candidate);
    let b = word_tokens(reference);
    let (n, m) = (a.len(), b.len());
    let mut table = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i][j] = if a[i] == b[j] {
                table[i + 1][j + 1] + 1
            } else {
                table[i + 1][j].max(table[i][j + 1])
            };
        }
    }
    let mut marked = vec![false; n];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            marked[i] = true;
            i += 1;
            j += 1;
        } else if table[i + 1][j] >= table[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    a.into_iter().zip(marked).collect()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LcsRatio;

impl TextSimilarity for LcsRatio {
    fn metric(&self) -> Metric {
        Metric::LcsRatio
    }

    fn variant(&self) -> String {
        "lcs_ratio(word tokens, / max length)".into()
    }

    fn score(&self, candidate: &str, reference: &str) -> Result<SimilarityScore> {
        Ok(lcs_ratio(candidate, reference))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(lcs_ratio("a b c d e", "a b c d e").value, 1.0);
        assert_eq!(lcs_ratio("a b c d", "a x c y").value, 0.5);
        assert_eq!(lcs_ratio("", "a b").value, 0.0);
        assert_eq!(lcs_ratio("", "").value, 1.0);
    }

    #[test]
    fn lcs_len_classic() {
        let a: Vec<char> = "ABCBDAB".chars().collect();
        let b: Vec<char> = "BDCABA".chars().collect();
        assert_eq!(lcs_len(&a, &b), 4);
    }

    #[test]
    fn highlight_marks_an_lcs() {
        let h = lcs_highlight("the cat sat on a mat", "a cat sat on the mat");
        let marked: Vec<&str> = h.iter().filter(|(_, m)| *m).map(|(t, _)| t.as_str()).collect();
        assert_eq!(marked.len(), lcs_len(&word_tokens("the cat sat on a mat"), &word_tokens("a cat sat on the mat")));
        assert_eq!(marked, ["cat", "sat", "on", "mat"]);
    }
}
