//! Word tokenization shared by the lexical metrics and deduplication.

use std::collections::BTreeSet;

use unicode_segmentation::UnicodeSegmentation;

/// Lowercased Unicode word tokens, in order, punctuation and whitespace dropped.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.unicode_words().map(str::to_lowercase).collect()
}

/// The set of lowercased word tokens in `text`.
pub fn token_set(text: &str) -> BTreeSet<String> {
    text.unicode_words().map(str::to_lowercase).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_punctuation_and_lowercases() {
        assert_eq!(word_tokens("The cat, sat."), vec!["the", "cat", "sat"]);
        assert!(word_tokens("  ... ").is_empty());
    }

    #[test]
    fn keeps_non_latin_words() {
        assert_eq!(word_tokens("Grüße, мир"), vec!["grüße", "мир"]);
    }
}
