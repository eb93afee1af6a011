//! Deterministic synthetic models and datasets.
//!
//! A [`SynthProfile`] describes how a simulated model answers: member-like
//! profiles reproduce the oracle output (with a fraction of tokens replaced
//! by noise) on their taint subset and emit pure noise elsewhere;
//! non-member-like profiles always emit noise. Noise tokens start with `q`
//! and carry a per-profile tag, while dataset words never contain `q`, so
//! noise never overlaps the dataset vocabulary or another profile's noise.
//!
//! Profiles are served in-process through [`SynthBackend`] or over HTTP by
//! [`StubServer`], with identical outputs.

mod backend;
mod benchmark;
mod server;
mod world;

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::digest::json_digest;
use crate::gateway::{DecodingParams, Origin, ResponseRecord};

pub use backend::{RoutingBackend, SynthBackend};
pub use benchmark::{benchmark_world, run_synthetic_benchmark, BenchmarkConfig, BenchmarkReport, Confusion, SuspectOutcome};
pub use server::{embed_stub_vector, RequestLog, StubOptions, StubServer};
pub use world::{generate_dataset, SuspectSpec, SynthWorld, WorldConfig, CATEGORIES};
pub use crate::studies::REPHRASE_PREFIX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    MemberLike,
    NonmemberLike,
    ReferenceRawLike,
    ReferenceTunedLike,
    /// Returns the text after [`REPHRASE_PREFIX`] with its words shuffled.
    ShuffleRephraser,
}

impl ProfileKind {
    fn copies_oracle(self) -> bool {
        matches!(self, ProfileKind::MemberLike | ProfileKind::ReferenceTunedLike)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub name: String,
    pub kind: ProfileKind,
    #[serde(default)]
    pub taint_subset: BTreeSet<String>,
    /// Fraction of oracle tokens preserved on the taint subset.
    pub copy_fidelity: f64,
    pub noise_vocab: Vec<String>,
    /// Token count of noise responses.
    #[serde(default = "default_noise_len")]
    pub noise_len: usize,
    /// Fidelity lost per unit of temperature: `p * (1 - drift * T)`.
    #[serde(default = "default_temperature_drift")]
    pub temperature_drift: f64,
    pub seed: u64,
}

fn default_noise_len() -> usize {
    16
}

fn default_temperature_drift() -> f64 {
    0.1
}

/// Noise tokens for profile number `tag`, disjoint across tags and from
/// every dataset word.
pub fn noise_vocab(tag: usize, size: usize) -> Vec<String> {
    (0..size).map(|j| format!("q{}x{j}", alpha_tag(tag))).collect()
}

fn alpha_tag(mut n: usize) -> String {
    let mut s = String::new();
    loop {
        s.insert(0, (b'a' + (n % 26) as u8) as char);
        n /= 26;
        if n == 0 {
            break s;
        }
    }
}

pub(crate) fn derived_rng<T: Serialize + ?Sized>(parts: &T) -> ChaCha8Rng {
    let digest = json_digest(parts);
    let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
    ChaCha8Rng::seed_from_u64(seed)
}

impl SynthProfile {
    pub fn new(name: impl Into<String>, kind: ProfileKind, tag: usize, seed: u64) -> Self {
        SynthProfile {
            name: name.into(),
            kind,
            taint_subset: BTreeSet::new(),
            copy_fidelity: 1.0,
            noise_vocab: noise_vocab(tag, 256),
            noise_len: default_noise_len(),
            temperature_drift: default_temperature_drift(),
            seed,
        }
    }

    fn effective_fidelity(&self, temperature: f64) -> f64 {
        (self.copy_fidelity * (1.0 - self.temperature_drift * temperature)).clamp(0.0, 1.0)
    }

    /// Greedy decoding ignores the attempt index.
    fn attempt_key(attempt: u32, temperature: f64) -> Option<u32> {
        (temperature > 0.0).then_some(attempt)
    }

    fn noise_token(&self, rng: &mut ChaCha8Rng) -> &str {
        &self.noise_vocab[rng.random_range(0..self.noise_vocab.len())]
    }

    /// Noise text for a prompt identified by `key`.
    pub fn noise_text(&self, key: &str, attempt: u32, temperature: f64) -> String {
        let mut rng = derived_rng(&("noise", self.seed, &self.name, key, Self::attempt_key(attempt, temperature)));
        (0..self.noise_len)
            .map(|_| self.noise_token(&mut rng).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The oracle output with the lowest-ranked `(1 - p)` share of its tokens
    /// replaced by noise. Replacement ranks and tokens do not depend on `p`,
    /// so lowering fidelity only ever replaces more tokens.
    pub fn perturbed_oracle(&self, s: &Sample, attempt: u32, temperature: f64) -> String {
        let tokens: Vec<&str> = s.oracle_output.split_whitespace().collect();
        let p = self.effective_fidelity(temperature);
        let replace = ((1.0 - p) * tokens.len() as f64).round() as usize;
        if replace == 0 {
            return s.oracle_output.clone();
        }
        let mut rng = derived_rng(&("copy", self.seed, &self.name, &s.id, Self::attempt_key(attempt, temperature)));
        let order = index::sample(&mut rng, tokens.len(), tokens.len()).into_vec();
        let fillers: Vec<String> = (0..tokens.len()).map(|_| self.noise_token(&mut rng).to_string()).collect();
        let mut out: Vec<&str> = tokens.clone();
        for &pos in order.iter().take(replace) {
            out[pos] = &fillers[pos];
        }
        out.join(" ")
    }

    /// Response text for sample `s`.
    pub fn respond_text(&self, s: &Sample, attempt: u32, temperature: f64) -> String {
        if self.kind.copies_oracle() && self.taint_subset.contains(&s.id) {
            self.perturbed_oracle(s, attempt, temperature)
        } else {
            self.noise_text(&s.id, attempt, temperature)
        }
    }

    /// Words of the rephrase payload in a deterministic shuffled order.
    pub fn rephrase(&self, prompt: &str) -> String {
        let payload = prompt.strip_prefix(REPHRASE_PREFIX).unwrap_or(prompt);
        let mut words: Vec<&str> = payload.split_whitespace().collect();
        let mut rng = derived_rng(&("rephrase", self.seed, payload));
        words.shuffle(&mut rng);
        words.join(" ")
    }

    /// Synthetic log-probability of each whitespace-delimited token of
    /// `continuation`. Tokens from the oracle output of a memorized sample
    /// are likely; everything else is not.
    pub fn token_logprobs(&self, s: Option<&Sample>, prompt_key: &str, continuation: &str) -> Vec<(String, f64)> {
        let known: BTreeSet<String> = match s {
            Some(s) if self.kind.copies_oracle() && self.taint_subset.contains(&s.id) => {
                crate::tokenize::token_set(&s.oracle_output)
            }
            _ => BTreeSet::new(),
        };
        let mut rng = derived_rng(&("logprob", self.seed, &self.name, prompt_key, continuation));
        continuation
            .split_inclusive(' ')
            .map(|tok| {
                let u: f64 = rng.random();
                let word = tok.trim().to_lowercase();
                let lp = if known.contains(&word) { -0.05 - 0.25 * u } else { -2.0 - 3.0 * u };
                (tok.to_string(), lp)
            })
            .collect()
    }
}

/// One synthetic response record.
pub fn synth_respond(profile: &SynthProfile, s: &Sample, attempt: u32, decoding: &DecodingParams) -> ResponseRecord {
    let text = profile.respond_text(s, attempt, decoding.temperature.unwrap_or(1.0));
    ResponseRecord::new(profile.name.clone(), s.id.clone(), attempt, text, decoding.clone(), Origin::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::jaccard_similarity;

    fn sample() -> Sample {
        Sample {
            id: "s1".into(),
            instruction: "Task 1: describe".into(),
            context: None,
            oracle_output: "bako rime tulo sena vika doru lemi panu gora hiba".into(),
            category: None,
        }
    }

    fn member(p: f64) -> SynthProfile {
        let mut prof = SynthProfile::new("m", ProfileKind::MemberLike, 0, 9);
        prof.taint_subset.insert("s1".into());
        prof.copy_fidelity = p;
        prof
    }

    #[test]
    fn full_fidelity_copies_oracle() {
        let r = synth_respond(&member(1.0), &sample(), 0, &DecodingParams::default().with_temperature(0.0));
        assert_eq!(r.text, sample().oracle_output);
        assert_eq!(r.origin, Origin::Synthetic);
    }

    #[test]
    fn deterministic_per_attempt() {
        let p = member(0.7);
        let d = DecodingParams::default().with_temperature(1.0);
        assert_eq!(synth_respond(&p, &sample(), 1, &d).text, synth_respond(&p, &sample(), 1, &d).text);
        let greedy = DecodingParams::default().with_temperature(0.0);
        assert_eq!(synth_respond(&p, &sample(), 0, &greedy).text, synth_respond(&p, &sample(), 2, &greedy).text);
    }

    #[test]
    fn nonmember_noise_is_disjoint_from_oracle() {
        let p = SynthProfile::new("n", ProfileKind::NonmemberLike, 1, 9);
        let r = synth_respond(&p, &sample(), 0, &DecodingParams::default());
        assert!(jaccard_similarity(&r.text, &sample().oracle_output) < 0.1);
        assert_eq!(r.text.split_whitespace().count(), 16);
    }

    #[test]
    fn lower_fidelity_replaces_a_superset() {
        let s = sample();
        let kept = |p: f64| -> BTreeSet<usize> {
            let text = member(p).perturbed_oracle(&s, 0, 0.0);
            text.split_whitespace()
                .zip(s.oracle_output.split_whitespace())
                .enumerate()
                .filter(|(_, (a, b))| a == b)
                .map(|(i, _)| i)
                .collect()
        };
        let mut prev = kept(1.0);
        for p in [0.9, 0.7, 0.5, 0.2, 0.0] {
            let cur = kept(p);
            assert!(cur.is_subset(&prev), "p={p}");
            prev = cur;
        }
        assert!(prev.is_empty());
    }

    #[test]
    fn rephraser_shuffles_words() {
        let p = SynthProfile::new("r", ProfileKind::ShuffleRephraser, 2, 0);
        let text = "one two three four five six";
        let out = p.rephrase(&format!("{REPHRASE_PREFIX}{text}"));
        let mut a: Vec<_> = out.split(' ').collect();
        let mut b: Vec<_> = text.split(' ').collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_vocabularies_are_disjoint() {
        let a: BTreeSet<_> = noise_vocab(0, 100).into_iter().collect();
        let b: BTreeSet<_> = noise_vocab(27, 100).into_iter().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(crate::tokenize::word_tokens(&a.iter().next().unwrap().clone()).len(), 1);
    }
}
