use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{derived_rng, ProfileKind, SynthProfile};
use crate::corpus::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::gateway::{ModelEndpoint, ReferencePair, Role};

pub const CATEGORIES: [&str; 8] = [
    "open_qa",
    "closed_qa",
    "general_qa",
    "classification",
    "information_extraction",
    "summarization",
    "brainstorming",
    "creative_writing",
];

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

fn vocabulary(seed: u64, size: usize) -> Vec<String> {
    let mut rng = derived_rng(&("vocabulary", seed));
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .flat_map(|_| {
                [
                    CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char,
                    VOWELS[rng.random_range(0..VOWELS.len())] as char,
                ]
            })
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// `size` random instruction records with ids `{prefix}-{i}`. Every prompt
/// carries its id, so prompts identify samples.
pub fn generate_dataset(name: &str, prefix: &str, size: usize, seed: u64) -> Result<Dataset> {
    let vocab = vocabulary(seed, 3000);
    let mut rng = derived_rng(&("dataset", prefix, seed));
    let phrase = |rng: &mut rand_chacha::ChaCha8Rng, lo: usize, hi: usize| -> String {
        let n = rng.random_range(lo..=hi);
        (0..n)
            .map(|_| vocab[rng.random_range(0..vocab.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let samples = (0..size)
        .map(|i| {
            let id = format!("{prefix}-{i}");
            let context = rng.random_bool(0.3).then(|| phrase(&mut rng, 8, 16));
            let instruction = format!("Task {id}: {}?", phrase(&mut rng, 5, 9));
            Sample {
                id,
                instruction,
                context,
                oracle_output: phrase(&mut rng, 20, 36),
                category: Some(CATEGORIES[rng.random_range(0..CATEGORIES.len())].to_string()),
            }
        })
        .collect();
    Dataset::from_samples(name, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub dataset_size: usize,
    /// Samples memorized by every tuned reference and every member suspect.
    pub taint_size: usize,
    pub n_pairs: usize,
    pub n_member_suspects: usize,
    pub n_nonmember_suspects: usize,
    pub reference_fidelity: f64,
    /// Member suspect fidelities are spread evenly over this range.
    pub member_fidelity: (f64, f64),
    /// Share of the remaining samples each memorizing profile also picks up
    /// at random.
    pub extra_taint_fraction: f64,
    /// Size of the auxiliary and unseen datasets used by the baseline.
    pub pool_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            dataset_size: 1000,
            taint_size: 200,
            n_pairs: 5,
            n_member_suspects: 10,
            n_nonmember_suspects: 10,
            reference_fidelity: 0.9,
            member_fidelity: (0.9, 1.0),
            extra_taint_fraction: 0.05,
            pool_size: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspectSpec {
    pub endpoint: ModelEndpoint,
    /// Ground truth: trained on the target dataset.
    pub member: bool,
    /// Endpoint whose logprobs score this suspect's responses in the baseline.
    pub logprob_reference: String,
    /// Dataset the suspect was trained on, as used by the baseline.
    pub member_pool: String,
}

/// A complete synthetic audit setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub target: Dataset,
    /// Dataset non-member suspects were trained on.
    pub auxiliary: Dataset,
    /// Dataset no model has seen.
    pub unseen: Dataset,
    pub profiles: BTreeMap<String, SynthProfile>,
    pub pairs: Vec<ReferencePair>,
    pub suspects: Vec<SuspectSpec>,
    pub logprob_references: Vec<ModelEndpoint>,
    pub rephraser: ModelEndpoint,
    /// Ground-truth shared taint subset of the target.
    pub taint_subset: BTreeSet<String>,
}

fn synthetic_endpoint(name: &str, role: Role) -> ModelEndpoint {
    ModelEndpoint::new(name, role, format!("synthetic:{name}"), name)
}

fn pick(rng: &mut rand_chacha::ChaCha8Rng, ids: &[&str], n: usize) -> BTreeSet<String> {
    index::sample(rng, ids.len(), n.min(ids.len()))
        .into_iter()
        .map(|i| ids[i].to_string())
        .collect()
}

impl SynthWorld {
    pub fn generate(config: WorldConfig) -> Result<SynthWorld> {
        if config.taint_size > config.dataset_size {
            return Err(Error::config("taint_size", "exceeds dataset_size"));
        }
        if config.n_pairs == 0 {
            return Err(Error::config("n_pairs", "at least one reference pair is required"));
        }
        if config.n_member_suspects + config.n_nonmember_suspects == 0 {
            return Err(Error::config("n_member_suspects", "the world needs at least one suspect"));
        }
        let seed = config.seed;
        let target = generate_dataset("synthetic-target", "t", config.dataset_size, seed)?;
        let auxiliary = generate_dataset("synthetic-auxiliary", "a", config.pool_size, seed)?;
        let unseen = generate_dataset("synthetic-unseen", "u", config.pool_size, seed)?;

        let mut rng = derived_rng(&("world", seed));
        let target_ids: Vec<&str> = target.samples.iter().map(|s| s.id.as_str()).collect();
        let taint = pick(&mut rng, &target_ids, config.taint_size);
        let rest: Vec<&str> = target_ids.iter().copied().filter(|id| !taint.contains(*id)).collect();
        let n_extra = (config.extra_taint_fraction * rest.len() as f64).round() as usize;

        let mut profiles = BTreeMap::new();
        let mut tag = 0;
        let mut add = |profiles: &mut BTreeMap<String, SynthProfile>, name: String, kind, subset, fidelity| {
            let mut p = SynthProfile::new(name.clone(), kind, tag, seed.wrapping_add(tag as u64));
            p.taint_subset = subset;
            p.copy_fidelity = fidelity;
            tag += 1;
            profiles.insert(name, p);
        };

        let mut pairs = Vec::new();
        for i in 0..config.n_pairs {
            let arch = format!("arch{i}");
            let raw = format!("ref-raw-{i}");
            let tuned = format!("ref-tuned-{i}");
            add(&mut profiles, raw.clone(), ProfileKind::ReferenceRawLike, BTreeSet::new(), 1.0);
            let mut subset = taint.clone();
            subset.extend(pick(&mut rng, &rest, n_extra));
            add(&mut profiles, tuned.clone(), ProfileKind::ReferenceTunedLike, subset, config.reference_fidelity);
            pairs.push(ReferencePair {
                index: i,
                architecture: arch,
                raw: synthetic_endpoint(&raw, Role::ReferenceRaw),
                tuned: synthetic_endpoint(&tuned, Role::ReferenceTuned),
            });
        }

        let aux_ids: Vec<&str> = auxiliary.samples.iter().map(|s| s.id.as_str()).collect();
        let aux_taint = pick(&mut rng, &aux_ids, config.taint_size * config.pool_size / config.dataset_size.max(1));
        let mut logprob_references = Vec::new();
        for (name, subset) in [("logprob-ref-target", taint.clone()), ("logprob-ref-auxiliary", aux_taint)] {
            add(&mut profiles, name.into(), ProfileKind::ReferenceTunedLike, subset, config.reference_fidelity);
            let mut e = synthetic_endpoint(name, Role::ReferenceTuned);
            e.supports_logprobs = true;
            logprob_references.push(e);
        }

        let mut suspects = Vec::new();
        let (lo, hi) = config.member_fidelity;
        for i in 0..config.n_member_suspects {
            let name = format!("suspect-member-{i}");
            let mut subset = taint.clone();
            subset.extend(pick(&mut rng, &rest, n_extra));
            let frac = if config.n_member_suspects > 1 {
                i as f64 / (config.n_member_suspects - 1) as f64
            } else {
                1.0
            };
            add(&mut profiles, name.clone(), ProfileKind::MemberLike, subset, lo + (hi - lo) * frac);
            suspects.push(SuspectSpec {
                endpoint: synthetic_endpoint(&name, Role::Suspect),
                member: true,
                logprob_reference: "logprob-ref-target".into(),
                member_pool: target.name.clone(),
            });
        }
        for i in 0..config.n_nonmember_suspects {
            let name = format!("suspect-nonmember-{i}");
            add(&mut profiles, name.clone(), ProfileKind::NonmemberLike, BTreeSet::new(), 1.0);
            suspects.push(SuspectSpec {
                endpoint: synthetic_endpoint(&name, Role::Suspect),
                member: false,
                logprob_reference: "logprob-ref-auxiliary".into(),
                member_pool: auxiliary.name.clone(),
            });
        }
        add(&mut profiles, "rephraser".into(), ProfileKind::ShuffleRephraser, BTreeSet::new(), 1.0);
        let mut rephraser = synthetic_endpoint("rephraser", Role::Rephraser);
        rephraser.decoding.temperature = Some(0.0);

        Ok(SynthWorld {
            config,
            target,
            auxiliary,
            unseen,
            profiles,
            pairs,
            suspects,
            logprob_references,
            rephraser,
            taint_subset: taint,
        })
    }

    pub fn datasets(&self) -> [&Dataset; 3] {
        [&self.target, &self.auxiliary, &self.unseen]
    }

    pub fn dataset(&self, name: &str) -> Option<&Dataset> {
        self.datasets().into_iter().find(|d| d.name == name)
    }

    pub fn suspect(&self, name: &str) -> Option<&SuspectSpec> {
        self.suspects.iter().find(|s| s.endpoint.name == name)
    }

    pub fn logprob_reference(&self, name: &str) -> Option<&ModelEndpoint> {
        self.logprob_references.iter().find(|e| e.name == name)
    }

    /// Every endpoint in the world.
    pub fn endpoints(&self) -> Vec<&ModelEndpoint> {
        let mut out: Vec<&ModelEndpoint> = self.pairs.iter().flat_map(|p| [&p.raw, &p.tuned]).collect();
        out.extend(self.suspects.iter().map(|s| &s.endpoint));
        out.extend(self.logprob_references.iter());
        out.push(&self.rephraser);
        out
    }

    /// Point every endpoint at an HTTP server that routes on model id.
    pub fn retarget(&mut self, base_url: &str) {
        let set = |e: &mut ModelEndpoint| e.base_url = base_url.to_string();
        for p in &mut self.pairs {
            set(&mut p.raw);
            set(&mut p.tuned);
        }
        for s in &mut self.suspects {
            set(&mut s.endpoint);
        }
        for e in &mut self.logprob_references {
            set(e);
        }
        set(&mut self.rephraser);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SynthWorld> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}
