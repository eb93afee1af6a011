//! Log-probability membership baseline adapted to dataset inference.
//!
//! A reference model scores the suspect's response to each sample as a forced
//! continuation; summary statistics of those token log-probabilities feed a
//! logistic classifier trained on known member and non-member samples. The
//! dataset verdict is the majority of per-sample predictions on the target.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Sample};
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::gateway::{build_prompt, Gateway, ModelEndpoint, ResponseRecord};
use crate::inference::{decide, Decision};

/// Member and non-member samples drawn per class for training.
pub const DEFAULT_TRAIN_SIZE: usize = 1000;
pub const FEATURE_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobFeatures {
    pub sample_id: String,
    pub mean_logprob: f64,
    pub min_logprob: f64,
    pub sum_logprob: f64,
    pub perplexity: f64,
    pub token_count: usize,
}

impl LogprobFeatures {
    pub fn from_logprobs(sample_id: impl Into<String>, logprobs: &[f64]) -> Result<Self> {
        let sample_id = sample_id.into();
        if logprobs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sample {sample_id:?}: no tokens to score"
            )));
        }
        let sum: f64 = logprobs.iter().sum();
        let mean = sum / logprobs.len() as f64;
        Ok(LogprobFeatures {
            sample_id,
            mean_logprob: mean,
            min_logprob: logprobs.iter().copied().fold(f64::INFINITY, f64::min),
            sum_logprob: sum,
            perplexity: (-mean).exp(),
            token_count: logprobs.len(),
        })
    }

    pub fn vector(&self) -> [f64; FEATURE_DIM] {
        [
            self.mean_logprob,
            self.min_logprob,
            self.sum_logprob,
            self.perplexity,
            self.token_count as f64,
        ]
    }

    fn check_finite(&self) -> Result<()> {
        if self.vector().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "sample {:?} has a non-finite feature",
                self.sample_id
            )))
        }
    }
}

/// Features of the suspect's `response` scored as a continuation of `prompt`
/// under `reference`.
pub async fn extract_features(
    gateway: &Gateway,
    response: &ResponseRecord,
    reference: &ModelEndpoint,
    prompt: &str,
) -> Result<LogprobFeatures> {
    if response.text.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sample {:?}: empty suspect response",
            response.sample_id
        )));
    }
    let tokens = gateway.query_logprobs(reference, prompt, &response.text).await?;
    let lps: Vec<f64> = tokens.iter().map(|t| t.logprob).collect();
    LogprobFeatures::from_logprobs(response.sample_id.clone(), &lps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop once the largest gradient component falls below this.
    pub tolerance: f64,
    pub l2: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            learning_rate: 0.5,
            max_iterations: 10_000,
            tolerance: 1e-6,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub member_samples: usize,
    pub nonmember_samples: usize,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub training_accuracy: f64,
}

/// Logistic regression over standardized [`LogprobFeatures`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryClassifier {
    pub weights: [f64; FEATURE_DIM],
    pub bias: f64,
    pub feature_mean: [f64; FEATURE_DIM],
    pub feature_scale: [f64; FEATURE_DIM],
    pub meta: TrainingMeta,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl BinaryClassifier {
    fn standardize(&self, f: &LogprobFeatures) -> [f64; FEATURE_DIM] {
        let mut x = f.vector();
        for (i, v) in x.iter_mut().enumerate() {
            *v = (*v - self.feature_mean[i]) / self.feature_scale[i];
        }
        x
    }

    /// Probability that the sample was a training member.
    pub fn probability(&self, f: &LogprobFeatures) -> f64 {
        let x = self.standardize(f);
        sigmoid(self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }

    pub fn predict(&self, f: &LogprobFeatures) -> bool {
        self.probability(f) > 0.5
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Persisted<'a> {
            classifier: &'a BinaryClassifier,
            digest: String,
        }
        let path = path.as_ref();
        let bytes = serde_json::to_vec_pretty(&Persisted {
            classifier: self,
            digest: json_digest(self),
        })?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Persisted {
            classifier: BinaryClassifier,
            digest: String,
        }
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let p: Persisted = serde_json::from_slice(&bytes)?;
        if json_digest(&p.classifier) != p.digest {
            return Err(Error::DigestMismatch(format!("{}: classifier digest", path.display())));
        }
        Ok(p.classifier)
    }
}

/// Fit a logistic model by full-batch gradient descent. The seed drives the
/// initial weights, so identical inputs and seed give identical weights.
pub fn train_classifier(
    members: &[LogprobFeatures],
    nonmembers: &[LogprobFeatures],
    seed: u64,
    opts: TrainOptions,
) -> Result<BinaryClassifier> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::InvalidArgument(
            "classifier training needs member and non-member samples".into(),
        ));
    }
    for f in members.iter().chain(nonmembers) {
        f.check_finite()?;
    }
    let rows: Vec<([f64; FEATURE_DIM], f64)> = members
        .iter()
        .map(|f| (f.vector(), 1.0))
        .chain(nonmembers.iter().map(|f| (f.vector(), 0.0)))
        .collect();
    let n = rows.len() as f64;

    let mut mean = [0.0; FEATURE_DIM];
    for (x, _) in &rows {
        for i in 0..FEATURE_DIM {
            mean[i] += x[i] / n;
        }
    }
    let mut scale = [0.0; FEATURE_DIM];
    for (x, _) in &rows {
        for i in 0..FEATURE_DIM {
            scale[i] += (x[i] - mean[i]).powi(2) / n;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let xs: Vec<([f64; FEATURE_DIM], f64)> = rows
        .iter()
        .map(|(x, y)| {
            let mut z = *x;
            for i in 0..FEATURE_DIM {
                z[i] = (z[i] - mean[i]) / scale[i];
            }
            (z, *y)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = [0.0; FEATURE_DIM];
    for wi in w.iter_mut() {
        *wi = rng.random_range(-0.01..0.01);
    }
    let mut b = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut gw = [0.0; FEATURE_DIM];
        let mut gb = 0.0;
        for (x, y) in &xs {
            let p = sigmoid(b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>());
            let err = p - y;
            for i in 0..FEATURE_DIM {
                gw[i] += err * x[i] / n;
            }
            gb += err / n;
        }
        for i in 0..FEATURE_DIM {
            gw[i] += opts.l2 * w[i];
        }
        let largest = gw.iter().chain(std::iter::once(&gb)).fold(0.0f64, |m, g| m.max(g.abs()));
        if largest < opts.tolerance {
            converged = true;
            break;
        }
        for i in 0..FEATURE_DIM {
            w[i] -= opts.learning_rate * gw[i];
        }
        b -= opts.learning_rate * gb;
    }

    let mut clf = BinaryClassifier {
        weights: w,
        bias: b,
        feature_mean: mean,
        feature_scale: scale,
        meta: TrainingMeta {
            member_samples: members.len(),
            nonmember_samples: nonmembers.len(),
            seed,
            iterations,
            converged,
            training_accuracy: 0.0,
        },
    };
    let correct = members.iter().filter(|f| clf.predict(f)).count()
        + nonmembers.iter().filter(|f| !clf.predict(f)).count();
    clf.meta.training_accuracy = correct as f64 / n;
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineVerdict {
    pub predicted_member: usize,
    pub predicted_nonmember: usize,
    pub decision: Decision,
    pub training: TrainingMeta,
}

/// Member iff strictly more target samples are predicted member than not.
pub fn baseline_verdict(clf: &BinaryClassifier, features: &[LogprobFeatures]) -> BaselineVerdict {
    let predicted_member = features.iter().filter(|f| clf.predict(f)).count();
    let predicted_nonmember = features.len() - predicted_member;
    BaselineVerdict {
        predicted_member,
        predicted_nonmember,
        decision: decide(predicted_member, predicted_nonmember),
        training: clf.meta.clone(),
    }
}

/// `n` samples drawn uniformly without replacement (all of them if fewer).
pub fn draw_samples(d: &Dataset, n: usize, seed: u64) -> Vec<Sample> {
    if d.len() <= n {
        return d.samples.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, d.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| d.samples[i].clone()).collect()
}

/// Inputs for one baseline run against a suspect.
pub struct BaselineRun<'a> {
    pub gateway: &'a Gateway,
    pub suspect: &'a ModelEndpoint,
    /// Reference model fine-tuned on the member samples; must expose logprobs.
    pub reference: &'a ModelEndpoint,
    pub target: &'a Dataset,
    /// Pool of samples known to be in the suspect's training data.
    pub member_pool: &'a Dataset,
    /// Pool of samples known not to be.
    pub nonmember_pool: &'a Dataset,
    pub train_size: usize,
    pub seed: u64,
}

impl BaselineRun<'_> {
    async fn features_for(&self, samples: &[Sample]) -> Result<Vec<LogprobFeatures>> {
        let collection = self.gateway.collect_responses(self.suspect, samples, 1).await?;
        let by_id = collection.by_sample();
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let Some(resp) = by_id.get(s.id.as_str()).and_then(|v| v.first()) else {
                continue;
            };
            if resp.text.is_empty() {
                continue;
            }
            let prompt = build_prompt(s)?;
            out.push(extract_features(self.gateway, resp, self.reference, &prompt).await?);
        }
        Ok(out)
    }

    pub async fn run(&self) -> Result<BaselineVerdict> {
        let members = draw_samples(self.member_pool, self.train_size, self.seed);
        let nonmembers = draw_samples(self.nonmember_pool, self.train_size, self.seed.wrapping_add(1));
        let member_feats = self.features_for(&members).await?;
        let nonmember_feats = self.features_for(&nonmembers).await?;
        let clf = train_classifier(&member_feats, &nonmember_feats, self.seed, TrainOptions::default())?;
        let target_feats = self.features_for(&self.target.samples).await?;
        Ok(baseline_verdict(&clf, &target_feats))
    }
}
