use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::backend::SynthBackend;
use super::world::{SynthWorld, WorldConfig};
use crate::audit::{AuditParams, Auditor};
use crate::baseline::{BaselineRun, DEFAULT_TRAIN_SIZE};
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::inference::Decision;
use crate::similarity::{build_metric, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub world: WorldConfig,
    pub metric: Metric,
    pub params: AuditParams,
    /// Also run the logprob classifier baseline on every suspect.
    pub baseline: bool,
    pub baseline_train_size: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            world: WorldConfig::default(),
            metric: Metric::TfidfCosine,
            params: AuditParams::default(),
            baseline: false,
            baseline_train_size: DEFAULT_TRAIN_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl Confusion {
    pub fn add(&mut self, truth: bool, predicted: Decision) {
        match (truth, predicted == Decision::Member) {
            (true, true) => self.true_positive += 1,
            (false, true) => self.false_positive += 1,
            (false, false) => self.true_negative += 1,
            (true, false) => self.false_negative += 1,
        }
    }

    fn ratio(num: usize, den: usize) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    /// Undefined without any actual member.
    pub fn recall(&self) -> Option<f64> {
        Self::ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    /// Undefined when nothing was predicted member.
    pub fn precision(&self) -> Option<f64> {
        Self::ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    pub fn f1(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        if p + r == 0.0 {
            Some(0.0)
        } else {
            Some(2.0 * p * r / (p + r))
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.true_positive + self.false_positive + self.true_negative + self.false_negative;
        Self::ratio(self.true_positive + self.true_negative, total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspectOutcome {
    pub suspect: String,
    pub member: bool,
    pub decision: Decision,
    pub positive: usize,
    pub negative: usize,
    pub abstained: usize,
    pub baseline: Option<Decision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub metric: String,
    pub params: AuditParams,
    pub retained: usize,
    pub tainted: usize,
    /// Selected samples that belong to the ground-truth taint subset.
    pub tainted_in_truth: usize,
    pub suspects: Vec<SuspectOutcome>,
    pub confusion: Confusion,
    pub baseline_confusion: Option<Confusion>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.4}"))
}

impl BenchmarkReport {
    /// Fixed-layout summary table; identical inputs give identical bytes.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "metric {}  delta_t {}  k {}  mu {}", self.metric, self.params.delta_t, self.params.k, self.params.mu);
        let _ = writeln!(
            s,
            "retained {}  tainted {}  tainted_in_truth {}",
            self.retained, self.tainted, self.tainted_in_truth
        );
        let _ = writeln!(s, "{:<24} {:>6} {:>10} {:>5} {:>5} {:>5} {:>10}", "suspect", "truth", "verdict", "pos", "neg", "abs", "baseline");
        for o in &self.suspects {
            let d = |d: Decision| if d == Decision::Member { "member" } else { "non_member" };
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>10} {:>5} {:>5} {:>5} {:>10}",
                o.suspect,
                if o.member { "member" } else { "non" },
                d(o.decision),
                o.positive,
                o.negative,
                o.abstained,
                o.baseline.map_or("-", d)
            );
        }
        let mut row = |label: &str, c: &Confusion| {
            let _ = writeln!(
                s,
                "{label}: tp {} fp {} tn {} fn {}  recall {}  precision {}  f1 {}  accuracy {}",
                c.true_positive,
                c.false_positive,
                c.true_negative,
                c.false_negative,
                fmt_opt(c.recall()),
                fmt_opt(c.precision()),
                fmt_opt(c.f1()),
                fmt_opt(c.accuracy())
            );
        };
        row("audit", &self.confusion);
        if let Some(b) = &self.baseline_confusion {
            row("baseline", b);
        }
        s
    }
}

/// Generate a world, audit every suspect against it and tabulate.
pub async fn run_synthetic_benchmark(config: &BenchmarkConfig) -> Result<(BenchmarkReport, SynthWorld)> {
    let world = SynthWorld::generate(config.world.clone())?;
    let backend = Arc::new(SynthBackend::new(world.profiles.clone(), world.datasets()));
    let gateway = Gateway::new(backend);
    let report = benchmark_world(&gateway, &world, config).await?;
    Ok((report, world))
}

/// Audit every suspect of `world` through `gateway`.
pub async fn benchmark_world(gateway: &Gateway, world: &SynthWorld, config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let metric = build_metric(config.metric, world.target.samples.iter().map(|s| s.oracle_output.as_str()), None);
    let auditor = Auditor::new(gateway, &world.target, &world.pairs, metric.as_ref(), config.params.clone())?;
    let offline = auditor.offline().await?;

    let mut suspects = Vec::new();
    let mut confusion = Confusion::default();
    let mut baseline_confusion = config.baseline.then(Confusion::default);
    for spec in &world.suspects {
        let online = auditor.online(&offline, &spec.endpoint).await?;
        let v = &online.verdict;
        confusion.add(spec.member, v.decision);
        let baseline = match baseline_confusion.as_mut() {
            Some(bc) => {
                let missing = |what: &str| Error::InvalidArgument(format!("world lacks {what} for {}", spec.endpoint.name));
                let run = BaselineRun {
                    gateway,
                    suspect: &spec.endpoint,
                    reference: world.logprob_reference(&spec.logprob_reference).ok_or_else(|| missing("logprob reference"))?,
                    target: &world.target,
                    member_pool: world.dataset(&spec.member_pool).ok_or_else(|| missing("member pool"))?,
                    nonmember_pool: &world.unseen,
                    train_size: config.baseline_train_size,
                    seed: config.world.seed,
                };
                let bv = run.run().await?;
                bc.add(spec.member, bv.decision);
                Some(bv.decision)
            }
            None => None,
        };
        suspects.push(SuspectOutcome {
            suspect: spec.endpoint.name.clone(),
            member: spec.member,
            decision: v.decision,
            positive: v.positive_count,
            negative: v.negative_count,
            abstained: v.abstained_count,
            baseline,
        });
    }
    Ok(BenchmarkReport {
        metric: metric.variant(),
        params: config.params.clone(),
        retained: offline.prefilter.retained.len(),
        tainted: offline.tainted.len(),
        tainted_in_truth: offline
            .tainted
            .ids()
            .iter()
            .filter(|id| world.taint_subset.contains(**id))
            .count(),
        suspects,
        confusion,
        baseline_confusion,
    })
}
