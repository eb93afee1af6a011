//! `taintscope`: audit whether a black-box model was fine-tuned on a dataset.
//!
//! Exit codes: 0 success (non-member verdict for `infer`/`all`), 1 member
//! verdict, 2 configuration or usage error, 3 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use taintscope::audit::{AuditReport, Auditor, TimingReport};
use taintscope::baseline::BaselineRun;
use taintscope::config::{AuditConfig, BaselineSection, DatasetSection, EndpointSpec, Endpoints, EndpointsConfig, PairSpec, PathsSection, StudySection};
use taintscope::corpus::{iid_split, Dataset};
use taintscope::gateway::{Gateway, HttpBackend, ModelEndpoint};
use taintscope::inference::{Decision, PrefilterOutcome, TaintedSet};
use taintscope::similarity::{build_metric, Metric, SidecarEmbedder, TextSimilarity, TokenEmbedder};
use taintscope::simkit::{run_synthetic_benchmark, BenchmarkConfig, RoutingBackend, SynthBackend, SynthWorld, WorldConfig};
use taintscope::store::{Manifest, ResponseStore};
use taintscope::studies::{self, LabeledTainted, RobustnessVariant};
use taintscope::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Phase {
    Validate,
    Split,
    Collect,
    Tainted,
    Infer,
    Baseline,
    Study,
    Simulate,
    Report,
    All,
}

#[derive(Parser, Debug)]
#[command(name = "taintscope", version, about = "Black-box dataset inference for instruction-tuned models")]
struct Args {
    /// Audit configuration (TOML). Not needed for `simulate`.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "all")]
    phase: Phase,

    /// Seed for splitting, the baseline and synthetic worlds.
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,

    #[arg(long = "delta-t")]
    delta_t: Option<f64>,

    #[arg(long = "delta-s")]
    delta_s: Option<f64>,

    /// Minimum response size in bytes.
    #[arg(long)]
    mu: Option<usize>,

    /// Suspect responses per tainted sample.
    #[arg(long)]
    k: Option<u32>,

    /// Output directory (overrides `paths.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Suspect endpoint name (overrides `suspect`).
    #[arg(long)]
    suspect: Option<String>,

    /// Answer from the response cache only; misses are errors.
    #[arg(long)]
    cache_only: bool,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse()
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_configuration() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_file(path, text + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Outcome<T> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Selected samples plus the pre-filter outcome, as written by `tainted`.
#[derive(Serialize, Deserialize)]
struct TaintedFile {
    prefilter: PrefilterOutcome,
    tainted: TaintedSet,
}

struct Context {
    cfg: AuditConfig,
    endpoints: Endpoints,
    config_digest: String,
    dataset: Dataset,
    metric: Box<dyn TextSimilarity>,
    gateway: Gateway,
    out: PathBuf,
    seed: u64,
}

impl Context {
    fn load(args: &Args) -> Outcome<Context> {
        let path = args.config.as_ref().ok_or_else(|| usage("--config is required for this phase"))?;
        let mut cfg = AuditConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?;
        let t = &mut cfg.thresholds;
        if let Some(v) = args.delta_t {
            t.delta_t = v;
        }
        if args.delta_s.is_some() {
            t.delta_s = args.delta_s;
        }
        if let Some(v) = args.mu {
            t.mu = v;
        }
        if let Some(v) = args.k {
            t.k = v;
        }
        if let Some(m) = args.metric {
            cfg.similarity.metric = m;
        }
        if let Some(s) = &args.suspect {
            cfg.suspect = Some(s.clone());
        }
        if let Some(seed) = args.seed {
            cfg.split.seed = seed;
            if let Some(b) = cfg.baseline.as_mut() {
                b.seed = seed;
            }
        }
        if let Some(out) = &args.out {
            cfg.paths.out_dir = out.clone();
        }
        cfg.validate()?;

        let endpoints_cfg = EndpointsConfig::load(&cfg.paths.endpoints)?;
        let endpoints = endpoints_cfg.resolve()?;
        if endpoints.pairs.is_empty() {
            return Err(usage("configuration error in `pair`: at least one reference pair is required"));
        }
        let config_digest = cfg.digest(&endpoints_cfg);

        let name = cfg.dataset.name.clone().unwrap_or_else(|| {
            cfg.dataset
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        });
        let mut dataset = Dataset::load_jsonl(&cfg.dataset.path)?.cap_sample(cfg.dataset.cap, cfg.dataset.cap_seed)?;
        dataset.name = name;

        let synth = match &cfg.paths.synthetic_world {
            Some(p) => {
                let world = SynthWorld::load(p)?;
                Some(Arc::new(SynthBackend::new(world.profiles.clone(), world.datasets())))
            }
            None => None,
        };
        if synth.is_none() {
            if let Some(e) = endpoints.by_name.values().find(|e| e.is_synthetic()) {
                return Err(usage(format!(
                    "configuration error in `endpoint.{}.base_url`: synthetic endpoints need paths.synthetic_world",
                    e.name
                )));
            }
        }
        let store = Arc::new(ResponseStore::open(&cfg.paths.cache_dir)?);
        let gateway = Gateway::new(Arc::new(RoutingBackend::new(HttpBackend::default(), synth)))
            .with_store(store)
            .cache_only(args.cache_only);

        let embedder: Option<Arc<dyn TokenEmbedder>> = match (&cfg.similarity.metric, &cfg.similarity.sidecar_url) {
            (Metric::GreedyEmbedF1, Some(url)) => Some(Arc::new(SidecarEmbedder::connect(url.clone())?)),
            _ => None,
        };
        let metric = build_metric(
            cfg.similarity.metric,
            dataset.samples.iter().map(|s| s.oracle_output.as_str()),
            embedder,
        );
        Ok(Context {
            out: cfg.paths.out_dir.clone(),
            seed: cfg.split.seed,
            cfg,
            endpoints,
            config_digest,
            dataset,
            metric,
            gateway,
        })
    }

    fn auditor(&self) -> Outcome<Auditor<'_>> {
        Ok(Auditor::new(
            &self.gateway,
            &self.dataset,
            &self.endpoints.pairs,
            self.metric.as_ref(),
            self.cfg.params(),
        )?)
    }

    fn suspect(&self) -> Outcome<&ModelEndpoint> {
        let name = self
            .cfg
            .suspect
            .as_deref()
            .ok_or_else(|| usage("no suspect endpoint: set `suspect` in the config or pass --suspect"))?;
        Ok(self.endpoints.get(name, "suspect")?)
    }

    fn write_manifest(&self) -> Outcome {
        if let Some(store) = self.gateway.store() {
            let mut seeds = BTreeMap::new();
            seeds.insert("split".to_string(), self.cfg.split.seed);
            seeds.insert("cap".to_string(), self.cfg.dataset.cap_seed);
            store.write_manifest(&Manifest {
                dataset_digest: self.dataset.content_digest(),
                config_digest: self.config_digest.clone(),
                seeds,
            })?;
        }
        Ok(())
    }
}

fn validate(ctx: &Context) -> Outcome {
    ctx.auditor()?;
    if let Some(s) = &ctx.cfg.suspect {
        ctx.endpoints.get(s, "suspect")?;
    }
    if let Some(b) = &ctx.cfg.baseline {
        let r = ctx.endpoints.get(&b.reference, "baseline.reference")?;
        if !r.supports_logprobs {
            return Err(usage(format!(
                "configuration error in `baseline.reference`: endpoint {} does not declare supports_logprobs",
                r.name
            )));
        }
    }
    if let Some(r) = &ctx.cfg.study.rephraser {
        ctx.endpoints.get(r, "study.rephraser")?;
    }
    println!(
        "ok: {} samples, {} reference pair(s), metric {}, config digest {}",
        ctx.dataset.len(),
        ctx.endpoints.pairs.len(),
        ctx.metric.variant(),
        ctx.config_digest
    );
    Ok(())
}

fn split(ctx: &Context) -> Outcome {
    let s = iid_split(&ctx.dataset, ctx.seed, ctx.cfg.split.dedup_threshold)?;
    s.victim.write_jsonl(ctx.out.join("victim.jsonl"))?;
    s.holdout.write_jsonl(ctx.out.join("holdout.jsonl"))?;
    write_json(
        &ctx.out.join("split.json"),
        &serde_json::json!({
            "seed": ctx.seed,
            "dedup_threshold": ctx.cfg.split.dedup_threshold,
            "victim": s.victim.len(),
            "holdout": s.holdout.len(),
            "removed": s.removed,
        }),
    )?;
    println!(
        "split: {} victim, {} held out, {} removed as duplicates",
        s.victim.len(),
        s.holdout.len(),
        s.removed.len()
    );
    Ok(())
}

async fn collect(ctx: &Context) -> Outcome {
    let before = ctx.gateway.requests_issued();
    let (refs, failures) = ctx.auditor()?.collect_references().await?;
    ctx.write_manifest()?;
    println!(
        "collect: {} samples with complete reference responses, {} failed request(s), {} request(s) issued",
        refs.len(),
        failures.len(),
        ctx.gateway.requests_issued() - before
    );
    Ok(())
}

async fn tainted(ctx: &Context) -> Outcome<TaintedFile> {
    let offline = ctx.auditor()?.offline().await?;
    let file = TaintedFile {
        prefilter: offline.prefilter,
        tainted: offline.tainted,
    };
    write_json(&ctx.out.join("tainted.json"), &file)?;
    println!(
        "tainted: {} of {} retained samples selected (delta_t = {})",
        file.tainted.len(),
        file.tainted.retained,
        file.tainted.delta_t
    );
    Ok(file)
}

async fn infer(ctx: &Context) -> Outcome<Decision> {
    let suspect = ctx.suspect()?;
    let auditor = ctx.auditor()?;
    let started = Instant::now();
    let offline = auditor.offline().await?;
    let online = auditor.online(&offline, suspect).await?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    ctx.write_manifest()?;

    let mut report = AuditReport::new(&auditor, &offline, &online);
    report.digests.config = Some(ctx.config_digest.clone());
    report.digests.cache_state = match ctx.gateway.store() {
        Some(s) => Some(s.state_digest()?),
        None => None,
    };
    let timing = TimingReport::from_phases(&offline, &online);
    tracing::debug!(wall_ms, partitioned_ms = timing.total_ms, "audit timing");
    write_file(&ctx.out.join("report.json"), report.to_json()?)?;
    write_json(&ctx.out.join("timings.json"), &timing)?;
    let text = report.render_text();
    write_file(&ctx.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(report.decision)
}

async fn baseline(ctx: &Context) -> Outcome {
    let b: &BaselineSection = ctx
        .cfg
        .baseline
        .as_ref()
        .ok_or_else(|| usage("configuration error in `baseline`: section missing"))?;
    let run = BaselineRun {
        gateway: &ctx.gateway,
        suspect: ctx.suspect()?,
        reference: ctx.endpoints.get(&b.reference, "baseline.reference")?,
        target: &ctx.dataset,
        member_pool: &Dataset::load_jsonl(&b.member_pool)?,
        nonmember_pool: &Dataset::load_jsonl(&b.nonmember_pool)?,
        train_size: b.train_size,
        seed: b.seed,
    };
    let verdict = run.run().await?;
    write_json(&ctx.out.join("baseline.json"), &verdict)?;
    println!(
        "baseline: {:?} ({} predicted member, {} predicted non-member; training accuracy {:.3})",
        verdict.decision, verdict.predicted_member, verdict.predicted_nonmember, verdict.training.training_accuracy
    );
    Ok(())
}

async fn study(ctx: &Context) -> Outcome {
    let auditor = ctx.auditor()?;
    let study: &StudySection = &ctx.cfg.study;
    let dir = ctx.out.join("study");

    let pair = &ctx.endpoints.pairs[0];
    let mut census = Vec::new();
    for model in [&pair.raw, &pair.tuned] {
        census.push(
            studies::tainted_census(&ctx.gateway, &ctx.dataset, model, ctx.metric.as_ref(), study.census_threshold)
                .await?,
        );
    }
    write_json(&dir.join("census.json"), &census)?;
    write_file(&dir.join("census.csv"), studies::census_csv(&census.iter().collect::<Vec<_>>())?)?;
    println!(
        "census: {} {}/{} before, {} {}/{} after",
        census[0].model,
        census[0].tainted(),
        census[0].total(),
        census[1].model,
        census[1].tainted(),
        census[1].total()
    );

    let offline = auditor.offline().await?;
    if let Some(other) = &study.compare_with {
        let theirs: TaintedFile = read_json(&other.join("tainted.json"))?;
        let overlap = studies::tainted_overlap(
            LabeledTainted { set: &offline.tainted, evidence: None },
            LabeledTainted { set: &theirs.tainted, evidence: None },
        )?;
        println!("overlap: {} shared tainted sample(s)", overlap.shared.len());
        write_json(&dir.join("overlap.json"), &overlap)?;
    }

    if ctx.cfg.suspect.is_some() {
        let suspect = ctx.suspect()?;
        let mut points = studies::robustness_run(
            &auditor,
            &offline,
            suspect,
            &RobustnessVariant::TemperatureSweep {
                temperatures: study.temperatures.clone(),
            },
        )
        .await?;
        if let Some(name) = &study.rephraser {
            let rephraser = ctx.endpoints.get(name, "study.rephraser")?.clone();
            match studies::robustness_run(&auditor, &offline, suspect, &RobustnessVariant::Rephrase { rephraser }).await {
                Ok(p) => points.extend(p),
                Err(e) => eprintln!("warning: rephrase variant failed: {e}"),
            }
        }
        for p in &points {
            println!("robustness: {} -> {:?}", p.label, p.verdict.decision);
        }
        write_json(&dir.join("robustness.json"), &points)?;
        write_file(&dir.join("robustness.csv"), studies::robustness_csv(&points)?)?;
    }
    Ok(())
}

fn report(ctx_out: &Path) -> Outcome {
    let report: AuditReport = read_json(&ctx_out.join("report.json"))?;
    let text = report.render_text();
    write_file(&ctx_out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Write a synthetic world and a matching configuration into `out`, then
/// benchmark every suspect in it.
async fn simulate(args: &Args) -> Outcome {
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
    let mut world_cfg = WorldConfig::default();
    if let Some(seed) = args.seed {
        world_cfg.seed = seed;
    }
    let mut bench = BenchmarkConfig {
        world: world_cfg,
        ..Default::default()
    };
    if let Some(m) = args.metric {
        bench.metric = m;
    }
    if let Some(v) = args.delta_t {
        bench.params.delta_t = v;
    }
    bench.params.delta_s = args.delta_s;
    if let Some(v) = args.mu {
        bench.params.mu = v;
    }
    if let Some(v) = args.k {
        bench.params.k = v;
    }
    bench.params.validate()?;

    let (report, world) = run_synthetic_benchmark(&bench).await?;
    std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    world.save(out.join("world.json"))?;
    for d in world.datasets() {
        d.write_jsonl(out.join(format!("{}.jsonl", d.name)))?;
    }
    let endpoints = EndpointsConfig {
        endpoints: world.endpoints().into_iter().map(EndpointSpec::from).collect(),
        pairs: world
            .pairs
            .iter()
            .map(|p| PairSpec {
                architecture: p.architecture.clone(),
                raw: p.raw.name.clone(),
                tuned: p.tuned.name.clone(),
            })
            .collect(),
    };
    write_file(&out.join("endpoints.toml"), endpoints.to_toml()?)?;

    let member = world.suspects.iter().find(|s| s.member).or(world.suspects.first());
    let cfg = AuditConfig {
        dataset: DatasetSection {
            path: format!("{}.jsonl", world.target.name).into(),
            name: Some(world.target.name.clone()),
            cap: taintscope::corpus::DEFAULT_CAP,
            cap_seed: 0,
        },
        split: Default::default(),
        paths: PathsSection {
            endpoints: "endpoints.toml".into(),
            cache_dir: "cache".into(),
            out_dir: "out".into(),
            synthetic_world: Some("world.json".into()),
        },
        thresholds: taintscope::config::ThresholdSection {
            mu: bench.params.mu,
            delta_t: bench.params.delta_t,
            delta_s: bench.params.delta_s,
            k: bench.params.k,
            selection: bench.params.selection,
        },
        similarity: taintscope::config::SimilaritySection {
            metric: bench.metric,
            sidecar_url: None,
        },
        suspect: member.map(|s| s.endpoint.name.clone()),
        baseline: member.map(|s| BaselineSection {
            reference: s.logprob_reference.clone(),
            member_pool: format!("{}.jsonl", s.member_pool).into(),
            nonmember_pool: format!("{}.jsonl", world.unseen.name).into(),
            train_size: taintscope::baseline::DEFAULT_TRAIN_SIZE,
            seed: world.config.seed,
        }),
        base_dir: None,
        study: StudySection {
            rephraser: Some(world.rephraser.name.clone()),
            ..Default::default()
        },
    };
    let toml = toml::to_string(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_file(&out.join("audit.toml"), toml)?;
    let table = report.table();
    write_file(&out.join("benchmark.txt"), &table)?;
    print!("{table}");
    println!("wrote {}", out.join("audit.toml").display());
    Ok(())
}

async fn run(args: Args) -> Outcome<ExitCode> {
    match args.phase {
        Phase::Simulate => {
            simulate(&args).await?;
            return Ok(ExitCode::SUCCESS);
        }
        Phase::Report if args.config.is_none() => {
            let out = args.out.clone().ok_or_else(|| usage("--phase report needs --config or --out"))?;
            report(&out)?;
            return Ok(ExitCode::SUCCESS);
        }
        _ => {}
    }
    let ctx = Context::load(&args)?;
    let verdict_code = |d: Decision| match d {
        Decision::Member => ExitCode::from(1),
        Decision::NonMember => ExitCode::SUCCESS,
    };
    match args.phase {
        Phase::Validate => validate(&ctx)?,
        Phase::Split => split(&ctx)?,
        Phase::Collect => collect(&ctx).await?,
        Phase::Tainted => {
            tainted(&ctx).await?;
        }
        Phase::Infer => return Ok(verdict_code(infer(&ctx).await?)),
        Phase::Baseline => baseline(&ctx).await?,
        Phase::Study => study(&ctx).await?,
        Phase::Report => report(&ctx.out)?,
        Phase::All => {
            validate(&ctx)?;
            collect(&ctx).await?;
            tainted(&ctx).await?;
            let decision = infer(&ctx).await?;
            if ctx.cfg.baseline.is_some() {
                baseline(&ctx).await?;
            }
            return Ok(verdict_code(decision));
        }
        Phase::Simulate => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(args).await {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
