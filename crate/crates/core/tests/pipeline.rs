mod common;

use std::sync::Arc;

use taintscope::audit::{AuditParams, Auditor, TimingReport};
use taintscope::error::Error;
use taintscope::gateway::Gateway;
use taintscope::inference::{Decision, SelectionMode};
use taintscope::similarity::{build_metric, Metric, TextSimilarity};
use taintscope::simkit::{
    benchmark_world, run_synthetic_benchmark, BenchmarkConfig, SynthBackend, SynthWorld, WorldConfig,
};
use taintscope::studies::{robustness_run, RobustnessVariant};

fn world_config() -> WorldConfig {
    WorldConfig {
        dataset_size: 300,
        taint_size: 60,
        n_pairs: 3,
        n_member_suspects: 3,
        n_nonmember_suspects: 3,
        pool_size: 200,
        ..WorldConfig::default()
    }
}

fn setup(config: WorldConfig) -> (SynthWorld, Gateway) {
    let world = SynthWorld::generate(config).unwrap();
    let backend = Arc::new(SynthBackend::new(world.profiles.clone(), world.datasets()));
    (world, Gateway::new(backend))
}

fn metric_for(world: &SynthWorld, metric: Metric) -> Box<dyn TextSimilarity> {
    build_metric(metric, world.target.samples.iter().map(|s| s.oracle_output.as_str()), None)
}

#[tokio::test]
async fn member_survives_temperature_sweep_and_rephrasing() {
    let (world, gateway) = setup(world_config());
    let metric = metric_for(&world, Metric::TfidfCosine);
    let auditor = Auditor::new(&gateway, &world.target, &world.pairs, metric.as_ref(), AuditParams::default()).unwrap();
    let offline = auditor.offline().await.unwrap();
    let member = &world.suspects[0];
    assert!(member.member);

    let sweep = RobustnessVariant::TemperatureSweep { temperatures: vec![0.0, 0.5, 1.0] };
    let points = robustness_run(&auditor, &offline, &member.endpoint, &sweep).await.unwrap();
    assert_eq!(points.len(), 3);
    for (p, t) in points.iter().zip([0.0, 0.5, 1.0]) {
        assert_eq!(p.verdict.decision, Decision::Member, "{}", p.label);
        assert_eq!(p.provenance.suspect_decoding.temperature, Some(t));
        assert!(p.provenance.reference_temperatures.iter().all(|(_, t)| *t == Some(1.0)));
    }

    let rephrase = RobustnessVariant::Rephrase { rephraser: world.rephraser.clone() };
    let points = robustness_run(&auditor, &offline, &member.endpoint, &rephrase).await.unwrap();
    assert_eq!(points[0].verdict.decision, Decision::Member);
    assert_eq!(points[0].provenance.rephraser.as_deref(), Some(world.rephraser.name.as_str()));
    assert!(points[0].provenance.rephrase_prefix.is_some());

    let nonmember = world.suspects.iter().find(|s| !s.member).unwrap();
    let points = robustness_run(&auditor, &offline, &nonmember.endpoint, &rephrase).await.unwrap();
    assert_eq!(points[0].verdict.decision, Decision::NonMember);

    let empty = RobustnessVariant::TemperatureSweep { temperatures: vec![] };
    let err = robustness_run(&auditor, &offline, &member.endpoint, &empty).await.unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
}

#[tokio::test]
async fn unreachable_rephraser_fails_only_the_variant() {
    let (world, gateway) = setup(world_config());
    let metric = metric_for(&world, Metric::TfidfCosine);
    let auditor = Auditor::new(&gateway, &world.target, &world.pairs, metric.as_ref(), AuditParams::default()).unwrap();
    let offline = auditor.offline().await.unwrap();
    let mut rephraser = world.rephraser.clone();
    rephraser.base_url = "synthetic:no-such-profile".into();
    rephraser.max_retries = 0;
    let variant = RobustnessVariant::Rephrase { rephraser };
    let member = &world.suspects[0].endpoint;
    assert!(robustness_run(&auditor, &offline, member, &variant).await.is_err());
    let online = auditor.online(&offline, member).await.unwrap();
    assert_eq!(online.verdict.decision, Decision::Member);
}

#[tokio::test]
async fn timing_partitions_into_offline_and_online() {
    let (world, gateway) = setup(world_config());
    let metric = metric_for(&world, Metric::LcsRatio);
    let auditor = Auditor::new(&gateway, &world.target, &world.pairs, metric.as_ref(), AuditParams::default()).unwrap();
    let offline = auditor.offline().await.unwrap();
    let online = auditor.online(&offline, &world.suspects[0].endpoint).await.unwrap();
    let t = TimingReport::from_phases(&offline, &online);
    let parts = offline.timing.collection_ms + offline.timing.decision_ms + online.timing.collection_ms + online.timing.decision_ms;
    assert!((t.total_ms - parts).abs() < 1e-6);
    assert!((t.total_ms - (t.offline.total_ms() + t.online.total_ms())).abs() < 1e-6);
    assert_eq!(t.endpoints.len(), 2 * world.pairs.len() + 1);
}

#[tokio::test]
async fn benchmark_verdicts_equal_the_brute_force_oracle() {
    let (world, gateway) = setup(world_config());
    for metric_kind in [Metric::TfidfCosine, Metric::LcsRatio, Metric::GreedyEmbedF1] {
        let config = BenchmarkConfig {
            world: world.config.clone(),
            metric: metric_kind,
            ..BenchmarkConfig::default()
        };
        let report = benchmark_world(&gateway, &world, &config).await.unwrap();
        let metric = metric_for(&world, metric_kind);
        let p = &config.params;
        for (spec, outcome) in world.suspects.iter().zip(&report.suspects) {
            let (tensor, _) = common::measured_tensor(
                &gateway, &world.target, &world.pairs, &spec.endpoint, metric.as_ref(), p.delta_t, p.delta_s(), p.k,
            )
            .await;
            let expected = common::brute_force(&tensor);
            assert_eq!(expected.member, outcome.decision == Decision::Member, "{} / {metric_kind}", spec.endpoint.name);
            assert_eq!((expected.positive, expected.negative, expected.abstained), (outcome.positive, outcome.negative, outcome.abstained));
            assert_eq!(expected.member, spec.member);
        }
        assert_eq!(report.confusion.f1(), Some(1.0));
    }
}

#[tokio::test]
async fn ablation_without_selection_convicts_nobody() {
    let config = BenchmarkConfig {
        world: world_config(),
        params: AuditParams {
            selection: SelectionMode::Disabled,
            ..AuditParams::default()
        },
        ..BenchmarkConfig::default()
    };
    let (report, _) = run_synthetic_benchmark(&config).await.unwrap();
    assert!(report.suspects.iter().all(|s| s.decision == Decision::NonMember));
    assert_eq!(report.confusion.recall(), Some(0.0));
    assert_eq!(report.confusion.precision(), None);
    assert_eq!(report.tainted, report.retained);
}

#[tokio::test]
async fn positives_fall_as_copy_fidelity_falls() {
    let (mut world, _) = setup(world_config());
    let name = world.suspects[0].endpoint.name.clone();
    let mut last = usize::MAX;
    for p in [1.0, 0.9, 0.7, 0.5, 0.3, 0.1, 0.0] {
        world.profiles.get_mut(&name).unwrap().copy_fidelity = p;
        let gateway = Gateway::new(Arc::new(SynthBackend::new(world.profiles.clone(), world.datasets())));
        let metric = metric_for(&world, Metric::TfidfCosine);
        let auditor = Auditor::new(&gateway, &world.target, &world.pairs, metric.as_ref(), AuditParams::default()).unwrap();
        let offline = auditor.offline().await.unwrap();
        let online = auditor.online(&offline, &world.suspects[0].endpoint).await.unwrap();
        let positive = online.verdict.positive_count;
        assert!(positive <= last, "fidelity {p}: {positive} > {last}");
        last = positive;
    }
    assert_eq!(last, 0);
}

#[tokio::test]
async fn benchmark_is_deterministic_and_rejects_empty_worlds() {
    let config = BenchmarkConfig {
        world: world_config(),
        ..BenchmarkConfig::default()
    };
    let (a, _) = run_synthetic_benchmark(&config).await.unwrap();
    let (b, _) = run_synthetic_benchmark(&config).await.unwrap();
    assert_eq!(a.table(), b.table());

    let all_nonmember = BenchmarkConfig {
        world: WorldConfig { n_member_suspects: 0, ..world_config() },
        ..BenchmarkConfig::default()
    };
    let (r, _) = run_synthetic_benchmark(&all_nonmember).await.unwrap();
    assert_eq!(r.confusion.precision(), None);
    assert!(r.table().contains("N/A"));

    let none = BenchmarkConfig {
        world: WorldConfig { n_member_suspects: 0, n_nonmember_suspects: 0, ..world_config() },
        ..BenchmarkConfig::default()
    };
    assert!(run_synthetic_benchmark(&none).await.is_err());
}
