use std::sync::Arc;
use std::time::Duration;

use taintscope::audit::{AuditParams, AuditReport, Auditor};
use taintscope::error::Error;
use taintscope::gateway::{build_prompt, Gateway, HttpBackend, RetryPolicy};
use taintscope::similarity::{build_metric, greedy_match_score, Metric, SidecarEmbedder, TokenEmbedder};
use taintscope::simkit::{embed_stub_vector, StubOptions, StubServer, SynthBackend, SynthWorld, WorldConfig};
use taintscope::store::ResponseStore;
use taintscope::tokenize::word_tokens;

fn small_world() -> SynthWorld {
    SynthWorld::generate(WorldConfig {
        dataset_size: 40,
        taint_size: 15,
        n_pairs: 2,
        n_member_suspects: 1,
        n_nonmember_suspects: 1,
        pool_size: 20,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn serve(world: &mut SynthWorld, opts: StubOptions) -> StubServer {
    let synth = SynthBackend::new(world.profiles.clone(), world.datasets());
    let server = StubServer::start(synth, opts).unwrap();
    world.retarget(&server.base_url());
    server
}

fn http_gateway() -> Gateway {
    Gateway::new(Arc::new(HttpBackend::default())).with_retry(RetryPolicy {
        base_delay: Duration::from_millis(5),
        factor: 2.0,
    })
}

async fn audit_json(gateway: &Gateway, world: &SynthWorld) -> String {
    let metric = build_metric(Metric::TfidfCosine, world.target.samples.iter().map(|s| s.oracle_output.as_str()), None);
    let auditor = Auditor::new(gateway, &world.target, &world.pairs, metric.as_ref(), AuditParams::default()).unwrap();
    let offline = auditor.offline().await.unwrap();
    let online = auditor.online(&offline, &world.suspects[0].endpoint).await.unwrap();
    AuditReport::new(&auditor, &offline, &online).to_json().unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn warm_cache_issues_no_requests_and_reproduces_report() {
    let mut world = small_world();
    let server = serve(&mut world, StubOptions::default());
    let dir = tempfile::tempdir().unwrap();

    let cold = http_gateway().with_store(Arc::new(ResponseStore::open(dir.path()).unwrap()));
    let first = audit_json(&cold, &world).await;
    let after_cold = server.log().count();
    assert!(after_cold > 0);
    assert!(first.contains("\"decision\": \"member\""));

    let warm = http_gateway().with_store(Arc::new(ResponseStore::open(dir.path()).unwrap()));
    let second = audit_json(&warm, &world).await;
    assert_eq!(server.log().count(), after_cold, "warm run reached the server");
    assert_eq!(warm.requests_issued(), 0);
    assert_eq!(first, second);

    let offline = http_gateway()
        .with_store(Arc::new(ResponseStore::open(dir.path()).unwrap()))
        .cache_only(true);
    assert_eq!(audit_json(&offline, &world).await, first);
}

#[tokio::test(flavor = "multi_thread")]
async fn rate_limit_holds_under_high_concurrency() {
    let mut world = small_world();
    let server = serve(&mut world, StubOptions::default());
    let mut suspect = world.suspects[0].endpoint.clone();
    suspect.rate_limit = Some(15.0);
    suspect.concurrency = 32;
    let gateway = http_gateway();
    let c = gateway.collect_responses(&suspect, &world.target.samples[..30], 1).await.unwrap();
    assert_eq!(c.records.len(), 30);
    let peak = server.log().max_in_window(&suspect.model_id, Duration::from_secs(1));
    assert!(peak <= 15, "{peak} requests in one second");
    assert!(peak >= 10, "limiter is far stricter than configured: {peak}");
}

#[tokio::test(flavor = "multi_thread")]
async fn records_do_not_depend_on_completion_order() {
    let mut world = small_world();
    let _server = serve(&mut world, StubOptions {
        latency: Some(Duration::from_millis(3)),
        ..StubOptions::default()
    });
    let mut suspect = world.suspects[0].endpoint.clone();
    let samples = &world.target.samples[..20];
    let key = |c: &taintscope::gateway::Collection| {
        c.records.iter().map(|r| (r.sample_id.clone(), r.attempt, r.text.clone(), r.byte_len)).collect::<Vec<_>>()
    };
    suspect.concurrency = 1;
    let serial = key(&http_gateway().collect_responses(&suspect, samples, 3).await.unwrap());
    suspect.concurrency = 16;
    let parallel = key(&http_gateway().collect_responses(&suspect, samples, 3).await.unwrap());
    assert_eq!(serial, parallel);
    assert!(serial.iter().all(|(_, _, text, len)| text.len() == *len));
}

#[tokio::test(flavor = "multi_thread")]
async fn transient_failures_are_retried_and_persistent_ones_isolated() {
    let mut world = small_world();
    let flaky = world.target.samples[3].id.clone();
    let broken = world.target.samples[5].id.clone();
    let server = serve(&mut world, StubOptions {
        fail_prompts: vec![(format!("Task {flaky}:"), 2), (format!("Task {broken}:"), 100)],
        ..StubOptions::default()
    });
    let mut suspect = world.suspects[0].endpoint.clone();
    suspect.max_retries = 3;
    let gateway = http_gateway();
    let samples = &world.target.samples[..10];
    let c = gateway.collect_responses(&suspect, samples, 1).await.unwrap();
    assert_eq!(c.records.len(), 9);
    assert_eq!(c.failures.len(), 1);
    assert_eq!(c.failures[0].sample_id, broken);
    assert!(c.records.iter().any(|r| r.sample_id == flaky));
    // 10 first tries, 2 retries for the flaky prompt and 3 for the broken one.
    assert_eq!(gateway.requests_issued(), 15);
    assert_eq!(server.log().count_path("chat"), 15);
}

#[tokio::test(flavor = "multi_thread")]
async fn down_endpoint_is_reported_unreachable() {
    let mut world = small_world();
    let down = world.suspects[0].endpoint.model_id.clone();
    let _server = serve(&mut world, StubOptions {
        down_models: vec![down],
        ..StubOptions::default()
    });
    let mut suspect = world.suspects[0].endpoint.clone();
    suspect.max_retries = 1;
    let err = http_gateway()
        .collect_responses(&suspect, &world.target.samples[..4], 1)
        .await
        .unwrap_err();
    match err {
        Error::EndpointUnreachable { failed, .. } => assert_eq!(failed, 4),
        other => panic!("unexpected error {other}"),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn logprobs_over_http_match_the_profile() {
    let mut world = small_world();
    let synth = SynthBackend::new(world.profiles.clone(), world.datasets());
    let _server = serve(&mut world, StubOptions::default());
    let reference = world.logprob_references[0].clone();
    let gateway = http_gateway();
    let profile = SynthBackend::profile_name(&reference).to_string();
    for s in &world.target.samples[..5] {
        let prompt = build_prompt(s).unwrap();
        let continuation = format!("{} and a tail", s.oracle_output);
        let got = gateway.query_logprobs(&reference, &prompt, &continuation).await.unwrap();
        let want = synth.score(&profile, &prompt, &continuation).unwrap();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.token, w.token);
            assert!((g.logprob - w.logprob).abs() < 1e-9);
        }
        let joined: String = got.iter().map(|t| t.token.as_str()).collect();
        assert_eq!(joined, continuation);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn missing_completion_route_is_a_capability_error() {
    let mut world = small_world();
    let _server = serve(&mut world, StubOptions {
        completions: false,
        ..StubOptions::default()
    });
    let reference = world.logprob_references[0].clone();
    let s = &world.target.samples[0];
    let err = http_gateway()
        .query_logprobs(&reference, &build_prompt(s).unwrap(), "some continuation")
        .await
        .unwrap_err();
    assert!(matches!(err, Error::Capability { .. }), "{err}");
}

#[test]
fn sidecar_client_speaks_the_embed_protocol() {
    let world = small_world();
    let synth = SynthBackend::new(world.profiles.clone(), world.datasets());
    let server = StubServer::start(synth, StubOptions::default()).unwrap();
    let emb = SidecarEmbedder::connect(server.sidecar_url()).unwrap();
    assert_eq!(emb.health().dim, 32);
    assert_eq!(emb.info().model_version, "stub-embed-1");
    assert_eq!(emb.info().dimension, Some(32));

    let texts = ["The cat sat.", "Grüße, мир! 東京 tower", "  ", world.target.samples[0].oracle_output.as_str()];
    let vecs = emb.embed(&texts).unwrap();
    for (text, v) in texts.iter().zip(&vecs) {
        assert_eq!(v.tokens, word_tokens(text));
        assert_eq!(v.tokens.len(), v.vectors.len());
    }
    let again = SidecarEmbedder::connect(server.sidecar_url()).unwrap().embed(&texts).unwrap();
    assert_eq!(vecs, again);
    assert!(server.log().count_path("embed") >= 2);

    let s = texts[3];
    assert!(greedy_match_score(s, s, &emb).unwrap().value >= 0.999);
    let (a, b) = (world.target.samples[1].oracle_output.as_str(), world.target.samples[2].oracle_output.as_str());
    let ab = greedy_match_score(a, b, &emb).unwrap().value;
    let ba = greedy_match_score(b, a, &emb).unwrap().value;
    assert!((ab - ba).abs() < 1e-9);
    assert!((0.0..=1.0).contains(&ab));
    assert_eq!(embed_stub_vector("cat", 32).len(), 32);
}

#[test]
fn sidecar_unreachable_is_an_error() {
    let err = SidecarEmbedder::connect("http://127.0.0.1:9").err().expect("connect must fail");
    let msg = err.to_string();
    assert!(msg.contains("127.0.0.1:9"), "{msg}");
}
