use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::backend::SynthBackend;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::tokenize::word_tokens;

#[derive(Debug, Clone)]
pub struct StubOptions {
    /// Delay before every chat or completion reply.
    pub latency: Option<Duration>,
    /// `(substring, n)`: the first `n` chat requests whose prompt contains
    /// `substring` get HTTP 500.
    pub fail_prompts: Vec<(String, u32)>,
    /// Models whose chat requests always get HTTP 503.
    pub down_models: Vec<String>,
    /// Serve `/v1/completions`; without it the route answers 404.
    pub completions: bool,
    pub embed_dim: usize,
    pub embed_model_version: String,
}

impl Default for StubOptions {
    fn default() -> Self {
        StubOptions {
            latency: None,
            fail_prompts: Vec::new(),
            down_models: Vec::new(),
            completions: true,
            embed_dim: 32,
            embed_model_version: "stub-embed-1".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoggedRequest {
    pub path: &'static str,
    pub model: String,
    pub at: Instant,
}

/// Requests seen by a [`StubServer`].
#[derive(Debug, Default)]
pub struct RequestLog {
    entries: Mutex<Vec<LoggedRequest>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl RequestLog {
    fn record(&self, path: &'static str, model: &str) {
        self.entries.lock().expect("log lock").push(LoggedRequest {
            path,
            model: model.to_string(),
            at: Instant::now(),
        });
    }

    pub fn entries(&self) -> Vec<LoggedRequest> {
        self.entries.lock().expect("log lock").clone()
    }

    pub fn count(&self) -> usize {
        self.entries.lock().expect("log lock").len()
    }

    pub fn count_path(&self, path: &str) -> usize {
        self.entries().iter().filter(|e| e.path == path).count()
    }

    /// Largest number of requests for `model` arriving within any span of
    /// length `window`.
    pub fn max_in_window(&self, model: &str, window: Duration) -> usize {
        let mut times: Vec<Instant> = self.entries().iter().filter(|e| e.model == model).map(|e| e.at).collect();
        times.sort();
        let mut best = 0;
        let mut lo = 0;
        for hi in 0..times.len() {
            while times[hi] - times[lo] >= window {
                lo += 1;
            }
            best = best.max(hi - lo + 1);
        }
        best
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn enter(&self) -> FlightGuard<'_> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        FlightGuard(self)
    }
}

struct FlightGuard<'a>(&'a RequestLog);

impl Drop for FlightGuard<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

struct StubState {
    synth: SynthBackend,
    opts: StubOptions,
    log: Arc<RequestLog>,
    failures_left: Mutex<HashMap<String, u32>>,
}

/// Local HTTP server speaking the chat-completion, completion (with echoed
/// logprobs) and embedding sidecar protocols on behalf of synthetic
/// profiles. Runs on its own thread; stops when dropped.
pub struct StubServer {
    addr: SocketAddr,
    log: Arc<RequestLog>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn start(synth: SynthBackend, opts: StubOptions) -> Result<StubServer> {
        let log = Arc::new(RequestLog::default());
        let state = Arc::new(StubState {
            synth,
            failures_left: Mutex::new(opts.fail_prompts.iter().cloned().collect()),
            opts,
            log: Arc::clone(&log),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(chat))
            .route("/v1/completions", post(completions))
            .route("/embed", post(embed))
            .route("/health", get(health))
            .with_state(state);

        let listener = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| Error::io("127.0.0.1:0", e))?;
        listener.set_nonblocking(true).map_err(|e| Error::io("127.0.0.1:0", e))?;
        let addr = listener.local_addr().map_err(|e| Error::io("127.0.0.1:0", e))?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()
                .expect("stub runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("stub listener");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(StubServer {
            addr,
            log,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    /// Base URL for chat-completion endpoints.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Base URL for the embedding sidecar protocol.
    pub fn sidecar_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn log(&self) -> &RequestLog {
        &self.log
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": {"message": message.into()}}))).into_response()
}

fn request_error(e: crate::gateway::RequestError) -> Response {
    match e {
        crate::gateway::RequestError::Status { status, body } => {
            error(StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), body)
        }
        other => error(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    }
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatRequest {
    model: String,
    messages: Vec<ChatMessage>,
    #[serde(default)]
    temperature: Option<f64>,
    #[serde(default)]
    seed: Option<u32>,
}

async fn chat(State(st): State<Arc<StubState>>, Json(req): Json<ChatRequest>) -> Response {
    st.log.record("chat", &req.model);
    let _guard = st.log.enter();
    if let Some(d) = st.opts.latency {
        tokio::time::sleep(d).await;
    }
    if st.opts.down_models.contains(&req.model) {
        return error(StatusCode::SERVICE_UNAVAILABLE, "model is down");
    }
    let Some(prompt) = req.messages.last().map(|m| m.content.as_str()) else {
        return error(StatusCode::BAD_REQUEST, "no messages");
    };
    {
        let mut left = st.failures_left.lock().expect("failure lock");
        if let Some(n) = left.iter_mut().find(|(k, _)| prompt.contains(k.as_str())).map(|(_, n)| n) {
            if *n > 0 {
                *n -= 1;
                return error(StatusCode::INTERNAL_SERVER_ERROR, "injected failure");
            }
        }
    }
    match st.synth.respond(&req.model, prompt, req.temperature, req.seed.unwrap_or(0)) {
        Ok(text) => Json(json!({
            "object": "chat.completion",
            "model": req.model,
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        }))
        .into_response(),
        Err(e) => request_error(e),
    }
}

#[derive(Deserialize)]
struct CompletionRequest {
    model: String,
    prompt: String,
    #[serde(default)]
    echo: bool,
}

/// Split an echoed text into a known sample prompt and the continuation.
fn split_known_prompt<'a>(synth: &SynthBackend, text: &'a str) -> (&'a str, &'a str) {
    let mut from = 0;
    while let Some(pos) = text[from..].find("Task ") {
        let start = from + pos + 5;
        if let Some(colon) = text[start..].find(':') {
            let id = &text[start..start + colon];
            let mut end = start + colon;
            // The prompt ends at the first '?' after the id (instruction end).
            if let Some(q) = text[end..].find('?') {
                end += q + 1;
                let (p, c) = text.split_at(end);
                if synth.sample_for(p).is_some_and(|s| s.id == id) {
                    return (p, c);
                }
            }
        }
        from = start;
    }
    (text, "")
}

async fn completions(State(st): State<Arc<StubState>>, Json(req): Json<CompletionRequest>) -> Response {
    st.log.record("completions", &req.model);
    let _guard = st.log.enter();
    if !st.opts.completions {
        return error(StatusCode::NOT_FOUND, "no completion endpoint");
    }
    if !req.echo {
        return error(StatusCode::BAD_REQUEST, "only echo scoring is supported");
    }
    let (prompt, continuation) = split_known_prompt(&st.synth, &req.prompt);
    let scored = match st.synth.score(&req.model, prompt, continuation) {
        Ok(s) => s,
        Err(e) => return request_error(e),
    };
    let mut tokens: Vec<Value> = Vec::new();
    let mut lps: Vec<Value> = Vec::new();
    let mut offsets: Vec<usize> = Vec::new();
    let mut offset = 0;
    for (i, tok) in prompt.split_inclusive(' ').enumerate() {
        tokens.push(json!(tok));
        lps.push(if i == 0 { Value::Null } else { json!(-1.0) });
        offsets.push(offset);
        offset += tok.chars().count();
    }
    for t in scored {
        offsets.push(offset);
        offset += t.token.chars().count();
        tokens.push(json!(t.token));
        lps.push(json!(t.logprob));
    }
    Json(json!({
        "object": "text_completion",
        "model": req.model,
        "choices": [{
            "index": 0,
            "text": req.prompt,
            "logprobs": {"tokens": tokens, "token_logprobs": lps, "text_offset": offsets},
            "finish_reason": "length",
        }],
    }))
    .into_response()
}

/// Deterministic unit vector for `token`.
pub fn embed_stub_vector(token: &str, dim: usize) -> Vec<f32> {
    let mut v = Vec::with_capacity(dim);
    let mut block = 0u32;
    while v.len() < dim {
        let h = sha256_hex(format!("{block}:{token}").as_bytes());
        for pair in h.as_bytes().chunks(4) {
            if v.len() == dim {
                break;
            }
            let n = u16::from_str_radix(std::str::from_utf8(pair).expect("hex"), 16).expect("hex");
            v.push(n as f32 / 32767.5 - 1.0);
        }
        block += 1;
    }
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
    v.iter().map(|x| x / norm).collect()
}

#[derive(Deserialize)]
struct EmbedRequest {
    texts: Vec<String>,
}

async fn embed(State(st): State<Arc<StubState>>, Json(req): Json<EmbedRequest>) -> Response {
    st.log.record("embed", "");
    let dim = st.opts.embed_dim;
    let items: Vec<Value> = req
        .texts
        .iter()
        .map(|t| {
            let tokens = word_tokens(t);
            let vectors: Vec<Vec<f32>> = tokens.iter().map(|tok| embed_stub_vector(tok, dim)).collect();
            json!({"tokens": tokens, "vectors": vectors, "truncated": false})
        })
        .collect();
    Json(json!({"items": items, "dim": dim, "model_version": st.opts.embed_model_version})).into_response()
}

async fn health(State(st): State<Arc<StubState>>) -> Response {
    st.log.record("health", "");
    Json(json!({"status": "ok", "model_version": st.opts.embed_model_version, "dim": st.opts.embed_dim})).into_response()
}
