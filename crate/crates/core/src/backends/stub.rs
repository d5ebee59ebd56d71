//! In-process stub of the remote backend protocol, serving canned fixtures.
//!
//! Used by integration tests and the HTTP example. Every request body is
//! recorded verbatim, and failures can be queued per endpoint to exercise
//! the client's retry and error mapping.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use super::http::GeneratedImage;

pub const BUNDLED_FIXTURES: &str = include_str!("../../fixtures/stub_backend.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubFixtures {
    pub models: Vec<String>,
    pub images: Vec<GeneratedImage>,
    pub embeddings: BTreeMap<String, Vec<f64>>,
    /// Prefix of handles returned by extract; the n-th call yields `{prefix}-{n}`.
    pub extract_model: String,
}

impl StubFixtures {
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_FIXTURES).expect("bundled fixtures parse")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StubEndpoint {
    Generate,
    Embed,
    Extract,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedRequest {
    pub path: String,
    pub body: String,
}

#[derive(Debug)]
struct StubState {
    fixtures: StubFixtures,
    models: BTreeSet<String>,
    extractions: usize,
    failures: BTreeMap<StubEndpoint, VecDeque<(u16, String)>>,
    log: Vec<RecordedRequest>,
}

type Shared = Arc<Mutex<StubState>>;

pub struct StubServer {
    addr: SocketAddr,
    state: Shared,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral localhost port and serves on a background thread.
    pub fn start(fixtures: StubFixtures) -> std::io::Result<Self> {
        let state = Arc::new(Mutex::new(StubState {
            models: fixtures.models.iter().cloned().collect(),
            fixtures,
            extractions: 0,
            failures: BTreeMap::new(),
            log: Vec::new(),
        }));
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(state.clone());
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .expect("stub runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("stub listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("stub server");
            });
        });
        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Makes the next `times` calls to `endpoint` fail with `status`.
    pub fn fail_next(&self, endpoint: StubEndpoint, times: usize, status: u16, message: &str) {
        let mut state = self.state.lock().expect("stub state");
        let queue = state.failures.entry(endpoint).or_default();
        for _ in 0..times {
            queue.push_back((status, message.to_string()));
        }
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.lock().expect("stub state").log.clone()
    }

    pub fn request_count(&self, path: &str) -> usize {
        self.requests().iter().filter(|r| r.path == path).count()
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

fn router(state: Shared) -> Router {
    Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/embed", post(embed))
        .route("/v1/extract", post(extract))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

/// Logs the request and pops a queued failure, if any.
fn intake(state: &mut StubState, endpoint: StubEndpoint, path: &str, body: &str) -> Option<Response> {
    state.log.push(RecordedRequest {
        path: path.to_string(),
        body: body.to_string(),
    });
    let (status, message) = state.failures.get_mut(&endpoint)?.pop_front()?;
    Some(error(
        StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
        message,
    ))
}

#[derive(Deserialize)]
struct GenerateBody {
    model: String,
    #[allow(dead_code)]
    prompt: String,
    count: usize,
    #[allow(dead_code)]
    seed: u64,
}

async fn generate(State(state): State<Shared>, body: String) -> Response {
    let mut state = state.lock().expect("stub state");
    if let Some(r) = intake(&mut state, StubEndpoint::Generate, "/v1/generate", &body) {
        return r;
    }
    let req: GenerateBody = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if !state.models.contains(&req.model) {
        return error(StatusCode::NOT_FOUND, format!("unknown model {}", req.model));
    }
    if req.count == 0 || req.count > state.fixtures.images.len() {
        return error(
            StatusCode::BAD_REQUEST,
            format!("count must be in 1..={}", state.fixtures.images.len()),
        );
    }
    let images = &state.fixtures.images[..req.count];
    Json(json!({ "images": images })).into_response()
}

#[derive(Deserialize)]
struct EmbedBody {
    uris: Vec<String>,
    extractor: String,
}

async fn embed(State(state): State<Shared>, body: String) -> Response {
    let mut state = state.lock().expect("stub state");
    if let Some(r) = intake(&mut state, StubEndpoint::Embed, "/v1/embed", &body) {
        return r;
    }
    let req: EmbedBody = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if !matches!(req.extractor.as_str(), "dinov2" | "dinov1" | "clip") {
        return error(StatusCode::BAD_REQUEST, format!("unknown extractor {}", req.extractor));
    }
    let mut out = Vec::with_capacity(req.uris.len());
    for uri in &req.uris {
        match state.fixtures.embeddings.get(uri) {
            Some(v) => out.push(v.clone()),
            None => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("cannot read {uri}")),
        }
    }
    Json(json!({ "embeddings": out })).into_response()
}

#[derive(Deserialize)]
struct ExtractBody {
    model: String,
    #[allow(dead_code)]
    prompt: String,
    image_ids: Vec<String>,
    steps: u32,
    #[allow(dead_code)]
    use_lora: bool,
}

async fn extract(State(state): State<Shared>, body: String) -> Response {
    let mut state = state.lock().expect("stub state");
    if let Some(r) = intake(&mut state, StubEndpoint::Extract, "/v1/extract", &body) {
        return r;
    }
    let req: ExtractBody = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if !state.models.contains(&req.model) {
        return error(StatusCode::NOT_FOUND, format!("unknown model {}", req.model));
    }
    if req.image_ids.is_empty() || req.steps == 0 {
        return error(StatusCode::BAD_REQUEST, "image_ids and steps must be non-empty");
    }
    let known: BTreeSet<&str> = state.fixtures.images.iter().map(|i| i.id.as_str()).collect();
    if let Some(bad) = req.image_ids.iter().find(|id| !known.contains(id.as_str())) {
        return error(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown image {bad}"));
    }
    state.extractions += 1;
    let handle = format!("{}-{}", state.fixtures.extract_model, state.extractions);
    state.models.insert(handle.clone());
    Json(json!({ "model": handle })).into_response()
}
