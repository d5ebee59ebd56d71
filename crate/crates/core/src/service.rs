//! REST facade over the coordinator.
//!
//! Each run executes on its own OS thread; the HTTP layer only reads
//! iteration-atomic snapshots and, in manual mode, feeds cluster choices into
//! the run's selection channel.
//!
//! Routes:
//!
//! | method | path | purpose |
//! |---|---|---|
//! | POST | `/api/runs` | start a run from a job document |
//! | GET | `/api/runs/{id}` | state and run log so far |
//! | GET | `/api/runs/{id}/iterations/{k}/clusters` | cluster summaries with 2D PCA |
//! | POST | `/api/runs/{id}/iterations/{k}/selection` | manual choice `{"cluster_id": n}` |
//! | GET | `/api/payloads/{id}` | locally materialized payload |
//! | GET | `/api/healthz` | liveness |

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;
use tracing::{info, warn};

use crate::backends::{BackendConfig, Backends, ImagePayload, PayloadData};
use crate::config::JobConfig;
use crate::embedding::Embedding;
use crate::pipeline::{
    ChannelSelector, ClusterSummary, Coordinator, IterationRecord, MostCohesive, RunLog, RunObserver, RunStatus,
    SelectionMode, SelectionRequest, SidecarWriter,
};

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    /// Backend used when a job document names none.
    pub default_backend: BackendConfig,
    /// Where finished run logs and sidecars are exported, one directory per run.
    pub export_dir: Option<PathBuf>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            default_backend: BackendConfig::default(),
            export_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Pending,
    Running,
    AwaitingSelection,
    Terminal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendingSelection {
    pub iteration: usize,
    pub suggested: usize,
}

/// Body of `GET /api/runs/{id}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub state: RunState,
    pub status: Option<RunStatus>,
    pub selection_pending: bool,
    pub pending_selection: Option<PendingSelection>,
    pub log: RunLog,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PayloadRef {
    pub id: String,
    pub uri: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterView {
    #[serde(flatten)]
    pub summary: ClusterSummary,
    pub representatives: Vec<PayloadRef>,
}

/// Body of `GET /api/runs/{id}/iterations/{k}/clusters`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClustersView {
    pub run_id: String,
    pub iteration: usize,
    pub selection_pending: bool,
    pub suggested: Option<usize>,
    pub chosen_cluster: Option<usize>,
    pub clusters: Vec<ClusterView>,
}

struct Snapshot {
    state: RunState,
    log: RunLog,
    pending: Option<SelectionRequest>,
}

struct RunSlot {
    snapshot: Mutex<Snapshot>,
    selection_tx: Mutex<Option<Sender<usize>>>,
    cancel: Arc<AtomicBool>,
}

#[derive(Default)]
struct Registry {
    runs: BTreeMap<String, Arc<RunSlot>>,
    threads: Vec<JoinHandle<()>>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    options: ServiceOptions,
    registry: Mutex<Registry>,
    payloads: Mutex<HashMap<String, ImagePayload>>,
    counter: AtomicU64,
    closing: AtomicBool,
}

impl AppState {
    pub fn new(options: ServiceOptions) -> Self {
        Self {
            inner: Arc::new(Inner {
                options,
                registry: Mutex::new(Registry::default()),
                payloads: Mutex::new(HashMap::new()),
                counter: AtomicU64::new(0),
                closing: AtomicBool::new(false),
            }),
        }
    }

    /// Registers and starts a run; returns its id.
    pub fn create_run(&self, mut job: JobConfig) -> Result<String, ApiError> {
        if self.inner.closing.load(Ordering::SeqCst) {
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service is shutting down"));
        }
        let seed = *job.run.rng_seed.get_or_insert_with(|| rand::rng().random());
        let n = self.inner.counter.fetch_add(1, Ordering::SeqCst);
        let run_id = format!("run-{n:05}-{:08x}", (seed ^ rand::rng().random::<u64>()) as u32);

        let (tx, rx) = mpsc::channel();
        let cancel = Arc::new(AtomicBool::new(false));
        let slot = Arc::new(RunSlot {
            snapshot: Mutex::new(Snapshot {
                state: RunState::Pending,
                log: RunLog {
                    schema_version: crate::pipeline::RUNLOG_SCHEMA_VERSION,
                    run_id: run_id.clone(),
                    started_at_ms: None,
                    finished_at_ms: None,
                    config: job.run.clone(),
                    backend: Some(job.backend.clone()),
                    embedding_dim: None,
                    iterations: Vec::new(),
                    status: None,
                    error: None,
                    final_representation: None,
                },
                pending: None,
            }),
            selection_tx: Mutex::new(Some(tx)),
            cancel: cancel.clone(),
        });

        let state = self.clone();
        let thread_slot = slot.clone();
        let thread_id = run_id.clone();
        let handle = std::thread::Builder::new()
            .name(format!("run-{n}"))
            .spawn(move || state.execute(thread_id, job, thread_slot, rx))
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;

        let mut registry = self.inner.registry.lock().expect("registry lock");
        registry.runs.insert(run_id.clone(), slot);
        registry.threads.push(handle);
        info!(%run_id, "run created");
        Ok(run_id)
    }

    fn execute(&self, run_id: String, job: JobConfig, slot: Arc<RunSlot>, rx: mpsc::Receiver<usize>) {
        let export = self.inner.options.export_dir.as_ref().map(|d| d.join(&run_id));
        let mut observer = SlotObserver {
            slot: slot.clone(),
            state: self.clone(),
            sidecars: export.as_ref().map(SidecarWriter::new),
        };
        let log = match job.backend.build() {
            Ok(backend) => {
                let coordinator = Coordinator::new(job.run.clone(), Backends::from_backend(backend.as_ref()))
                    .map(|c| {
                        c.with_run_id(run_id.clone())
                            .with_backend_config(job.backend.clone())
                            .with_cancel(slot.cancel.clone())
                            .with_observer(&mut observer)
                    });
                match coordinator {
                    Ok(c) => {
                        let timeout = Duration::from_secs(job.run.selection_timeout_secs);
                        match job.run.selection_mode {
                            SelectionMode::Auto => c.with_selector(MostCohesive).run(),
                            SelectionMode::Manual => c
                                .with_selector(ChannelSelector::new(rx, timeout).with_cancel(slot.cancel.clone()))
                                .run(),
                        }
                    }
                    Err(e) => failed_log(&slot, RunStatus::BackendFailure, e.to_string()),
                }
            }
            Err(e) => failed_log(&slot, RunStatus::BackendFailure, format!("backend construction failed: {e}")),
        };
        {
            let mut snap = slot.snapshot.lock().expect("snapshot lock");
            snap.log = log.clone();
            snap.state = RunState::Terminal;
            snap.pending = None;
        }
        slot.selection_tx.lock().expect("tx lock").take();
        if let Some(dir) = export {
            let written = std::fs::create_dir_all(&dir)
                .and_then(|_| std::fs::write(dir.join("runlog.json"), log.to_json_pretty()));
            if let Err(e) = written {
                warn!(%run_id, "failed to export run log: {e}");
            }
        }
    }

    fn slot(&self, run_id: &str) -> Result<Arc<RunSlot>, ApiError> {
        self.inner
            .registry
            .lock()
            .expect("registry lock")
            .runs
            .get(run_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no run `{run_id}`")))
    }

    pub fn get_run(&self, run_id: &str) -> Result<RunView, ApiError> {
        let slot = self.slot(run_id)?;
        let snap = slot.snapshot.lock().expect("snapshot lock");
        Ok(RunView {
            run_id: run_id.to_string(),
            state: snap.state,
            status: snap.log.status,
            selection_pending: snap.pending.is_some(),
            pending_selection: snap.pending.as_ref().map(|p| PendingSelection {
                iteration: p.iteration,
                suggested: p.suggested,
            }),
            log: snap.log.clone(),
        })
    }

    pub fn list_iteration_clusters(&self, run_id: &str, iteration: usize) -> Result<ClustersView, ApiError> {
        let slot = self.slot(run_id)?;
        let (summaries, selection_pending, suggested, chosen) = {
            let snap = slot.snapshot.lock().expect("snapshot lock");
            if let Some(record) = snap.log.iterations.get(iteration) {
                let summaries = record.cluster_summaries.clone().ok_or_else(|| {
                    ApiError::not_found(format!("iteration {iteration} ran without clustering"))
                })?;
                (summaries, false, None, record.chosen_cluster)
            } else if let Some(p) = snap.pending.as_ref().filter(|p| p.iteration == iteration) {
                (p.clusters.clone(), true, Some(p.suggested), None)
            } else {
                return Err(ApiError::not_found(format!("run `{run_id}` has no iteration {iteration} yet")));
            }
        };
        let payloads = self.inner.payloads.lock().expect("payload lock");
        let clusters = summaries
            .into_iter()
            .map(|summary| {
                let representatives = summary
                    .representative_ids
                    .iter()
                    .map(|id| PayloadRef {
                        id: id.clone(),
                        uri: match payloads.get(id).map(|p| &p.data_ref) {
                            Some(PayloadData::Uri(u)) => u.clone(),
                            _ => format!("/api/payloads/{id}"),
                        },
                    })
                    .collect();
                ClusterView {
                    summary,
                    representatives,
                }
            })
            .collect();
        Ok(ClustersView {
            run_id: run_id.to_string(),
            iteration,
            selection_pending,
            suggested,
            chosen_cluster: chosen,
            clusters,
        })
    }

    pub fn post_selection(&self, run_id: &str, iteration: usize, cluster_id: usize) -> Result<(), ApiError> {
        let slot = self.slot(run_id)?;
        let mut snap = slot.snapshot.lock().expect("snapshot lock");
        let pending = match (&snap.state, &snap.pending) {
            (RunState::AwaitingSelection, Some(p)) if p.iteration == iteration => p,
            (RunState::AwaitingSelection, Some(p)) => {
                return Err(ApiError::conflict(format!(
                    "run is awaiting a selection for iteration {}, not {iteration}",
                    p.iteration
                )))
            }
            _ if snap.log.config.selection_mode == SelectionMode::Auto => {
                return Err(ApiError::conflict("run uses automatic selection"))
            }
            _ => return Err(ApiError::conflict("run is not awaiting a selection")),
        };
        match pending.clusters.iter().find(|c| c.id == cluster_id) {
            None => {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("unknown cluster {cluster_id}"),
                ))
            }
            Some(c) if !c.eligible => {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("cluster below minimum size ({} members)", c.size),
                ))
            }
            Some(_) => {}
        }
        let sent = slot
            .selection_tx
            .lock()
            .expect("tx lock")
            .as_ref()
            .map(|tx| tx.send(cluster_id).is_ok())
            .unwrap_or(false);
        if !sent {
            return Err(ApiError::conflict("run is no longer accepting selections"));
        }
        // consumed: a second post for this iteration is a conflict
        snap.state = RunState::Running;
        snap.pending = None;
        Ok(())
    }

    pub fn payload(&self, id: &str) -> Result<ImagePayload, ApiError> {
        self.inner
            .payloads
            .lock()
            .expect("payload lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no payload `{id}`")))
    }

    /// Cancels every run and waits for their threads. Runs that were still
    /// going end as `interrupted`.
    pub fn shutdown(&self) {
        self.inner.closing.store(true, Ordering::SeqCst);
        let threads = {
            let mut registry = self.inner.registry.lock().expect("registry lock");
            for slot in registry.runs.values() {
                slot.cancel.store(true, Ordering::SeqCst);
            }
            std::mem::take(&mut registry.threads)
        };
        for t in threads {
            let _ = t.join();
        }
    }

    /// Blocks until run `run_id` is terminal or `timeout` passes.
    pub fn wait_terminal(&self, run_id: &str, timeout: Duration) -> Option<RunLog> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let view = self.get_run(run_id).ok()?;
            if view.state == RunState::Terminal {
                return Some(view.log);
            }
            if std::time::Instant::now() > deadline {
                return None;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

fn failed_log(slot: &RunSlot, status: RunStatus, message: String) -> RunLog {
    let mut log = slot.snapshot.lock().expect("snapshot lock").log.clone();
    log.status = Some(status);
    log.error = Some(message);
    log
}

struct SlotObserver {
    slot: Arc<RunSlot>,
    state: AppState,
    sidecars: Option<SidecarWriter>,
}

impl RunObserver for SlotObserver {
    fn run_started(&mut self, log: &RunLog) {
        let mut snap = self.slot.snapshot.lock().expect("snapshot lock");
        snap.log = log.clone();
        snap.state = RunState::Running;
    }

    fn awaiting_selection(&mut self, request: &SelectionRequest) {
        let mut snap = self.slot.snapshot.lock().expect("snapshot lock");
        snap.pending = Some(request.clone());
        snap.state = RunState::AwaitingSelection;
    }

    fn selection_resolved(&mut self, _iteration: usize) {
        let mut snap = self.slot.snapshot.lock().expect("snapshot lock");
        snap.pending = None;
        if snap.state == RunState::AwaitingSelection {
            snap.state = RunState::Running;
        }
    }

    fn iteration_completed(&mut self, record: &IterationRecord, embeddings: &[Embedding], payloads: &[ImagePayload]) {
        if let Some(w) = self.sidecars.as_mut() {
            w.iteration_completed(record, embeddings, payloads);
        }
        {
            let mut store = self.state.inner.payloads.lock().expect("payload lock");
            for p in payloads {
                store.insert(p.id.clone(), p.clone());
            }
        }
        let mut snap = self.slot.snapshot.lock().expect("snapshot lock");
        if snap.log.embedding_dim.is_none() {
            snap.log.embedding_dim = embeddings.first().map(Embedding::dim);
        }
        snap.log.iterations.push(record.clone());
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub fields: Option<Vec<crate::pipeline::FieldError>>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            fields: None,
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match self.fields {
            Some(fields) => json!({ "error": self.message, "fields": fields }),
            None => json!({ "error": self.message }),
        };
        (self.status, Json(body)).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/healthz", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/api/runs", post(create_run))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/iterations/{k}/clusters", get(list_clusters))
        .route("/api/runs/{id}/iterations/{k}/selection", post(post_selection))
        .route("/api/payloads/{id}", get(get_payload))
        .with_state(state)
}

async fn create_run(State(state): State<AppState>, body: String) -> Result<Response, ApiError> {
    let job = JobConfig::parse(&body, &state.inner.options.default_backend).map_err(|e| ApiError {
        status: StatusCode::BAD_REQUEST,
        message: "invalid config".into(),
        fields: Some(e.errors),
    })?;
    let run_id = state.create_run(job)?;
    Ok((StatusCode::CREATED, Json(json!({ "run_id": run_id }))).into_response())
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<RunView>, ApiError> {
    state.get_run(&id).map(Json)
}

async fn list_clusters(
    State(state): State<AppState>,
    Path((id, k)): Path<(String, usize)>,
) -> Result<Json<ClustersView>, ApiError> {
    state.list_iteration_clusters(&id, k).map(Json)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionBody {
    cluster_id: usize,
}

async fn post_selection(
    State(state): State<AppState>,
    Path((id, k)): Path<(String, usize)>,
    body: String,
) -> Result<Json<serde_json::Value>, ApiError> {
    let body: SelectionBody = serde_json::from_str(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid selection body: {e}")))?;
    state.post_selection(&id, k, body.cluster_id)?;
    Ok(Json(json!({ "run_id": id, "iteration": k, "cluster_id": body.cluster_id, "status": "accepted" })))
}

async fn get_payload(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let payload = state.payload(&id)?;
    match payload.data_ref {
        PayloadData::Latent(latent) => Ok(Json(json!({
            "id": payload.id,
            "seed": payload.seed,
            "prompt": payload.prompt,
            "latent": latent,
        }))
        .into_response()),
        PayloadData::Uri(uri) => Err(ApiError::not_found(format!(
            "payload `{id}` is not materialized locally; see {uri}"
        ))),
    }
}

/// Serves until `shutdown` resolves, then cancels and drains all runs.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    tokio::task::spawn_blocking(move || state.shutdown())
        .await
        .map_err(std::io::Error::other)
}

/// A service running on a background thread, for tests and examples.
pub struct ServiceHandle {
    addr: SocketAddr,
    state: AppState,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServiceHandle {
    pub fn start(addr: &str, options: ServiceOptions) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let state = AppState::new(options);
        let (tx, rx) = oneshot::channel::<()>();
        let serve_state = state.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                serve(listener, serve_state, async {
                    let _ = rx.await;
                })
                .await
            })
        });
        Ok(Self {
            addr,
            state,
            stop: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &AppState {
        &self.state
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("service thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}
