//! The generate → embed → cluster → filter → select → extract loop.
//!
//! Each iteration draws `n_images` samples from the current representation,
//! measures their mean pairwise squared distance, clusters them with
//! `k = n_images / d_size_c`, drops clusters of size `<= d_min_c`, picks the
//! most cohesive survivor (or the one a human picks) and refines the
//! representation on it. The loop exits once the statistic measured at the
//! top of an iteration is at or below the threshold; that iteration's
//! extraction still runs, so the returned representation is one refinement
//! past the measured one unless `skip_final_extraction` is set.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::backends::{derive_seed, BackendConfig, Backends, ExtractionOptions, ImagePayload, Representation};
use crate::clustering::{self, ClusterSet};
use crate::embedding::{self, Embedding};
use crate::projection;

pub const RUNLOG_SCHEMA_VERSION: u32 = 1;
pub const REPRESENTATIVES_PER_CLUSTER: usize = 5;

const STREAM_GENERATE: u64 = 1;
const STREAM_CLUSTER: u64 = 2;
const STREAM_RANDOM_PICK: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    /// Fixed threshold on the statistic.
    Absolute(f64),
    /// Threshold is this fraction of the first iteration's statistic.
    AdaptiveFraction(f64),
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence::AdaptiveFraction(0.8)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Auto,
    Manual,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Train on `d_size_c` uniformly drawn samples instead of a cluster.
    pub no_clustering: bool,
    pub single_iteration: bool,
    /// Always refine from the initial representation.
    pub reinit: bool,
    pub no_lora: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub prompt: String,
    #[serde(default = "defaults::n_images")]
    pub n_images: usize,
    #[serde(default = "defaults::five")]
    pub d_min_c: usize,
    #[serde(default = "defaults::five")]
    pub d_size_c: usize,
    #[serde(default)]
    pub convergence: Convergence,
    #[serde(default = "defaults::d_iter")]
    pub d_iter: usize,
    #[serde(default)]
    pub selection_mode: SelectionMode,
    #[serde(default)]
    pub ablations: Ablations,
    /// Drawn at random and recorded when absent.
    #[serde(default)]
    pub rng_seed: Option<u64>,
    #[serde(default = "defaults::extraction_steps")]
    pub extraction_steps: u32,
    #[serde(default)]
    pub skip_final_extraction: bool,
    #[serde(default = "defaults::selection_timeout_secs")]
    pub selection_timeout_secs: u64,
    /// Record per-iteration embedding sidecar paths in the log.
    #[serde(default = "defaults::yes")]
    pub spill_embeddings: bool,
}

mod defaults {
    pub fn n_images() -> usize {
        128
    }
    pub fn five() -> usize {
        5
    }
    pub fn d_iter() -> usize {
        10
    }
    pub fn extraction_steps() -> u32 {
        500
    }
    pub fn selection_timeout_secs() -> u64 {
        30 * 60
    }
    pub fn yes() -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid config: {}", .errors.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
pub struct ConfigError {
    pub errors: Vec<FieldError>,
}

impl ConfigError {
    pub fn single(field: &str, message: impl Into<String>) -> Self {
        Self {
            errors: vec![FieldError {
                field: field.into(),
                message: message.into(),
            }],
        }
    }
}

impl RunConfig {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            n_images: defaults::n_images(),
            d_min_c: 5,
            d_size_c: 5,
            convergence: Convergence::default(),
            d_iter: defaults::d_iter(),
            selection_mode: SelectionMode::Auto,
            ablations: Ablations::default(),
            rng_seed: None,
            extraction_steps: defaults::extraction_steps(),
            skip_final_extraction: false,
            selection_timeout_secs: defaults::selection_timeout_secs(),
            spill_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let mut bad = |field: &str, message: String| {
            errors.push(FieldError {
                field: field.into(),
                message,
            })
        };
        if self.prompt.trim().is_empty() {
            bad("prompt", "must not be empty".into());
        }
        if self.n_images == 0 {
            bad("n_images", "must be positive".into());
        }
        if self.d_size_c == 0 {
            bad("d_size_c", "must be positive".into());
        } else if self.d_size_c > self.n_images {
            bad(
                "d_size_c",
                format!("must not exceed n_images ({} > {})", self.d_size_c, self.n_images),
            );
        }
        if self.d_iter == 0 {
            bad("d_iter", "must be at least 1".into());
        }
        if self.extraction_steps == 0 {
            bad("extraction_steps", "must be positive".into());
        }
        match self.convergence {
            Convergence::AdaptiveFraction(f) if !(f > 0.0 && f < 1.0) => {
                bad("convergence.adaptive_fraction", format!("must be in (0, 1), got {f}"))
            }
            Convergence::Absolute(d) if !(d >= 0.0 && d.is_finite()) => {
                bad("convergence.absolute", format!("must be finite and non-negative, got {d}"))
            }
            _ => {}
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { errors })
        }
    }

    /// `k` handed to k-means++.
    pub fn cluster_count(&self) -> usize {
        self.n_images / self.d_size_c
    }
}

/// Threshold on the statistic given the first iteration's value.
pub fn convergence_threshold(config: &RunConfig, first_stat: f64) -> f64 {
    match config.convergence {
        Convergence::Absolute(d) => d,
        Convergence::AdaptiveFraction(f) => f * first_stat,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSource {
    Auto,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: usize,
    pub size: usize,
    pub cohesion: f64,
    /// False when the cluster was removed by the minimum-size filter.
    pub eligible: bool,
    /// Members nearest the centroid, nearest first.
    pub representative_ids: Vec<String>,
    pub member_ids: Vec<String>,
    pub centroid_2d: [f64; 2],
    pub member_points_2d: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub generation_seed: u64,
    pub convergence_stat: f64,
    pub threshold_in_effect: f64,
    pub k_requested: Option<usize>,
    pub clustering_seed: Option<u64>,
    /// Absent when clustering is ablated.
    pub cluster_summaries: Option<Vec<ClusterSummary>>,
    pub chosen_cluster: Option<usize>,
    pub chosen_payload_ids: Vec<String>,
    pub selection_source: SelectionSource,
    pub representation_before: String,
    /// Representation refined by this iteration's extraction.
    pub extraction_base: Option<String>,
    pub representation_after: Option<String>,
    pub embeddings_file: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIterations,
    NoEligibleCluster,
    BackendFailure,
    SelectionTimeout,
    InvalidSelection,
    Interrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub run_id: String,
    pub started_at_ms: Option<u64>,
    pub finished_at_ms: Option<u64>,
    pub config: RunConfig,
    pub backend: Option<BackendConfig>,
    pub embedding_dim: Option<usize>,
    pub iterations: Vec<IterationRecord>,
    /// Absent while the run is in progress.
    pub status: Option<RunStatus>,
    pub error: Option<String>,
    pub final_representation: Option<String>,
}

impl RunLog {
    /// Copy with run id and wall-clock fields cleared, for comparisons.
    pub fn without_volatile(&self) -> Self {
        Self {
            run_id: String::new(),
            started_at_ms: None,
            finished_at_ms: None,
            ..self.clone()
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("run log serializes")
    }

    pub fn last_stat(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.convergence_stat)
    }
}

/// Relative sidecar path for an iteration's embeddings.
pub fn embeddings_file_name(iteration: usize) -> String {
    format!("embeddings/iteration-{iteration:03}.f32")
}

/// Writes `set` as little-endian f32, row-major `[N x D]`.
pub fn write_embeddings_sidecar(path: &Path, set: &[Embedding]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(set.len() * set.first().map_or(0, Embedding::dim) * 4);
    for e in set {
        for x in e.to_f32() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)
}

pub fn read_embeddings_sidecar(path: &Path, dim: usize) -> std::io::Result<Vec<Vec<f32>>> {
    let bytes = std::fs::read(path)?;
    if dim == 0 || bytes.len() % (4 * dim) != 0 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{} bytes is not a whole number of {dim}-float rows", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4 * dim)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect())
}

/// What a selector sees when asked to choose a cluster.
#[derive(Debug, Clone)]
pub struct SelectionRequest {
    pub iteration: usize,
    /// Every cluster of the iteration, filtered ones marked ineligible.
    pub clusters: Vec<ClusterSummary>,
    /// The most cohesive eligible cluster.
    pub suggested: usize,
}

impl SelectionRequest {
    pub fn is_selectable(&self, cluster_id: usize) -> bool {
        self.clusters.iter().any(|c| c.id == cluster_id && c.eligible)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub cluster_id: usize,
    pub source: SelectionSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectionError {
    #[error("timed out waiting for a cluster selection")]
    Timeout,
    #[error("run cancelled while waiting for a selection")]
    Cancelled,
    #[error("cluster {0} is not selectable")]
    Invalid(usize),
}

pub trait ClusterSelector: Send {
    fn select(&mut self, request: &SelectionRequest) -> Result<Selection, SelectionError>;
}

/// Picks the most cohesive eligible cluster.
#[derive(Debug, Default, Clone, Copy)]
pub struct MostCohesive;

impl ClusterSelector for MostCohesive {
    fn select(&mut self, request: &SelectionRequest) -> Result<Selection, SelectionError> {
        Ok(Selection {
            cluster_id: request.suggested,
            source: SelectionSource::Auto,
        })
    }
}

/// Automatic selection with per-iteration overrides.
#[derive(Debug, Default, Clone)]
pub struct ForcedSelector {
    pub overrides: std::collections::BTreeMap<usize, usize>,
}

impl ForcedSelector {
    pub fn new(overrides: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            overrides: overrides.into_iter().collect(),
        }
    }
}

impl ClusterSelector for ForcedSelector {
    fn select(&mut self, request: &SelectionRequest) -> Result<Selection, SelectionError> {
        let cluster_id = self.overrides.get(&request.iteration).copied().unwrap_or(request.suggested);
        if !request.is_selectable(cluster_id) {
            return Err(SelectionError::Invalid(cluster_id));
        }
        Ok(Selection {
            cluster_id,
            source: SelectionSource::Auto,
        })
    }
}

/// Blocks on a channel of cluster ids fed by a human-facing front end.
///
/// Ids that are not selectable for the pending iteration are ignored.
pub struct ChannelSelector {
    rx: Receiver<usize>,
    timeout: Duration,
    cancel: Option<Arc<AtomicBool>>,
}

impl ChannelSelector {
    pub fn new(rx: Receiver<usize>, timeout: Duration) -> Self {
        Self { rx, timeout, cancel: None }
    }

    pub fn with_cancel(mut self, cancel: Arc<AtomicBool>) -> Self {
        self.cancel = Some(cancel);
        self
    }
}

impl ClusterSelector for ChannelSelector {
    fn select(&mut self, request: &SelectionRequest) -> Result<Selection, SelectionError> {
        let deadline = Instant::now() + self.timeout;
        loop {
            if self.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst)) {
                return Err(SelectionError::Cancelled);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(SelectionError::Timeout);
            }
            match self.rx.recv_timeout(left.min(Duration::from_millis(100))) {
                Ok(id) if request.is_selectable(id) => {
                    return Ok(Selection {
                        cluster_id: id,
                        source: SelectionSource::Manual,
                    })
                }
                Ok(id) => warn!(iteration = request.iteration, "ignoring unselectable cluster {id}"),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Err(SelectionError::Cancelled),
            }
        }
    }
}

/// Progress hooks; every method defaults to a no-op.
pub trait RunObserver: Send {
    fn run_started(&mut self, _log: &RunLog) {}
    fn awaiting_selection(&mut self, _request: &SelectionRequest) {}
    fn selection_resolved(&mut self, _iteration: usize) {}
    fn iteration_completed(&mut self, _record: &IterationRecord, _embeddings: &[Embedding], _payloads: &[ImagePayload]) {}
    fn run_finished(&mut self, _log: &RunLog) {}
}

#[derive(Debug, Default)]
pub struct NoopObserver;

impl RunObserver for NoopObserver {}

impl<T: RunObserver + ?Sized> RunObserver for &mut T {
    fn run_started(&mut self, log: &RunLog) {
        (**self).run_started(log)
    }
    fn awaiting_selection(&mut self, request: &SelectionRequest) {
        (**self).awaiting_selection(request)
    }
    fn selection_resolved(&mut self, iteration: usize) {
        (**self).selection_resolved(iteration)
    }
    fn iteration_completed(&mut self, record: &IterationRecord, embeddings: &[Embedding], payloads: &[ImagePayload]) {
        (**self).iteration_completed(record, embeddings, payloads)
    }
    fn run_finished(&mut self, log: &RunLog) {
        (**self).run_finished(log)
    }
}

/// Writes each iteration's embedding sidecar under a root directory.
#[derive(Debug)]
pub struct SidecarWriter {
    root: std::path::PathBuf,
    pub error: Option<std::io::Error>,
}

impl SidecarWriter {
    pub fn new(root: impl Into<std::path::PathBuf>) -> Self {
        Self {
            root: root.into(),
            error: None,
        }
    }
}

impl RunObserver for SidecarWriter {
    fn iteration_completed(&mut self, record: &IterationRecord, embeddings: &[Embedding], _payloads: &[ImagePayload]) {
        let Some(rel) = &record.embeddings_file else { return };
        if self.error.is_some() {
            return;
        }
        if let Err(e) = write_embeddings_sidecar(&self.root.join(rel), embeddings) {
            warn!("failed to write {rel}: {e}");
            self.error = Some(e);
        }
    }
}

/// Runs one configured pipeline to completion.
pub struct Coordinator<'a> {
    config: RunConfig,
    backends: Backends<'a>,
    selector: Option<Box<dyn ClusterSelector + 'a>>,
    observer: Box<dyn RunObserver + 'a>,
    cancel: Arc<AtomicBool>,
    run_id: String,
    backend_config: Option<BackendConfig>,
}

impl<'a> Coordinator<'a> {
    pub fn new(config: RunConfig, backends: Backends<'a>) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            config,
            backends,
            selector: None,
            observer: Box::new(NoopObserver),
            cancel: Arc::new(AtomicBool::new(false)),
            run_id: String::new(),
            backend_config: None,
        })
    }

    pub fn with_selector(mut self, selector: impl ClusterSelector + 'a) -> Self {
        self.selector = Some(Box::new(selector));
        self
    }

    pub fn with_observer(mut self, observer: impl RunObserver + 'a) -> Self {
        self.observer = Box::new(observer);
        self
    }

    pub fn with_cancel(mut self, cancel: Arc<AtomicBool>) -> Self {
        self.cancel = cancel;
        self
    }

    pub fn with_run_id(mut self, run_id: impl Into<String>) -> Self {
        self.run_id = run_id.into();
        self
    }

    pub fn with_backend_config(mut self, backend: BackendConfig) -> Self {
        self.backend_config = Some(backend);
        self
    }

    pub fn run(mut self) -> RunLog {
        let seed = *self.config.rng_seed.get_or_insert_with(|| rand::rng().random());
        let started = now_ms();
        if self.run_id.is_empty() {
            self.run_id = format!("run-{started}-{:08x}", derive_seed(seed, started) as u32);
        }
        let mut log = RunLog {
            schema_version: RUNLOG_SCHEMA_VERSION,
            run_id: self.run_id.clone(),
            started_at_ms: Some(started),
            finished_at_ms: None,
            config: self.config.clone(),
            backend: self.backend_config.clone(),
            embedding_dim: None,
            iterations: Vec::new(),
            status: None,
            error: None,
            final_representation: None,
        };
        self.observer.run_started(&log);

        let mut selector: Box<dyn ClusterSelector + 'a> = match (self.selector.take(), self.config.selection_mode) {
            (Some(s), _) => s,
            (None, SelectionMode::Auto) => Box::new(MostCohesive),
            (None, SelectionMode::Manual) => {
                return self.finish(
                    log,
                    RunStatus::SelectionTimeout,
                    Some("manual selection requested but no selection channel attached".into()),
                    None,
                )
            }
        };

        let initial = self.backends.generator.initial_representation();
        let mut current = initial.clone();
        let mut threshold = None;

        for i in 0..self.config.d_iter {
            if self.cancel.load(Ordering::SeqCst) {
                return self.finish(log, RunStatus::Interrupted, None, None);
            }
            match self.iteration(i, seed, &initial, &current, &mut threshold, selector.as_mut(), &mut log) {
                Ok(Step::Continue(next)) => {
                    current = next;
                    if self.config.ablations.single_iteration {
                        return self.finish(log, RunStatus::MaxIterations, None, Some(current));
                    }
                }
                Ok(Step::Converged(next)) => return self.finish(log, RunStatus::Converged, None, Some(next)),
                Err((status, message)) => return self.finish(log, status, Some(message), None),
            }
        }
        self.finish(log, RunStatus::MaxIterations, None, Some(current))
    }

    fn finish(
        &mut self,
        mut log: RunLog,
        status: RunStatus,
        error: Option<String>,
        last: Option<Representation>,
    ) -> RunLog {
        log.status = Some(status);
        log.error = error;
        log.final_representation = last.map(|r| r.handle);
        log.finished_at_ms = Some(now_ms());
        info!(run_id = %log.run_id, ?status, iterations = log.iterations.len(), "run finished");
        self.observer.run_finished(&log);
        log
    }

    #[allow(clippy::too_many_arguments)]
    fn iteration(
        &mut self,
        i: usize,
        seed: u64,
        initial: &Representation,
        current: &Representation,
        threshold: &mut Option<f64>,
        selector: &mut dyn ClusterSelector,
        log: &mut RunLog,
    ) -> Result<Step, (RunStatus, String)> {
        let cfg = &self.config;
        let backend_failure = |e: crate::backends::BackendError| (RunStatus::BackendFailure, e.to_string());

        let generation_seed = derive_seed(seed, STREAM_GENERATE << 32 | i as u64);
        let payloads = self
            .backends
            .generator
            .generate(current, &cfg.prompt, cfg.n_images, generation_seed)
            .map_err(backend_failure)?;
        let set = self.backends.embedder.embed(&payloads).map_err(backend_failure)?;
        let dim = embedding::uniform_dim(&set).map_err(|e| (RunStatus::BackendFailure, e.to_string()))?;
        if *log.embedding_dim.get_or_insert(dim) != dim {
            return Err((
                RunStatus::BackendFailure,
                format!("embedding dimension changed from {:?} to {dim}", log.embedding_dim),
            ));
        }

        let stat = embedding::mean_pairwise_sq_dist(&set).map_err(|e| (RunStatus::BackendFailure, e.to_string()))?;
        let threshold_in_effect = *threshold.get_or_insert_with(|| convergence_threshold(cfg, stat));
        let converged = stat <= threshold_in_effect;
        debug!(iteration = i, stat, threshold_in_effect, "measured dispersion");

        let mut record = IterationRecord {
            index: i,
            generation_seed,
            convergence_stat: stat,
            threshold_in_effect,
            k_requested: None,
            clustering_seed: None,
            cluster_summaries: None,
            chosen_cluster: None,
            chosen_payload_ids: Vec::new(),
            selection_source: SelectionSource::Auto,
            representation_before: current.handle.clone(),
            extraction_base: None,
            representation_after: None,
            embeddings_file: cfg.spill_embeddings.then(|| embeddings_file_name(i)),
        };

        let chosen: Vec<usize> = if cfg.ablations.no_clustering {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_RANDOM_PICK << 32 | i as u64));
            index::sample(&mut rng, payloads.len(), cfg.d_size_c).into_vec()
        } else {
            let k = cfg.cluster_count();
            let clustering_seed = derive_seed(seed, STREAM_CLUSTER << 32 | i as u64);
            let clusters = clustering::kmeans_pp(&set, k, clustering_seed)
                .map_err(|e| (RunStatus::BackendFailure, e.to_string()))?;
            let eligible = clustering::filter_small(&clusters, cfg.d_min_c);
            let summaries = summarize(&set, &payloads, &clusters, &eligible)
                .map_err(|e| (RunStatus::BackendFailure, e.to_string()))?;
            record.k_requested = Some(k);
            record.clustering_seed = Some(clustering_seed);
            record.cluster_summaries = Some(summaries.clone());

            let Ok(best) = clustering::select_most_cohesive(&eligible) else {
                let message = format!(
                    "all {} clusters have at most {} members",
                    clusters.clusters.len(),
                    cfg.d_min_c
                );
                self.observer.iteration_completed(&record, &set, &payloads);
                log.iterations.push(record);
                return Err((RunStatus::NoEligibleCluster, message));
            };

            let request = SelectionRequest {
                iteration: i,
                clusters: summaries,
                suggested: best.id,
            };
            if cfg.selection_mode == SelectionMode::Manual {
                self.observer.awaiting_selection(&request);
            }
            let selection = selector.select(&request);
            if cfg.selection_mode == SelectionMode::Manual {
                self.observer.selection_resolved(i);
            }
            let selection = selection.map_err(|e| match e {
                SelectionError::Timeout => (RunStatus::SelectionTimeout, e.to_string()),
                SelectionError::Cancelled => (RunStatus::Interrupted, e.to_string()),
                SelectionError::Invalid(_) => (RunStatus::InvalidSelection, e.to_string()),
            })?;
            let cluster = eligible
                .get(selection.cluster_id)
                .ok_or_else(|| (RunStatus::InvalidSelection, format!("cluster {} is not selectable", selection.cluster_id)))?;
            record.chosen_cluster = Some(cluster.id);
            record.selection_source = selection.source;
            cluster.members.clone()
        };
        record.chosen_payload_ids = chosen.iter().map(|&m| payloads[m].id.clone()).collect();

        let next = if converged && cfg.skip_final_extraction {
            current.clone()
        } else {
            let base = if cfg.ablations.reinit { initial } else { current };
            let training: Vec<ImagePayload> = chosen.iter().map(|&m| payloads[m].clone()).collect();
            let options = ExtractionOptions {
                steps: cfg.extraction_steps,
                use_lora: !cfg.ablations.no_lora,
            };
            let next = self
                .backends
                .extractor
                .extract_identity(base, &cfg.prompt, &training, &options)
                .map_err(backend_failure)?;
            record.extraction_base = Some(base.handle.clone());
            record.representation_after = Some(next.handle.clone());
            next
        };

        self.observer.iteration_completed(&record, &set, &payloads);
        log.iterations.push(record);
        Ok(if converged { Step::Converged(next) } else { Step::Continue(next) })
    }
}

enum Step {
    Continue(Representation),
    Converged(Representation),
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn summarize(
    set: &[Embedding],
    payloads: &[ImagePayload],
    all: &ClusterSet,
    eligible: &ClusterSet,
) -> Result<Vec<ClusterSummary>, embedding::EmbeddingError> {
    let pca = projection::pca_2d(set)?;
    Ok(all
        .clusters
        .iter()
        .map(|c| {
            let mut by_distance: Vec<(f64, usize)> = c
                .members
                .iter()
                .map(|&m| (embedding::sq_dist(set[m].values(), c.centroid.values()), m))
                .collect();
            by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ClusterSummary {
                id: c.id,
                size: c.size(),
                cohesion: c.cohesion,
                eligible: eligible.get(c.id).is_some(),
                representative_ids: by_distance
                    .iter()
                    .take(REPRESENTATIVES_PER_CLUSTER)
                    .map(|&(_, m)| payloads[m].id.clone())
                    .collect(),
                member_ids: c.members.iter().map(|&m| payloads[m].id.clone()).collect(),
                centroid_2d: pca.project(c.centroid.values()),
                member_points_2d: c.members.iter().map(|&m| pca.coords[m]).collect(),
            }
        })
        .collect())
}

/// Runs `config` with automatic selection and no observer.
pub fn run(config: RunConfig, backends: Backends<'_>) -> Result<RunLog, ConfigError> {
    Ok(Coordinator::new(config, backends)?.run())
}
