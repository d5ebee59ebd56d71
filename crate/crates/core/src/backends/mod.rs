//! Generation, embedding and identity-extraction capabilities.
//!
//! The pipeline only sees the three traits below. Two implementations ship
//! with the crate: [`simulated::SimulatedBackend`], a mixture of modes on the
//! unit sphere whose extraction step contracts the modes toward the chosen
//! cluster, and [`http::HttpBackend`], a JSON client for a remote
//! diffusion/personalization server. [`stub`] hosts canned fixtures for the
//! HTTP wire protocol.

pub mod http;
pub mod simulated;
pub mod stub;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedding;

pub use http::{Extractor, HttpBackend, HttpOptions};
pub use simulated::{SimulatedBackend, SimulatedGeneratorParams, SimulatedOptions};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("unknown representation `{0}`")]
    UnknownRepresentation(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("payload `{0}` is unreadable")]
    PayloadUnreadable(String),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("identity extraction needs at least one payload")]
    EmptyCluster,
    #[error("training failed: {0}")]
    TrainingFailed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Opaque handle to a generator parameterization owned by a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Representation {
    pub handle: String,
    pub iteration: u32,
    pub parent: Option<String>,
}

impl Representation {
    pub fn root(handle: impl Into<String>) -> Self {
        Self {
            handle: handle.into(),
            iteration: 0,
            parent: None,
        }
    }

    pub fn child(&self, handle: impl Into<String>) -> Self {
        Self {
            handle: handle.into(),
            iteration: self.iteration + 1,
            parent: Some(self.handle.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadData {
    Uri(String),
    Latent(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub id: String,
    pub data_ref: PayloadData,
    pub seed: u64,
    pub prompt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionOptions {
    pub steps: u32,
    pub use_lora: bool,
}

impl Default for ExtractionOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            use_lora: true,
        }
    }
}

pub trait Generator: Send + Sync {
    /// The untouched base parameterization.
    fn initial_representation(&self) -> Representation;

    /// Generates exactly `count` payloads, deterministic in all arguments.
    fn generate(
        &self,
        rep: &Representation,
        prompt: &str,
        count: usize,
        seed: u64,
    ) -> Result<Vec<ImagePayload>, BackendError>;
}

pub trait Embedder: Send + Sync {
    /// One unit-norm embedding per payload, in input order.
    fn embed(&self, payloads: &[ImagePayload]) -> Result<Vec<Embedding>, BackendError>;
}

pub trait IdentityExtractor: Send + Sync {
    /// Refines `rep` on `chosen` and returns the new representation, whose
    /// parent is `rep`.
    fn extract_identity(
        &self,
        rep: &Representation,
        prompt: &str,
        chosen: &[ImagePayload],
        options: &ExtractionOptions,
    ) -> Result<Representation, BackendError>;
}

/// All three capabilities from one provider.
pub trait Backend: Generator + Embedder + IdentityExtractor {}

impl<T: Generator + Embedder + IdentityExtractor> Backend for T {}

/// Borrowed capability set consumed by the coordinator.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub generator: &'a dyn Generator,
    pub embedder: &'a dyn Embedder,
    pub extractor: &'a dyn IdentityExtractor,
}

impl<'a> Backends<'a> {
    pub fn from_backend(backend: &'a dyn Backend) -> Self {
        Self {
            generator: backend,
            embedder: backend,
            extractor: backend,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Simulated,
    Http,
}

/// Backend selection as it appears in config files and run logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend: BackendKind,
    #[serde(default = "empty_object")]
    pub backend_options: serde_json::Value,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Simulated,
            backend_options: empty_object(),
        }
    }
}

impl BackendConfig {
    pub fn simulated(options: &SimulatedOptions) -> Self {
        Self {
            backend: BackendKind::Simulated,
            backend_options: serde_json::to_value(options).expect("options serialize"),
        }
    }

    /// Parses and validates the options without building a backend.
    pub fn check(&self) -> Result<(), String> {
        match self.backend {
            BackendKind::Simulated => {
                let opts: SimulatedOptions =
                    serde_json::from_value(self.backend_options.clone()).map_err(|e| e.to_string())?;
                opts.validate()
            }
            BackendKind::Http => serde_json::from_value::<HttpOptions>(self.backend_options.clone())
                .map(|_| ())
                .map_err(|e| e.to_string()),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>, String> {
        match self.backend {
            BackendKind::Simulated => {
                let opts: SimulatedOptions =
                    serde_json::from_value(self.backend_options.clone()).map_err(|e| e.to_string())?;
                Ok(Arc::new(SimulatedBackend::new(&opts)?))
            }
            BackendKind::Http => {
                let opts: HttpOptions =
                    serde_json::from_value(self.backend_options.clone()).map_err(|e| e.to_string())?;
                Ok(Arc::new(HttpBackend::new(opts).map_err(|e| e.to_string())?))
            }
        }
    }
}

/// SplitMix64 finalizer over `seed + stream`, used to derive independent
/// per-purpose seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
