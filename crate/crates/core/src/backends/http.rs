//! Blocking JSON client for a remote generation/personalization server.
//!
//! Endpoints: `POST /v1/generate`, `POST /v1/embed`, `POST /v1/extract`.
//! Generate and embed are idempotent and retried with exponential backoff;
//! extract is never retried.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{
    BackendError, Embedder, ExtractionOptions, Generator, IdentityExtractor, ImagePayload, PayloadData,
    Representation,
};
use crate::embedding::Embedding;

/// Feature extractor requested from the embed endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extractor {
    #[default]
    Dinov2,
    Dinov1,
    Clip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpOptions {
    pub url: String,
    /// Handle of the untouched base model on the server.
    pub base_model: String,
    pub extractor: Extractor,
    /// Retries after the first attempt, for generate and embed only.
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for HttpOptions {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8700".into(),
            base_model: "base".into(),
            extractor: Extractor::Dinov2,
            max_retries: 3,
            backoff_ms: 250,
            timeout_secs: 3600,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct GenerateRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub id: String,
    pub uri: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub images: Vec<GeneratedImage>,
}

#[derive(Debug, Serialize)]
pub struct EmbedRequest<'a> {
    pub uris: Vec<&'a str>,
    pub extractor: Extractor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct ExtractRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub image_ids: Vec<&'a str>,
    pub steps: u32,
    pub use_lora: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractResponse {
    pub model: String,
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endpoint {
    Generate,
    Embed,
    Extract,
}

impl Endpoint {
    fn path(self) -> &'static str {
        match self {
            Endpoint::Generate => "/v1/generate",
            Endpoint::Embed => "/v1/embed",
            Endpoint::Extract => "/v1/extract",
        }
    }

    fn idempotent(self) -> bool {
        !matches!(self, Endpoint::Extract)
    }
}

enum Failure {
    Retryable(BackendError),
    Fatal(BackendError),
}

pub struct HttpBackend {
    client: Client,
    options: HttpOptions,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("options", &self.options).finish()
    }
}

impl HttpBackend {
    pub fn new(options: HttpOptions) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(options.timeout_secs))
            .build()
            .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
        Ok(Self { client, options })
    }

    pub fn options(&self) -> &HttpOptions {
        &self.options
    }

    fn map_status(endpoint: Endpoint, status: StatusCode, message: String) -> Failure {
        if endpoint == Endpoint::Extract {
            return match status {
                StatusCode::NOT_FOUND => Failure::Fatal(BackendError::UnknownRepresentation(message)),
                _ => Failure::Fatal(BackendError::TrainingFailed(message)),
            };
        }
        match status {
            StatusCode::NOT_FOUND if endpoint == Endpoint::Generate => {
                Failure::Fatal(BackendError::UnknownRepresentation(message))
            }
            StatusCode::UNPROCESSABLE_ENTITY if endpoint == Endpoint::Embed => {
                Failure::Fatal(BackendError::PayloadUnreadable(message))
            }
            s if s.is_server_error() || s == StatusCode::TOO_MANY_REQUESTS || s == StatusCode::REQUEST_TIMEOUT => {
                Failure::Retryable(BackendError::BackendUnavailable(format!("{s}: {message}")))
            }
            s => Failure::Fatal(BackendError::InvalidRequest(format!("{s}: {message}"))),
        }
    }

    fn attempt<B: Serialize, R: for<'de> Deserialize<'de>>(&self, endpoint: Endpoint, body: &B) -> Result<R, Failure> {
        let url = format!("{}{}", self.options.url.trim_end_matches('/'), endpoint.path());
        let response = match self.client.post(&url).json(body).send() {
            Ok(r) => r,
            Err(e) => {
                let err = BackendError::BackendUnavailable(e.to_string());
                return Err(if e.is_builder() { Failure::Fatal(err) } else { Failure::Retryable(err) });
            }
        };
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| Failure::Retryable(BackendError::BackendUnavailable(e.to_string())))?;
        if !status.is_success() {
            let message = serde_json::from_str::<ErrorBody>(&text)
                .map(|b| b.error)
                .unwrap_or(text);
            return Err(Self::map_status(endpoint, status, message));
        }
        serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(BackendError::BackendUnavailable(format!("malformed response: {e}"))))
    }

    fn call<B: Serialize, R: for<'de> Deserialize<'de>>(&self, endpoint: Endpoint, body: &B) -> Result<R, BackendError> {
        let retries = if endpoint.idempotent() { self.options.max_retries } else { 0 };
        let mut attempt = 0;
        loop {
            match self.attempt(endpoint, body) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(e)) if attempt >= retries => return Err(e),
                Err(Failure::Retryable(e)) => {
                    let delay = self.options.backoff_ms.saturating_mul(1 << attempt.min(16));
                    warn!(endpoint = endpoint.path(), attempt, "retrying after {e}");
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        }
    }
}

impl Generator for HttpBackend {
    fn initial_representation(&self) -> Representation {
        Representation::root(self.options.base_model.clone())
    }

    fn generate(
        &self,
        rep: &Representation,
        prompt: &str,
        count: usize,
        seed: u64,
    ) -> Result<Vec<ImagePayload>, BackendError> {
        let response: GenerateResponse = self.call(
            Endpoint::Generate,
            &GenerateRequest {
                model: &rep.handle,
                prompt,
                count,
                seed,
            },
        )?;
        if response.images.len() != count {
            return Err(BackendError::BackendUnavailable(format!(
                "asked for {count} images, server returned {}",
                response.images.len()
            )));
        }
        Ok(response
            .images
            .into_iter()
            .map(|img| ImagePayload {
                id: img.id,
                data_ref: PayloadData::Uri(img.uri),
                seed,
                prompt: prompt.to_string(),
            })
            .collect())
    }
}

impl Embedder for HttpBackend {
    fn embed(&self, payloads: &[ImagePayload]) -> Result<Vec<Embedding>, BackendError> {
        if payloads.is_empty() {
            return Err(BackendError::InvalidRequest("empty embedding batch".into()));
        }
        let uris = payloads
            .iter()
            .map(|p| match &p.data_ref {
                PayloadData::Uri(u) => Ok(u.as_str()),
                PayloadData::Latent(_) => Err(BackendError::PayloadUnreadable(p.id.clone())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let response: EmbedResponse = self.call(
            Endpoint::Embed,
            &EmbedRequest {
                uris,
                extractor: self.options.extractor,
            },
        )?;
        if response.embeddings.len() != payloads.len() {
            return Err(BackendError::BackendUnavailable(format!(
                "sent {} payloads, received {} embeddings",
                payloads.len(),
                response.embeddings.len()
            )));
        }
        let mut out: Vec<Embedding> = Vec::with_capacity(payloads.len());
        for (raw, p) in response.embeddings.into_iter().zip(payloads) {
            let e = Embedding::normalize(raw).map_err(|_| BackendError::PayloadUnreadable(p.id.clone()))?;
            if let Some(first) = out.first() {
                if first.dim() != e.dim() {
                    return Err(BackendError::DimensionMismatch {
                        expected: first.dim(),
                        found: e.dim(),
                    });
                }
            }
            out.push(e);
        }
        Ok(out)
    }
}

impl IdentityExtractor for HttpBackend {
    fn extract_identity(
        &self,
        rep: &Representation,
        prompt: &str,
        chosen: &[ImagePayload],
        options: &ExtractionOptions,
    ) -> Result<Representation, BackendError> {
        if chosen.is_empty() {
            return Err(BackendError::EmptyCluster);
        }
        let response: ExtractResponse = self.call(
            Endpoint::Extract,
            &ExtractRequest {
                model: &rep.handle,
                prompt,
                image_ids: chosen.iter().map(|p| p.id.as_str()).collect(),
                steps: options.steps,
                use_lora: options.use_lora,
            },
        )?;
        Ok(rep.child(response.model))
    }
}
