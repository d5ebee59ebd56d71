//! Job documents: a run config plus backend selection, as read from config
//! files and `POST /api/runs` bodies.

use std::path::PathBuf;

use serde_json::Value;

use crate::backends::{BackendConfig, BackendKind};
use crate::pipeline::{ConfigError, FieldError, RunConfig};

/// Overrides `backend_options.url` for HTTP backends.
pub const HTTP_URL_ENV: &str = "CF_HTTP_BACKEND_URL";

#[derive(Debug, Clone, PartialEq)]
pub struct JobConfig {
    pub run: RunConfig,
    pub backend: BackendConfig,
    pub output_dir: Option<PathBuf>,
}

impl JobConfig {
    /// Parses a job document strictly: unknown fields anywhere are errors.
    ///
    /// `fallback` is used when the document names no backend.
    pub fn parse(text: &str, fallback: &BackendConfig) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| ConfigError::single("$", format!("malformed JSON at line {} column {}: {e}", e.line(), e.column())))?;
        Self::from_value(value, fallback)
    }

    pub fn from_value(value: Value, fallback: &BackendConfig) -> Result<Self, ConfigError> {
        let Value::Object(mut map) = value else {
            return Err(ConfigError::single("$", "expected a JSON object"));
        };
        let backend_kind = map.remove("backend");
        let backend_options = map.remove("backend_options");
        let output_dir = map.remove("output_dir");

        let mut errors = Vec::new();
        let backend = match backend_kind {
            None => BackendConfig {
                backend_options: backend_options.unwrap_or_else(|| fallback.backend_options.clone()),
                ..fallback.clone()
            },
            Some(kind) => match serde_json::from_value::<BackendKind>(kind) {
                Ok(backend) => BackendConfig {
                    backend,
                    backend_options: backend_options.unwrap_or_else(|| Value::Object(Default::default())),
                },
                Err(e) => {
                    errors.push(FieldError {
                        field: "backend".into(),
                        message: e.to_string(),
                    });
                    BackendConfig::default()
                }
            },
        };
        let output_dir = match output_dir {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(other) => {
                errors.push(FieldError {
                    field: "output_dir".into(),
                    message: format!("expected a path string, got {other}"),
                });
                None
            }
        };

        let run = match serde_path_to_error::deserialize::<_, RunConfig>(Value::Object(map)) {
            Ok(run) => Some(run),
            Err(e) => {
                let path = e.path().to_string();
                errors.push(FieldError {
                    field: if path == "." { "$".into() } else { path },
                    message: e.into_inner().to_string(),
                });
                None
            }
        };
        if let Some(run) = &run {
            if let Err(e) = run.validate() {
                errors.extend(e.errors);
            }
        }
        if errors.is_empty() {
            if let Err(message) = backend.check() {
                errors.push(FieldError {
                    field: "backend_options".into(),
                    message,
                });
            }
        }
        match (run, errors.is_empty()) {
            (Some(run), true) => Ok(Self {
                run,
                backend,
                output_dir,
            }),
            _ => Err(ConfigError { errors }),
        }
    }

    /// Applies the HTTP URL override from the environment, if set.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(HTTP_URL_ENV) {
            apply_url_override(&mut self.backend, &url);
        }
    }
}

pub fn apply_url_override(backend: &mut BackendConfig, url: &str) {
    if backend.backend != BackendKind::Http {
        return;
    }
    if let Value::Object(map) = &mut backend.backend_options {
        map.insert("url".into(), Value::String(url.to_string()));
    } else {
        backend.backend_options = serde_json::json!({ "url": url });
    }
}
