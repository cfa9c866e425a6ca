//! Chat-completion backends for the translation stage.
//!
//! A [`ModelSpec`] names a model and an endpoint. The endpoint scheme picks
//! the backend:
//!
//! * `http://` / `https://`: OpenAI-style chat completions, one user message
//!   per prompt;
//! * `replay:PATH`: canned outputs keyed by prompt hash;
//! * `mock:identity`: echoes the source sentence.
//!
//! Remote responses go through an append-only [`ResponseCache`], so a
//! re-run against a warm cache issues no requests.

mod backend;
mod cache;
mod client;
mod matrix;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{load_replay, Backend, MOCK_IDENTITY, REPLAY_PREFIX};
pub use cache::{cache_key, CacheEntry, ResponseCache};
pub use client::{Client, RateLimit, RetryPolicy};
pub use matrix::{plan, run_matrix, MatrixOutcome, PlannedRequest};

pub const DEFAULT_CONCURRENCY: usize = 4;

fn default_concurrency() -> usize {
    DEFAULT_CONCURRENCY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub endpoint: String,
    /// Generation parameters passed through to the provider verbatim.
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
    /// Environment variable holding the bearer token, if the endpoint needs one.
    #[serde(default)]
    pub auth_env: Option<String>,
    /// Maximum requests in flight for this model.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl ModelSpec {
    pub fn new(model_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            endpoint: endpoint.into(),
            params: BTreeMap::new(),
            auth_env: None,
            concurrency: DEFAULT_CONCURRENCY,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.model_id.trim().is_empty() {
            return Err(ClientError::Config("model_id is empty".into()));
        }
        if self.concurrency == 0 {
            return Err(ClientError::Config(format!(
                "{}: concurrency must be at least 1",
                self.model_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("credential variable {var} for {model_id} is not set")]
    MissingCredential { model_id: String, var: String },
    #[error("replay file {path} line {line}: {reason}")]
    Replay { path: String, line: usize, reason: String },
    #[error("cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
