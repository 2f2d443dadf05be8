//! Backend ports the search talks to. Implementations live in
//! [`crate::gateway`] (HTTP) and [`crate::sim`] (deterministic simulation).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageRef;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("http status {0}")]
    HttpStatus(u16),
    #[error("transport: {0}")]
    Transport(String),
    #[error("invalid image payload: {0}")]
    InvalidImagePayload(String),
    #[error("backend rejected request: {0}")]
    Rejected(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl BackendError {
    /// Transport-level failures that may be retried before a body is accepted.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout | BackendError::HttpStatus(_) | BackendError::Transport(_)
        )
    }
}

/// Which instructor component issued a chat request. HTTP backends ignore
/// it; the simulated backend uses it to pick a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    Analyzer,
    Checker,
    Generator,
}

#[derive(Debug, Clone)]
pub struct ChatRequest<'a> {
    pub role: ChatRole,
    pub system: &'a str,
    pub user: &'a str,
    pub images: &'a [ImageRef],
    pub guided_regex: Option<&'a str>,
}

pub trait ChatPort: Send + Sync {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<String, BackendError>;
}

pub trait ActorPort: Send + Sync {
    fn edit(&self, image: &ImageRef, instruction: &str) -> Result<ImageRef, BackendError>;
}

pub trait EmbedPort: Send + Sync {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError>;
}

/// Returns named perceptual distances, each expected in `[0, 1]`.
pub trait ScorerPort: Send + Sync {
    fn distances(&self, a: &ImageRef, b: &ImageRef) -> Result<BTreeMap<String, f64>, BackendError>;
}

#[derive(Clone)]
pub struct Backends {
    pub actor: Arc<dyn ActorPort>,
    pub chat: Arc<dyn ChatPort>,
    pub embed: Arc<dyn EmbedPort>,
    pub scorer: Arc<dyn ScorerPort>,
}
