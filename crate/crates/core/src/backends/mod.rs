//! Client abstraction over external model services.
//!
//! Two kinds of backends exist: chat-completion generators (answer
//! generation, judges, extractors, summarizers, reasoners) and slide
//! classifiers. A [`BackendDescriptor`] is a plain, serializable registry
//! entry; [`BackendClient`] turns one into a live client with timeout and
//! retry handling. Scripted endpoints answer from a lookup table without any
//! network access, which is what the test-suite and golden files run on.

mod client;
pub mod mock;
mod registry;
mod retry;
mod script;
pub mod wire;

use std::collections::BTreeSet;
use std::path::PathBuf;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{SlideRef, TaskType};

pub use client::{chat_complete, classify, BackendClient, TOKEN_ENV};
pub use registry::{BackendRegistry, RegistryError};
pub use retry::RetryPolicy;
pub use script::{make_scripted_backend, make_scripted_classifier, Script};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend {backend}: timed out after {attempts} attempt(s)")]
    Timeout { backend: String, attempts: u32 },
    #[error("backend {backend}: protocol error: {reason}")]
    ProtocolError { backend: String, reason: String },
    #[error("backend {backend}: retries exhausted after {attempts} attempt(s): {last}")]
    Exhausted {
        backend: String,
        attempts: u32,
        last: String,
    },
    #[error("backend {backend}: unknown slide {slide}")]
    UnknownSlide { backend: String, slide: String },
    #[error("scripted backend needs at least one entry")]
    EmptyScript,
    #[error("backend {backend} is not a {expected} backend")]
    WrongKind { backend: String, expected: BackendKind },
    #[error("backend {backend}: invalid configuration: {reason}")]
    Config { backend: String, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn backend_id(&self) -> Option<&str> {
        match self {
            BackendError::Timeout { backend, .. }
            | BackendError::ProtocolError { backend, .. }
            | BackendError::Exhausted { backend, .. }
            | BackendError::UnknownSlide { backend, .. }
            | BackendError::WrongKind { backend, .. }
            | BackendError::Config { backend, .. } => Some(backend),
            BackendError::EmptyScript | BackendError::InvalidRequest(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Chat,
    Classifier,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Chat => "chat",
            BackendKind::Classifier => "classifier",
        })
    }
}

/// Where a backend lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// HTTP(S) JSON endpoint.
    Http(String),
    /// JSON file `{key: reply}` (chat) or `{slide_ref: label}` (classifier).
    Script(PathBuf),
    /// Script held inline in the configuration.
    Inline(Script),
    /// Never answers. Useful for exercising timeouts.
    Hang,
}

/// A registry entry for one model service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: String,
    pub kind: BackendKind,
    pub endpoint: Endpoint,
    /// Model name sent on the wire; defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default = "all_tasks")]
    pub supported_tasks: BTreeSet<TaskType>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn all_tasks() -> BTreeSet<TaskType> {
    TaskType::ALL.into_iter().filter(|t| *t != TaskType::OutOfScope).collect()
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    2
}

impl BackendDescriptor {
    pub fn new(id: impl Into<String>, kind: BackendKind, endpoint: Endpoint) -> Self {
        Self {
            id: id.into(),
            kind,
            endpoint,
            model: None,
            supported_tasks: all_tasks(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_tasks(mut self, tasks: impl IntoIterator<Item = TaskType>) -> Self {
        self.supported_tasks = tasks.into_iter().collect();
        self
    }

    pub fn with_timeout(mut self, timeout_ms: u64, max_retries: u32) -> Self {
        self.timeout_ms = timeout_ms;
        self.max_retries = max_retries;
        self
    }

    pub fn supports(&self, task: TaskType) -> bool {
        self.supported_tasks.contains(&task)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |reason: &str| BackendError::Config {
            backend: self.id.clone(),
            reason: reason.into(),
        };
        if self.id.trim().is_empty() {
            return Err(bad("empty id"));
        }
        if self.timeout_ms == 0 {
            return Err(bad("timeout_ms must be positive"));
        }
        if let Endpoint::Inline(s) = &self.endpoint {
            if s.is_empty() {
                return Err(BackendError::EmptyScript);
            }
        }
        self.retry.validate().map_err(|r| bad(&r))
    }
}

/// Chat-completion request as handed to a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_turns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<PathBuf>,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_turns: vec![user.into()],
            image_ref: None,
            max_tokens: 1024,
            temperature: 0.0,
        }
    }

    pub fn with_image(mut self, image: Option<PathBuf>) -> Self {
        self.image_ref = image;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.user_turns.is_empty() {
            return Err(BackendError::InvalidRequest("at least one user turn required".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// The last user turn; scripted backends key on it.
    pub fn key(&self) -> &str {
        self.user_turns.last().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierVerdict {
    pub backend_id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// Anything that answers chat requests.
#[async_trait]
pub trait ChatClient: Send + Sync {
    fn id(&self) -> &str;
    async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Anything that labels a slide. Labels come back already normalized.
#[async_trait]
pub trait SlideClassifier: Send + Sync {
    fn id(&self) -> &str;
    async fn classify(&self, slide: &SlideRef) -> Result<ClassifierVerdict, BackendError>;
}
