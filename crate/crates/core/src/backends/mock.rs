//! In-process test doubles that implement the client traits directly.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;

use super::{BackendError, ChatClient, ChatRequest, ChatResponse, ClassifierVerdict, SlideClassifier};
use crate::domain::SlideRef;

type ChatFn = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// A chat client backed by a closure.
pub struct FnChat {
    id: String,
    f: Box<ChatFn>,
    calls: AtomicUsize,
}

impl FnChat {
    pub fn new(
        id: impl Into<String>,
        f: impl Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            f: Box::new(f),
            calls: AtomicUsize::new(0),
        }
    }

    /// Always answers `text`.
    pub fn constant(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(id, move |_| Ok(text.clone()))
    }

    /// Answers from `replies` in call order, then repeats the last one.
    pub fn sequence(id: impl Into<String>, replies: Vec<String>) -> Self {
        let next = Mutex::new(0usize);
        Self::new(id, move |_| {
            let mut i = next.lock().unwrap();
            let r = replies[(*i).min(replies.len() - 1)].clone();
            *i += 1;
            Ok(r)
        })
    }

    /// Always fails with a protocol error.
    pub fn failing(id: impl Into<String>) -> Self {
        let id = id.into();
        let bid = id.clone();
        Self::new(id, move |_| {
            Err(BackendError::ProtocolError {
                backend: bid.clone(),
                reason: "scripted failure".into(),
            })
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ChatClient for FnChat {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.f)(req)?;
        Ok(ChatResponse {
            text,
            backend_id: self.id.clone(),
            latency_ms: 0,
        })
    }
}

type ClassifyFn = dyn Fn(&SlideRef) -> Result<String, BackendError> + Send + Sync;

/// A classifier backed by a closure. Labels are returned as given.
pub struct FnClassifier {
    id: String,
    f: Box<ClassifyFn>,
}

impl FnClassifier {
    pub fn new(
        id: impl Into<String>,
        f: impl Fn(&SlideRef) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            f: Box::new(f),
        }
    }

    pub fn constant(id: impl Into<String>, label: impl Into<String>) -> Self {
        let label = label.into();
        Self::new(id, move |_| Ok(label.clone()))
    }
}

#[async_trait]
impl SlideClassifier for FnClassifier {
    fn id(&self) -> &str {
        &self.id
    }

    async fn classify(&self, slide: &SlideRef) -> Result<ClassifierVerdict, BackendError> {
        Ok(ClassifierVerdict {
            backend_id: self.id.clone(),
            label: (self.f)(slide)?,
            confidence: None,
        })
    }
}
