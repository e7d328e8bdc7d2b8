use std::future::Future;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::Engine;
use rand::rngs::StdRng;
use rand::SeedableRng;

use super::script::Script;
use super::wire;
use super::{
    BackendDescriptor, BackendError, BackendKind, ChatClient, ChatRequest, ChatResponse, ClassifierVerdict, Endpoint,
    SlideClassifier,
};
use crate::domain::SlideRef;
use crate::lexicon::{Lexicon, TermTable};

/// Environment variable holding the bearer token passed to HTTP backends.
pub const TOKEN_ENV: &str = "PATHCOUNCIL_API_TOKEN";

enum Transport {
    Http { client: reqwest::Client, url: String },
    Scripted(Script),
    Hang,
}

enum AttemptError {
    Transient(String),
    Fatal(BackendError),
}

/// A live client for one [`BackendDescriptor`].
pub struct BackendClient {
    desc: BackendDescriptor,
    transport: Transport,
    synonyms: Arc<TermTable>,
    token: Option<String>,
    seed: Option<u64>,
}

impl std::fmt::Debug for BackendClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendClient").field("id", &self.desc.id).finish_non_exhaustive()
    }
}

impl BackendClient {
    pub fn new(desc: BackendDescriptor) -> Result<Self, BackendError> {
        Self::with_synonyms(desc, Arc::new(Lexicon::builtin().synonyms))
    }

    /// Builds a client whose classifier labels are normalized through `synonyms`.
    pub fn with_synonyms(desc: BackendDescriptor, synonyms: Arc<TermTable>) -> Result<Self, BackendError> {
        desc.validate()?;
        let transport = match &desc.endpoint {
            Endpoint::Http(url) => {
                let client = reqwest::Client::builder().build().map_err(|e| BackendError::Config {
                    backend: desc.id.clone(),
                    reason: e.to_string(),
                })?;
                Transport::Http {
                    client,
                    url: url.clone(),
                }
            }
            Endpoint::Script(path) => {
                let script = Script::load(path).map_err(|reason| BackendError::Config {
                    backend: desc.id.clone(),
                    reason,
                })?;
                if script.is_empty() {
                    return Err(BackendError::EmptyScript);
                }
                Transport::Scripted(script)
            }
            Endpoint::Inline(script) => Transport::Scripted(script.clone()),
            Endpoint::Hang => Transport::Hang,
        };
        Ok(Self {
            desc,
            transport,
            synonyms,
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            seed: None,
        })
    }

    /// Seeds the backoff jitter so retry timing is reproducible.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    async fn with_retries<T, F, Fut>(&self, mut op: F) -> Result<(T, u64), BackendError>
    where
        F: FnMut() -> Fut,
        Fut: Future<Output = Result<T, AttemptError>>,
    {
        let start = Instant::now();
        let timeout = Duration::from_millis(self.desc.timeout_ms);
        let attempts = self.desc.max_retries + 1;
        let mut rng = match self.seed {
            Some(s) => StdRng::seed_from_u64(s),
            None => StdRng::from_entropy(),
        };
        let mut only_timeouts = true;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                tokio::time::sleep(self.desc.retry.delay(attempt - 1, &mut rng)).await;
            }
            match tokio::time::timeout(timeout, op()).await {
                Ok(Ok(v)) => return Ok((v, start.elapsed().as_millis() as u64)),
                Ok(Err(AttemptError::Fatal(e))) => return Err(e),
                Ok(Err(AttemptError::Transient(msg))) => {
                    tracing::warn!(backend = %self.desc.id, attempt, "transient failure: {msg}");
                    only_timeouts = false;
                    last = msg;
                }
                Err(_) => {
                    tracing::warn!(backend = %self.desc.id, attempt, "attempt timed out");
                    last = format!("timed out after {} ms", self.desc.timeout_ms);
                }
            }
        }
        if only_timeouts {
            Err(BackendError::Timeout {
                backend: self.desc.id.clone(),
                attempts,
            })
        } else {
            Err(BackendError::Exhausted {
                backend: self.desc.id.clone(),
                attempts,
                last,
            })
        }
    }

    fn protocol(&self, reason: impl Into<String>) -> AttemptError {
        AttemptError::Fatal(BackendError::ProtocolError {
            backend: self.desc.id.clone(),
            reason: reason.into(),
        })
    }

    fn model_name(&self) -> String {
        self.desc.model.clone().unwrap_or_else(|| self.desc.id.clone())
    }

    fn wire_chat(&self, req: &ChatRequest) -> Result<wire::ChatCompletionRequest, BackendError> {
        let image = match &req.image_ref {
            Some(p) => Some(encode_image(p).map_err(BackendError::InvalidRequest)?),
            None => None,
        };
        let mut messages = Vec::with_capacity(req.user_turns.len() + 1);
        if !req.system_prompt.is_empty() {
            messages.push(wire::Message {
                role: "system".into(),
                content: req.system_prompt.clone(),
                image: None,
            });
        }
        for (i, turn) in req.user_turns.iter().enumerate() {
            messages.push(wire::Message {
                role: "user".into(),
                content: turn.clone(),
                image: if i == 0 { image.clone() } else { None },
            });
        }
        Ok(wire::ChatCompletionRequest {
            model: self.model_name(),
            messages,
            max_tokens: req.max_tokens,
            temperature: req.temperature,
        })
    }

    async fn post<B: serde::Serialize + ?Sized>(
        &self,
        client: &reqwest::Client,
        url: &str,
        body: &B,
    ) -> Result<reqwest::Response, AttemptError> {
        let mut rb = client.post(url).json(body);
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(t);
        }
        let resp = rb.send().await.map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_success() || status.as_u16() == 404 {
            return Ok(resp);
        }
        if retryable_status(status.as_u16()) {
            Err(AttemptError::Transient(format!("HTTP {status}")))
        } else {
            Err(self.protocol(format!("HTTP {status}")))
        }
    }
}

fn retryable_status(code: u16) -> bool {
    matches!(code, 408 | 429 | 500 | 502 | 503 | 504)
}

fn encode_image(path: &Path) -> Result<String, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        _ => "image/png",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

#[async_trait]
impl ChatClient for BackendClient {
    fn id(&self) -> &str {
        &self.desc.id
    }

    async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if self.desc.kind != BackendKind::Chat {
            return Err(BackendError::WrongKind {
                backend: self.desc.id.clone(),
                expected: BackendKind::Chat,
            });
        }
        req.validate()?;
        let (text, latency_ms) = match &self.transport {
            Transport::Scripted(script) => {
                self.with_retries(|| async {
                    script
                        .lookup_chat(req.key())
                        .map(str::to_string)
                        .ok_or_else(|| self.protocol(format!("no scripted reply for key {:?}", req.key())))
                })
                .await?
            }
            Transport::Hang => {
                self.with_retries(std::future::pending::<Result<String, AttemptError>>)
                    .await?
            }
            Transport::Http { client, url } => {
                let body = self.wire_chat(req)?;
                self.with_retries(|| async {
                    let resp = self.post(client, url, &body).await?;
                    if resp.status().as_u16() == 404 {
                        return Err(self.protocol("HTTP 404"));
                    }
                    let reply: wire::ChatCompletionReply = resp
                        .json()
                        .await
                        .map_err(|e| self.protocol(format!("malformed reply: {e}")))?;
                    Ok(reply.text)
                })
                .await?
            }
        };
        Ok(ChatResponse {
            text,
            backend_id: self.desc.id.clone(),
            latency_ms,
        })
    }
}

#[async_trait]
impl SlideClassifier for BackendClient {
    fn id(&self) -> &str {
        &self.desc.id
    }

    async fn classify(&self, slide: &SlideRef) -> Result<ClassifierVerdict, BackendError> {
        if self.desc.kind != BackendKind::Classifier {
            return Err(BackendError::WrongKind {
                backend: self.desc.id.clone(),
                expected: BackendKind::Classifier,
            });
        }
        let unknown = || {
            AttemptError::Fatal(BackendError::UnknownSlide {
                backend: self.desc.id.clone(),
                slide: slide.0.clone(),
            })
        };
        let ((label, confidence), _) = match &self.transport {
            Transport::Scripted(table) => {
                self.with_retries(|| async {
                    table
                        .lookup_exact(slide.as_str())
                        .map(|l| (l.to_string(), None))
                        .ok_or_else(unknown)
                })
                .await?
            }
            Transport::Hang => {
                self.with_retries(std::future::pending::<Result<(String, Option<f64>), AttemptError>>)
                    .await?
            }
            Transport::Http { client, url } => {
                let body = wire::ClassifyRequest {
                    model: self.model_name(),
                    slide_ref: slide.0.clone(),
                };
                self.with_retries(|| async {
                    let resp = self.post(client, url, &body).await?;
                    if resp.status().as_u16() == 404 {
                        return Err(unknown());
                    }
                    let reply: wire::ClassifyReply = resp
                        .json()
                        .await
                        .map_err(|e| self.protocol(format!("malformed reply: {e}")))?;
                    Ok((reply.label, reply.confidence))
                })
                .await?
            }
        };
        let label = self.synonyms.normalize(&label);
        if label.is_empty() {
            return Err(BackendError::ProtocolError {
                backend: self.desc.id.clone(),
                reason: "empty label".into(),
            });
        }
        if let Some(c) = confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(BackendError::ProtocolError {
                    backend: self.desc.id.clone(),
                    reason: format!("confidence {c} outside [0,1]"),
                });
            }
        }
        Ok(ClassifierVerdict {
            backend_id: self.desc.id.clone(),
            label,
            confidence,
        })
    }
}

/// One-shot chat call against a descriptor.
pub async fn chat_complete(backend: &BackendDescriptor, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
    BackendClient::new(backend.clone())?.complete(req).await
}

/// One-shot classification against a descriptor.
pub async fn classify(backend: &BackendDescriptor, slide: &SlideRef) -> Result<ClassifierVerdict, BackendError> {
    BackendClient::new(backend.clone())?.classify(slide).await
}
