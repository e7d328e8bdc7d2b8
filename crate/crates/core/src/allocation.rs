//! Task agent and expert agents: route a question to a task type, pick the
//! capable models from the zoo and fan the query out to them.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendDescriptor, BackendError, ChatClient, ChatRequest};
use crate::domain::{ExpertRole, Query, TaskType};

pub const DEFAULT_RULES: &str = include_str!("../data/routing_rules.txt");

const DEFAULT_PROMPTS: [(ExpertRole, &str); 4] = [
    (ExpertRole::Morphology, include_str!("../data/prompts/morphology.txt")),
    (ExpertRole::Diagnosis, include_str!("../data/prompts/diagnosis.txt")),
    (ExpertRole::TreatmentPlanning, include_str!("../data/prompts/treatment_planning.txt")),
    (ExpertRole::ReportGeneration, include_str!("../data/prompts/report_generation.txt")),
];

#[derive(Debug, Error)]
pub enum AllocationError {
    #[error("rule table line {line}: {reason}")]
    BadRule { line: usize, reason: String },
    #[error("router backend failed on question {question:?}: {source}")]
    RouterBackendError {
        question: String,
        #[source]
        source: BackendError,
    },
    #[error("question is empty")]
    EmptyQuestion,
    #[error("model count must be at least 1")]
    ZeroModels,
    #[error("no model in the zoo supports {0}")]
    NoEligibleModel(TaskType),
    #[error("no models to dispatch to")]
    NoModels,
    #[error("all {count} backends failed")]
    AllBackendsFailed { count: usize, failures: Vec<String> },
    #[error("prompt template {path}: {reason}")]
    Template { path: String, reason: String },
}

/// Ordered `(regex → TaskType)` rules; the first match wins.
#[derive(Debug, Clone)]
pub struct RuleTable {
    rules: Vec<(Regex, TaskType)>,
}

impl RuleTable {
    /// Parses lines of the form `<regex> => <TaskType>`. Blank lines and
    /// `#` comments are skipped. Patterns match case-insensitively.
    pub fn parse(text: &str) -> Result<Self, AllocationError> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| AllocationError::BadRule { line: i + 1, reason };
            let (pat, task) = line
                .rsplit_once("=>")
                .ok_or_else(|| bad("expected `<regex> => <TaskType>`".into()))?;
            let task: TaskType = task.trim().parse().map_err(|e: crate::domain::UnknownTaskType| bad(e.to_string()))?;
            let re = Regex::new(&format!("(?i){}", pat.trim())).map_err(|e| bad(e.to_string()))?;
            rules.push((re, task));
        }
        Ok(Self { rules })
    }

    pub fn load(path: &Path) -> Result<Self, AllocationError> {
        let text = std::fs::read_to_string(path).map_err(|e| AllocationError::BadRule {
            line: 0,
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_RULES).expect("builtin routing rules")
    }

    /// The first matching rule, as `(task, pattern)`.
    pub fn classify(&self, question: &str) -> Option<(TaskType, &str)> {
        self.rules
            .iter()
            .find(|(re, _)| re.is_match(question))
            .map(|(re, t)| (*t, re.as_str().trim_start_matches("(?i)")))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

impl Default for RuleTable {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub task_type: TaskType,
    /// `None` only for out-of-scope questions.
    pub expert_role: Option<ExpertRole>,
    pub rationale: String,
}

impl TaskAssignment {
    pub fn new(task_type: TaskType, rationale: impl Into<String>) -> Self {
        Self {
            task_type,
            expert_role: task_type.expert_role(),
            rationale: rationale.into(),
        }
    }
}

const ROUTER_SYSTEM: &str = "You route pathology questions about a whole-slide image. Reply with exactly one task type name from this list, or OutOfScope if the question is not about slide analysis: GlobalMorph, KeyDiagnostic, RegionalStructure, SpecificFeature, HistologicalTyping, Grading, MolecularSubtyping, Staging, TreatmentRecommendation, Prognosis, ReportGeneration, OutOfScope.";

/// Routes a question: rules first, then the optional router backend, else
/// out-of-scope.
pub async fn route_task(
    question: &str,
    rules: &RuleTable,
    router: Option<&dyn ChatClient>,
) -> Result<TaskAssignment, AllocationError> {
    if question.trim().is_empty() {
        return Err(AllocationError::EmptyQuestion);
    }
    if let Some((task, pattern)) = rules.classify(question) {
        return Ok(TaskAssignment::new(task, format!("rule `{pattern}` matched")));
    }
    let Some(router) = router else {
        return Ok(TaskAssignment::new(TaskType::OutOfScope, "no routing rule matched"));
    };
    let reply = router
        .complete(&ChatRequest::new(ROUTER_SYSTEM, question).with_max_tokens(16))
        .await
        .map_err(|source| AllocationError::RouterBackendError {
            question: question.to_string(),
            source,
        })?;
    Ok(match parse_task_reply(&reply.text) {
        Some(t) => TaskAssignment::new(t, format!("router {} answered {}", router.id(), t)),
        None => TaskAssignment::new(
            TaskType::OutOfScope,
            format!("router {} reply outside the task vocabulary", router.id()),
        ),
    })
}

/// First token of `reply` naming a task type.
pub fn parse_task_reply(reply: &str) -> Option<TaskType> {
    if let Ok(t) = reply.trim().parse() {
        return Some(t);
    }
    reply
        .split(|c: char| c.is_whitespace() || c == ',' || c == ':' || c == ';')
        .filter(|s| !s.is_empty())
        .find_map(|tok| tok.trim_matches(|c: char| !c.is_ascii_alphanumeric() && c != '.').parse().ok())
}

/// Up to `m` zoo entries supporting `task`, in registry order.
pub fn select_models(
    task: TaskType,
    zoo: &[BackendDescriptor],
    m: usize,
) -> Result<Vec<BackendDescriptor>, AllocationError> {
    if m == 0 {
        return Err(AllocationError::ZeroModels);
    }
    let eligible: Vec<BackendDescriptor> = zoo.iter().filter(|d| d.supports(task)).take(m).cloned().collect();
    if eligible.is_empty() {
        return Err(AllocationError::NoEligibleModel(task));
    }
    Ok(eligible)
}

/// One prompt template per expert role, used as the system prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    by_role: BTreeMap<ExpertRole, String>,
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self {
            by_role: DEFAULT_PROMPTS
                .iter()
                .map(|(r, t)| (*r, t.trim().to_string()))
                .collect(),
        }
    }

    /// Loads `<dir>/<role>.txt` for every role present, falling back to the
    /// builtin text for missing files.
    pub fn load_dir(dir: &Path) -> Result<Self, AllocationError> {
        let mut t = Self::builtin();
        for role in ExpertRole::ALL {
            let p = dir.join(format!("{}.txt", role.slug()));
            if p.exists() {
                let text = std::fs::read_to_string(&p).map_err(|e| AllocationError::Template {
                    path: p.display().to_string(),
                    reason: e.to_string(),
                })?;
                t.by_role.insert(role, text.trim().to_string());
            }
        }
        Ok(t)
    }

    pub fn get(&self, role: ExpertRole) -> &str {
        self.by_role.get(&role).map(String::as_str).unwrap_or("")
    }

    pub fn set(&mut self, role: ExpertRole, text: impl Into<String>) {
        self.by_role.insert(role, text.into());
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

/// One model's answer. A failed dispatch leaves `text` empty and records the
/// error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub model_id: String,
    pub text: String,
    pub task_type: TaskType,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CandidateResponse {
    pub fn is_success(&self) -> bool {
        self.error.is_none() && !self.text.is_empty()
    }
}

/// Builds the generation request for one expert.
pub fn expert_request(query: &Query, template: &str) -> ChatRequest {
    ChatRequest::new(template, query.question.clone()).with_image(query.thumbnail_path.clone())
}

/// Dispatches the query to every model concurrently (at most `parallelism`
/// in flight) and returns one candidate per model, in model order.
pub async fn generate_candidates(
    query: &Query,
    models: &[Arc<dyn ChatClient>],
    template: &str,
    task_type: TaskType,
    parallelism: usize,
) -> Result<Vec<CandidateResponse>, AllocationError> {
    if models.is_empty() {
        return Err(AllocationError::NoModels);
    }
    let req = expert_request(query, template);
    let cap = parallelism.max(1);
    let candidates: Vec<CandidateResponse> = stream::iter(models.iter().cloned())
        .map(|m| {
            let req = req.clone();
            async move {
                match m.complete(&req).await {
                    Ok(r) if !r.text.trim().is_empty() => CandidateResponse {
                        model_id: m.id().to_string(),
                        text: r.text,
                        task_type,
                        elapsed_ms: r.latency_ms,
                        error: None,
                    },
                    Ok(_) => failure(m.id(), task_type, "empty reply".into()),
                    Err(e) => failure(m.id(), task_type, e.to_string()),
                }
            }
        })
        .buffered(cap)
        .collect()
        .await;
    if candidates.iter().all(|c| !c.is_success()) {
        return Err(AllocationError::AllBackendsFailed {
            count: candidates.len(),
            failures: candidates.into_iter().filter_map(|c| c.error).collect(),
        });
    }
    Ok(candidates)
}

fn failure(model_id: &str, task_type: TaskType, error: String) -> CandidateResponse {
    tracing::warn!(model = model_id, "candidate generation failed: {error}");
    CandidateResponse {
        model_id: model_id.to_string(),
        text: String::new(),
        task_type,
        elapsed_ms: 0,
        error: Some(error),
    }
}
