//! Append-only log of agent outputs, one sequence per session, persisted as
//! JSON lines behind a versioned header line.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{CandidateResponse, TaskAssignment};
use crate::domain::ExpertRole;
use crate::ekv::{ClassifierFailure, ConsensusResult, FactReport};
use crate::icv::IcvReport;
use crate::summary::{AlignedSnippet, VerificationRecord, Vote};

pub const LOG_FORMAT: &str = "pathcouncil-memory";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory store is full ({0} entries)")]
    StorageFull(usize),
    #[error("cannot serialize log entry: {0}")]
    SerializationError(String),
    #[error("corrupt log line {0}: {1}")]
    CorruptLine(usize, String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

impl MemoryError {
    /// Line number of a corrupt-line error.
    pub fn line(&self) -> Option<usize> {
        match self {
            MemoryError::CorruptLine(n, _) => Some(*n),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Task,
    Expert,
    Logic,
    Fact,
    Consensus,
    Summarizing,
    Reasoning,
}

impl std::str::FromStr for Agent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "task" => Agent::Task,
            "expert" => Agent::Expert,
            "logic" => Agent::Logic,
            "fact" => Agent::Fact,
            "consensus" => Agent::Consensus,
            "summarizing" => Agent::Summarizing,
            "reasoning" => Agent::Reasoning,
            _ => return Err(format!("unknown agent {s:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub assignment: TaskAssignment,
    /// `rules`, `router:<id>` or `default`.
    pub routed_by: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertLog {
    pub role: Option<ExpertRole>,
    pub selected_models: Vec<String>,
    pub candidates: Vec<CandidateResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicLog {
    pub report: Option<IcvReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactLog {
    pub report: Option<FactReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusLog {
    pub result: Option<ConsensusResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub panel_failures: Vec<ClassifierFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum SummarizingLog {
    Selection {
        records: Vec<VerificationRecord>,
        best_index: usize,
    },
    Draft {
        aligned: Vec<AlignedSnippet>,
        draft: String,
    },
    Fusion {
        source_ids: Vec<String>,
        grid: (usize, usize),
        degenerate: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningLog {
    pub round: u32,
    pub prompt: String,
    pub votes: Vec<Vote>,
    pub endorsed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_draft: Option<String>,
}

/// What an agent logged. The variant fixes the agent kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "agent", content = "payload", rename_all = "snake_case")]
pub enum Payload {
    Task(TaskLog),
    Expert(ExpertLog),
    Logic(LogicLog),
    Fact(FactLog),
    Consensus(ConsensusLog),
    Summarizing(SummarizingLog),
    Reasoning(ReasoningLog),
}

impl Payload {
    pub fn agent(&self) -> Agent {
        match self {
            Payload::Task(_) => Agent::Task,
            Payload::Expert(_) => Agent::Expert,
            Payload::Logic(_) => Agent::Logic,
            Payload::Fact(_) => Agent::Fact,
            Payload::Consensus(_) => Agent::Consensus,
            Payload::Summarizing(_) => Agent::Summarizing,
            Payload::Reasoning(_) => Agent::Reasoning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub session_id: String,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_index: Option<usize>,
    /// Milliseconds since the Unix epoch; 0 when timestamps are suppressed.
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub payload: Payload,
}

impl LogEntry {
    pub fn agent(&self) -> Agent {
        self.payload.agent()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn header_line() -> String {
    serde_json::to_string(&Header {
        format: LOG_FORMAT.into(),
        version: LOG_VERSION,
    })
    .expect("header serializes")
}

#[derive(Default)]
struct Inner {
    entries: Vec<LogEntry>,
    last_seq: HashMap<String, u64>,
    sink: Option<(PathBuf, BufWriter<File>, bool)>,
}

/// Thread-safe append-only store. Appends are serialized by an internal lock,
/// which also makes sequence assignment race-free.
pub struct MemoryStore {
    inner: Mutex<Inner>,
    timestamps: bool,
    capacity: Option<usize>,
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::new()
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> MemoryError {
    MemoryError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        Self {
            inner: Mutex::new(Inner::default()),
            timestamps: true,
            capacity: None,
        }
    }

    /// Suppresses wall-clock timestamps (all entries get 0).
    pub fn without_timestamps(mut self) -> Self {
        self.timestamps = false;
        self
    }

    pub fn with_capacity_limit(mut self, max_entries: usize) -> Self {
        self.capacity = Some(max_entries);
        self
    }

    /// Also writes every appended entry through to `path` (truncated first)
    /// and flushes before `append` returns.
    pub fn with_sink(self, path: &Path) -> Result<Self, MemoryError> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(|e| io_err(path, e))?;
        {
            let mut inner = self.inner.lock().unwrap();
            let had_entries = !inner.entries.is_empty();
            inner.sink = Some((path.to_path_buf(), BufWriter::new(file), false));
            if had_entries {
                let lines: Vec<String> = inner.entries.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
                let (p, w, started) = inner.sink.as_mut().unwrap();
                writeln!(w, "{}", header_line()).map_err(|e| io_err(p, e))?;
                for l in lines {
                    writeln!(w, "{l}").map_err(|e| io_err(p, e))?;
                }
                w.flush().map_err(|e| io_err(p, e))?;
                *started = true;
            }
        }
        Ok(self)
    }

    /// Appends one entry and returns its sequence number within the session.
    pub fn append(&self, session_id: &str, response_index: Option<usize>, payload: Payload) -> Result<u64, MemoryError> {
        let timestamp_ms = if self.timestamps {
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
        } else {
            0
        };
        let mut inner = self.inner.lock().unwrap();
        if let Some(cap) = self.capacity {
            if inner.entries.len() >= cap {
                return Err(MemoryError::StorageFull(cap));
            }
        }
        let seq = inner.last_seq.get(session_id).copied().unwrap_or(0) + 1;
        let entry = LogEntry {
            session_id: session_id.to_string(),
            seq,
            response_index,
            timestamp_ms,
            payload,
        };
        if let Some((path, w, started)) = inner.sink.as_mut() {
            let line = serde_json::to_string(&entry).map_err(|e| MemoryError::SerializationError(e.to_string()))?;
            if !*started {
                writeln!(w, "{}", header_line()).map_err(|e| io_err(path, e))?;
                *started = true;
            }
            writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
            w.flush().map_err(|e| io_err(path, e))?;
        }
        inner.last_seq.insert(session_id.to_string(), seq);
        inner.entries.push(entry);
        Ok(seq)
    }

    /// Entries of `session_id` in sequence order, optionally of one agent.
    pub fn query(&self, session_id: &str, agent: Option<Agent>) -> Vec<LogEntry> {
        let inner = self.inner.lock().unwrap();
        let mut out: Vec<LogEntry> = inner
            .entries
            .iter()
            .filter(|e| e.session_id == session_id && agent.is_none_or(|a| e.agent() == a))
            .cloned()
            .collect();
        out.sort_by_key(|e| e.seq);
        out
    }

    /// Session ids in order of first appearance.
    pub fn sessions(&self) -> Vec<String> {
        let inner = self.inner.lock().unwrap();
        let mut seen = Vec::new();
        for e in &inner.entries {
            if !seen.contains(&e.session_id) {
                seen.push(e.session_id.clone());
            }
        }
        seen
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries in append order.
    pub fn entries(&self) -> Vec<LogEntry> {
        self.inner.lock().unwrap().entries.clone()
    }

    /// The JSON-lines text; empty when the store is.
    pub fn to_jsonl(&self) -> Result<String, MemoryError> {
        let inner = self.inner.lock().unwrap();
        if inner.entries.is_empty() {
            return Ok(String::new());
        }
        let mut out = header_line();
        out.push('\n');
        for e in &inner.entries {
            out.push_str(&serde_json::to_string(e).map_err(|e| MemoryError::SerializationError(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn persist(&self, path: &Path) -> Result<(), MemoryError> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| io_err(path, e))
    }

    /// Reads a log written by [`persist`](Self::persist) or a sink. Stops at
    /// the first corrupt line, reporting its 1-based line number.
    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let store = Self::new();
        {
            let mut inner = store.inner.lock().unwrap();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let n = i + 1;
                let line = line.map_err(|e| MemoryError::CorruptLine(n, e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                if n == 1 {
                    if let Ok(h) = serde_json::from_str::<Header>(&line) {
                        if h.format != LOG_FORMAT || h.version != LOG_VERSION {
                            return Err(MemoryError::CorruptLine(n, format!("unsupported log {} v{}", h.format, h.version)));
                        }
                        continue;
                    }
                }
                let entry: LogEntry = serde_json::from_str(&line).map_err(|e| MemoryError::CorruptLine(n, e.to_string()))?;
                let last = inner.last_seq.get(&entry.session_id).copied().unwrap_or(0);
                if entry.seq != last + 1 {
                    return Err(MemoryError::CorruptLine(
                        n,
                        format!("seq {} follows {} in session {}", entry.seq, last, entry.session_id),
                    ));
                }
                inner.last_seq.insert(entry.session_id.clone(), entry.seq);
                inner.entries.push(entry);
            }
        }
        Ok(store)
    }
}

/// Human-readable rendering of one session's entries.
pub fn render_session(entries: &[LogEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let who = match e.response_index {
            Some(i) => format!("{:?} [candidate {i}]", e.agent()),
            None => format!("{:?}", e.agent()),
        };
        let _ = writeln!(out, "#{:<4} {who}", e.seq);
        let detail = match &e.payload {
            Payload::Task(t) => format!(
                "task {} ({}), via {}: {}",
                t.assignment.task_type.name(),
                t.assignment.task_type.abbreviation(),
                t.routed_by,
                t.assignment.rationale
            ),
            Payload::Expert(x) => {
                let ok = x.candidates.iter().filter(|c| c.is_success()).count();
                format!("models [{}], {ok}/{} candidates answered", x.selected_models.join(", "), x.candidates.len())
            }
            Payload::Logic(l) => match (&l.report, &l.error) {
                (Some(r), _) => format!(
                    "{} claims, phi_g {:.4}, phi_e {:.4}, phi_l {:.4}",
                    r.claims.len(),
                    r.phi_g,
                    r.phi_e,
                    r.phi_l
                ),
                (None, e) => format!("failed: {}", e.as_deref().unwrap_or("unknown error")),
            },
            Payload::Fact(f) => match (&f.report, &f.error) {
                (Some(r), _) => format!(
                    "keywords [{}], {} hits, phi_k {:.4}{}",
                    r.keywords.terms().join(", "),
                    r.hits.len(),
                    r.phi_k,
                    if r.scores.uninformative_prior { " (prior)" } else { "" }
                ),
                (None, e) => format!("failed: {}", e.as_deref().unwrap_or("unknown error")),
            },
            Payload::Consensus(c) => match (&c.result, &c.error) {
                (Some(r), _) if r.applicable => format!(
                    "type {}, phi_a {:.4}, phi_b {:.4}, phi_c {:.4}",
                    r.extracted_type.as_deref().unwrap_or("-"),
                    r.phi_a,
                    r.phi_b,
                    r.phi_c
                ),
                (Some(_), _) => "no cancer type named; not applicable".to_string(),
                (None, e) => format!("failed: {}", e.as_deref().unwrap_or("unknown error")),
            },
            Payload::Summarizing(s) => match s {
                SummarizingLog::Selection { records, best_index } => {
                    let totals: Vec<String> = records.iter().map(|r| format!("{:.4}", r.scores.phi_total)).collect();
                    format!("totals [{}], best record {best_index}", totals.join(", "))
                }
                SummarizingLog::Draft { aligned, .. } => format!("draft with {} aligned snippets", aligned.len()),
                SummarizingLog::Fusion { source_ids, grid, degenerate } => format!(
                    "fused {} maps onto {}x{}{}",
                    source_ids.len(),
                    grid.0,
                    grid.1,
                    if *degenerate { " (constant)" } else { "" }
                ),
            },
            Payload::Reasoning(r) => {
                let votes: Vec<String> = r.votes.iter().map(|v| format!("{}={:?}", v.reasoner_id, v.verdict)).collect();
                format!("round {}: {} -> {}", r.round, votes.join(" "), if r.endorsed { "endorsed" } else { "revise" })
            }
        };
        for line in detail.lines() {
            let _ = writeln!(out, "      {line}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TaskType;
    use crate::icv::{Claim, CompatibilityMatrix};
    use std::sync::Arc;

    fn task() -> Payload {
        Payload::Task(TaskLog {
            assignment: TaskAssignment::new(TaskType::Grading, "rule"),
            routed_by: "rules".into(),
        })
    }

    fn logic(n: usize) -> Payload {
        let matrix = CompatibilityMatrix::from_upper(3, vec![0.1, 1.0 / 3.0, 0.7]).unwrap();
        Payload::Logic(LogicLog {
            report: Some(IcvReport {
                claims: (1..=3).map(|i| Claim::new(i, format!("c{i}"))).collect(),
                matrix,
                validities: vec![0.2; 3],
                phi_g: 0.3,
                phi_e: 0.2,
                phi_l: 0.25,
                clamped_judgments: n,
            }),
            error: None,
        })
    }

    #[test]
    fn sequence_numbers() {
        let m = MemoryStore::new().without_timestamps();
        assert_eq!(m.append("s", None, task()).unwrap(), 1);
        assert_eq!(m.append("s", Some(0), logic(0)).unwrap(), 2);
        assert_eq!(m.append("other", None, task()).unwrap(), 1);
    }

    #[test]
    fn matrix_payload_round_trips_byte_identical() {
        let m = MemoryStore::new().without_timestamps();
        m.append("s", Some(0), logic(1)).unwrap();
        let e = &m.entries()[0];
        let text = serde_json::to_string(e).unwrap();
        let back: LogEntry = serde_json::from_str(&text).unwrap();
        assert_eq!(&back, e);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
        assert!(text.contains(r#""agent":"logic""#));
    }

    #[test]
    fn query_filters() {
        let m = MemoryStore::new();
        m.append("s", Some(0), logic(0)).unwrap();
        m.append("s", Some(0), Payload::Fact(FactLog { report: None, error: Some("x".into()) })).unwrap();
        m.append("s", Some(1), logic(0)).unwrap();
        let l = m.query("s", Some(Agent::Logic));
        assert_eq!(l.iter().map(|e| e.seq).collect::<Vec<_>>(), [1, 3]);
        assert!(m.query("nope", None).is_empty());
        assert_eq!(m.query("s", None).len(), 3);
    }

    #[test]
    fn persist_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let m = MemoryStore::new();
        m.append("s", None, task()).unwrap();
        m.append("s", Some(2), logic(0)).unwrap();
        m.persist(&p).unwrap();
        let back = MemoryStore::load(&p).unwrap();
        assert_eq!(back.query("s", None), m.query("s", None));
        assert_eq!(back.append("s", None, task()).unwrap(), 3);
    }

    #[test]
    fn empty_store_is_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        MemoryStore::new().persist(&p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 0);
        assert!(MemoryStore::load(&p).unwrap().is_empty());
    }

    #[test]
    fn corrupt_line_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let m = MemoryStore::new();
        for _ in 0..3 {
            m.append("s", None, task()).unwrap();
        }
        let text = m.to_jsonl().unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{not json";
        std::fs::write(&p, lines.join("\n")).unwrap();
        let err = MemoryStore::load(&p).err().unwrap();
        assert_eq!(err.line(), Some(3));
    }

    #[test]
    fn sink_writes_through() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("live.jsonl");
        let m = MemoryStore::new().with_sink(&p).unwrap();
        m.append("s", None, task()).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
        m.append("s", None, task()).unwrap();
        assert_eq!(MemoryStore::load(&p).unwrap().len(), 2);
    }

    #[test]
    fn capacity_limit() {
        let m = MemoryStore::new().with_capacity_limit(1);
        m.append("s", None, task()).unwrap();
        assert!(matches!(m.append("s", None, task()), Err(MemoryError::StorageFull(1))));
    }

    #[test]
    fn concurrent_appends_are_contiguous() {
        let m = Arc::new(MemoryStore::new());
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let m = m.clone();
                std::thread::spawn(move || (0..250).map(|_| m.append("s", None, task()).unwrap()).collect::<Vec<_>>())
            })
            .collect();
        let mut all: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort();
        assert_eq!(all, (1..=1000).collect::<Vec<_>>());
    }

    #[test]
    fn rendering_mentions_each_entry() {
        let m = MemoryStore::new();
        m.append("s", None, task()).unwrap();
        m.append("s", Some(0), logic(0)).unwrap();
        let text = render_session(&m.query("s", None));
        assert!(text.contains("#1") && text.contains("Grading") && text.contains("phi_l 0.2500"));
    }
}
