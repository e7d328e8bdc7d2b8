//! End-to-end orchestration: routing, expert selection, candidate
//! generation, the three verifications per candidate, selection, summary,
//! deliberation and optional attention-map fusion. Every stage is logged to
//! memory before the next one consumes its output.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::allocation::{
    generate_candidates, route_task, select_models, AllocationError, CandidateResponse, PromptTemplates, RuleTable,
    TaskAssignment,
};
use crate::backends::{BackendRegistry, ChatClient, ClassifierVerdict, RegistryError, SlideClassifier};
use crate::config::{Config, ConfigError, Stage};
use crate::domain::{normalize_weights, ExpertRole, Query, QueryError, ScoreBundle, TaskType, WeightConfig};
use crate::ekv::{self, ConsensusResult, FactAgent, FactReport, PanelResult};
use crate::icv::{self, ClaimExtractor, IcvReport};
use crate::knowledge::{Bm25Index, KnowledgeError, Retriever};
use crate::lexicon::Lexicon;
use crate::memory::{
    ConsensusLog, ExpertLog, FactLog, LogicLog, MemoryError, MemoryStore, Payload, ReasoningLog, SummarizingLog, TaskLog,
};
use crate::summary::{
    self, deliberate, draft_summary, extract_aligned_content, reasoner_prompt, select_best, AnswerDocument,
    DeliberationContext, DeliberationState, FinalAnswer, SummaryError, VerificationRecord,
};
use crate::vizfusion::{self, AttentionMap, FusedMap, VizError};

pub const REFUSAL: &str = "This question is outside the scope of whole-slide image analysis, so no answer was generated.";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error("no backend configured for the {0} role")]
    MissingAgent(&'static str),
    #[error(transparent)]
    Summary(#[from] SummaryError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Fusion(#[from] VizError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    /// When false, timestamps and latencies are recorded as 0.
    pub timestamps: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: None,
            timestamps: true,
        }
    }
}

/// Everything one run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub session_id: String,
    pub query: Query,
    pub task: TaskAssignment,
    pub disabled: Vec<Stage>,
    pub selected_models: Vec<String>,
    pub candidates: Vec<CandidateResponse>,
    pub records: Vec<VerificationRecord>,
    #[serde(rename = "final")]
    pub final_answer: FinalAnswer,
    pub answer: AnswerDocument,
    pub deliberation: Option<DeliberationState>,
    pub fused_map: Option<FusedMap>,
}

impl PipelineRun {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run serializes")
    }
}

/// Deterministic session id from slide, question and seed.
pub fn session_id(query: &Query, seed: Option<u64>) -> String {
    let mut h = Sha256::new();
    h.update(query.slide_ref.as_str().as_bytes());
    h.update([0]);
    h.update(query.question.as_bytes());
    h.update([0]);
    h.update(seed.map_or_else(|| "none".to_string(), |s| s.to_string()).as_bytes());
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    format!("s-{}", &hex[..16])
}

/// Weights with disabled verification stages zeroed, then normalized.
/// `None` when every verification stage carries zero weight.
pub fn effective_weights(w: WeightConfig, disabled: &BTreeSet<Stage>) -> Option<WeightConfig> {
    let zero = |s: Stage, v: f64| if disabled.contains(&s) { 0.0 } else { v };
    let w = WeightConfig::new(zero(Stage::Icv, w.w1), zero(Stage::FactEkv, w.w2), zero(Stage::ConsensusEkv, w.w3));
    normalize_weights(w).ok()
}

struct Verification {
    logic: Option<Result<IcvReport, String>>,
    fact: Option<Result<FactReport, String>>,
    consensus: Option<Result<ConsensusResult, String>>,
}

pub struct Pipeline {
    config: Config,
    registry: BackendRegistry,
    lexicon: Arc<Lexicon>,
    rules: RuleTable,
    templates: PromptTemplates,
    index: Option<Arc<Bm25Index>>,
    memory: Arc<MemoryStore>,
    options: RunOptions,
}

impl Pipeline {
    /// Builds live clients for every configured backend.
    pub fn from_config(config: Config, options: RunOptions) -> Result<Self, PipelineError> {
        let lexicon = config.lexicon()?;
        let registry =
            BackendRegistry::from_descriptors(config.backends.clone(), Arc::new(lexicon.synonyms.clone()), options.seed)?;
        Self::assemble(config, registry, lexicon, options)
    }

    /// Uses clients already registered under the configured ids.
    pub fn with_registry(config: Config, registry: BackendRegistry, options: RunOptions) -> Result<Self, PipelineError> {
        let lexicon = config.lexicon()?;
        Self::assemble(config, registry, lexicon, options)
    }

    fn assemble(config: Config, registry: BackendRegistry, lexicon: Lexicon, options: RunOptions) -> Result<Self, PipelineError> {
        let rules = match &config.routing.rules {
            Some(p) => RuleTable::load(p)?,
            None => RuleTable::builtin(),
        };
        let templates = match &config.prompts.dir {
            Some(d) => PromptTemplates::load_dir(d)?,
            None => PromptTemplates::builtin(),
        };
        let index = match &config.retrieval.index {
            Some(p) => Some(Arc::new(Bm25Index::load(p)?)),
            None => None,
        };
        let memory = if options.timestamps { MemoryStore::new() } else { MemoryStore::new().without_timestamps() };
        Ok(Self {
            config,
            registry,
            lexicon: Arc::new(lexicon),
            rules,
            templates,
            index,
            memory: Arc::new(memory),
            options,
        })
    }

    pub fn with_memory(mut self, memory: Arc<MemoryStore>) -> Self {
        self.memory = memory;
        self
    }

    pub fn with_index(mut self, index: Option<Arc<Bm25Index>>) -> Self {
        self.index = index;
        self
    }

    pub fn memory(&self) -> &Arc<MemoryStore> {
        &self.memory
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn registry(&self) -> &BackendRegistry {
        &self.registry
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn options(&self) -> RunOptions {
        self.options
    }

    fn optional(&self, id: Option<&str>) -> Result<Option<Arc<dyn ChatClient>>, PipelineError> {
        Ok(match id {
            Some(id) => Some(self.registry.chat(id)?),
            None => None,
        })
    }

    /// Runs with the stages disabled in the configuration.
    pub async fn run(&self, query: &Query) -> Result<PipelineRun, PipelineError> {
        let disabled = self.config.pipeline.disable.clone();
        self.run_ablation(query, &disabled).await
    }

    pub async fn run_ablation(&self, query: &Query, disable: &BTreeSet<Stage>) -> Result<PipelineRun, PipelineError> {
        let sid = session_id(query, self.options.seed);
        self.run_in_session(query, &sid, disable).await
    }

    pub async fn run_in_session(
        &self,
        query: &Query,
        sid: &str,
        disable: &BTreeSet<Stage>,
    ) -> Result<PipelineRun, PipelineError> {
        query.validate()?;
        let on = |s: Stage| !disable.contains(&s);
        let agents = &self.config.agents;

        // task routing
        let router = self.optional(agents.router.as_deref())?;
        let (task, routed_by) = if on(Stage::TaskRouting) {
            let routed_by = if self.rules.classify(&query.question).is_some() {
                "rules".to_string()
            } else if let Some(r) = &router {
                format!("router:{}", r.id())
            } else {
                "rules".to_string()
            };
            (route_task(&query.question, &self.rules, router.as_deref()).await?, routed_by)
        } else {
            let t = self.config.routing.default_task;
            (TaskAssignment::new(t, "task routing disabled; configured default task"), "default".to_string())
        };
        self.memory.append(
            sid,
            None,
            Payload::Task(TaskLog {
                assignment: task.clone(),
                routed_by,
            }),
        )?;
        let disabled: Vec<Stage> = disable.iter().copied().collect();
        if task.task_type == TaskType::OutOfScope {
            let final_answer = FinalAnswer {
                text: REFUSAL.into(),
                best_response_index: None,
                phi_total_best: None,
                consensus_round: None,
            };
            return Ok(PipelineRun {
                session_id: sid.to_string(),
                query: query.clone(),
                task,
                disabled,
                selected_models: Vec::new(),
                candidates: Vec::new(),
                records: Vec::new(),
                answer: AnswerDocument::new(&final_answer, None, None),
                final_answer,
                deliberation: None,
                fused_map: None,
            });
        }

        // expert selection and generation
        let zoo: Vec<_> = agents
            .zoo
            .iter()
            .map(|id| {
                self.registry.descriptor(id).cloned().ok_or_else(|| RegistryError::Missing {
                    id: id.clone(),
                    kind: crate::backends::BackendKind::Chat,
                })
            })
            .collect::<Result<_, _>>()?;
        let selected = if on(Stage::ExpertSelection) {
            select_models(task.task_type, &zoo, agents.models_per_task).inspect_err(|e| tracing::error!(session = sid, "{e}"))?
        } else {
            zoo
        };
        let selected_models: Vec<String> = selected.iter().map(|d| d.id.clone()).collect();
        let clients: Vec<Arc<dyn ChatClient>> =
            selected_models.iter().map(|id| self.registry.chat(id)).collect::<Result<_, _>>()?;
        let role = task.expert_role.unwrap_or(ExpertRole::Diagnosis);
        let cap = match self.config.pipeline.parallelism {
            0 => clients.len().max(1),
            n => n,
        };
        let mut candidates = generate_candidates(query, &clients, self.templates.get(role), task.task_type, cap)
            .await
            .inspect_err(|e| tracing::error!(session = sid, "{e}"))?;
        if !self.options.timestamps {
            for c in &mut candidates {
                c.elapsed_ms = 0;
            }
        }
        self.memory.append(
            sid,
            None,
            Payload::Expert(ExpertLog {
                role: task.expert_role,
                selected_models: selected_models.clone(),
                candidates: candidates.clone(),
            }),
        )?;

        // verification
        let weights = effective_weights(self.config.weights, disable);
        let logic_judge = if on(Stage::Icv) {
            Some(self.optional(agents.logic_judge())?.ok_or(PipelineError::MissingAgent("logic judge"))?)
        } else {
            None
        };
        let fact_judge = if on(Stage::FactEkv) {
            Some(self.optional(agents.fact_judge())?.ok_or(PipelineError::MissingAgent("fact judge"))?)
        } else {
            None
        };
        let panel = if on(Stage::ConsensusEkv) && !agents.classifiers.is_empty() {
            let classifiers: Vec<Arc<dyn SlideClassifier>> =
                agents.classifiers.iter().map(|id| self.registry.classifier(id)).collect::<Result<_, _>>()?;
            Some(ekv::poll_classifiers(&classifiers, &query.slide_ref).await)
        } else {
            None
        };
        let claim_extractor = self.optional(agents.claim_extractor.as_deref())?;
        let keyword_extractor = self.optional(agents.keyword_extractor.as_deref())?;
        let type_extractor = self.optional(agents.cancer_type_extractor.as_deref())?;
        let ref_summarizer = self.optional(agents.reference_summarizer.as_deref())?;
        let retriever: Option<&dyn Retriever> = self.index.as_deref().map(|i| i as &dyn Retriever);

        let successes: Vec<(usize, &CandidateResponse)> =
            candidates.iter().enumerate().filter(|(_, c)| c.is_success()).collect();
        let verify = |text: &str| {
            let fact_agent = fact_judge.as_deref().map(|judge| FactAgent {
                lexicon: &self.lexicon,
                judge,
                keyword_extractor: keyword_extractor.as_deref(),
                retriever,
                summarizer: ref_summarizer.as_deref(),
                top_k: self.config.retrieval.top_k,
                summary_budget: self.config.retrieval.summary_budget,
            });
            let verdicts: Option<&[ClassifierVerdict]> = panel.as_ref().map(|p: &PanelResult| p.verdicts.as_slice());
            let extractor = match claim_extractor.as_deref() {
                Some(m) => ClaimExtractor::Model(m),
                None => ClaimExtractor::Sentences,
            };
            let text = text.to_string();
            let logic_judge = logic_judge.clone();
            let type_extractor = type_extractor.clone();
            let lexicon = self.lexicon.clone();
            async move {
                let claims = if logic_judge.is_some() || fact_agent.is_some() {
                    Some(icv::extract_claims(&text, extractor).await.map_err(|e| e.to_string()))
                } else {
                    None
                };
                let logic = async {
                    match (&logic_judge, &claims) {
                        (Some(j), Some(Ok(cs))) => Some(icv::verify_claims(cs.clone(), j.as_ref()).await.map_err(|e| e.to_string())),
                        (Some(_), Some(Err(e))) => Some(Err(format!("claim extraction failed: {e}"))),
                        _ => None,
                    }
                };
                let fact = async {
                    match (&fact_agent, &claims) {
                        (Some(a), Some(Ok(cs))) => Some(a.verify(cs).await.map_err(|e| e.to_string())),
                        (Some(_), Some(Err(e))) => Some(Err(format!("claim extraction failed: {e}"))),
                        _ => None,
                    }
                };
                let consensus = async {
                    match verdicts {
                        Some(v) => Some(
                            ekv::consensus(&text, &lexicon, type_extractor.as_deref(), v).await.map_err(|e| e.to_string()),
                        ),
                        None => None,
                    }
                };
                let (logic, fact, consensus) = futures::join!(logic, fact, consensus);
                Verification { logic, fact, consensus }
            }
        };
        let verifications: Vec<Verification> =
            stream::iter(successes.iter().map(|(_, c)| verify(&c.text))).buffered(cap).collect().await;

        let mut records = Vec::with_capacity(successes.len());
        for (&(idx, cand), v) in successes.iter().zip(verifications) {
            let mut logs_ref = Vec::new();
            let mut flags = Vec::new();
            let mut b = ScoreBundle::default();
            if let Some(r) = &v.logic {
                match r {
                    Ok(rep) => {
                        b.phi_g = rep.phi_g;
                        b.phi_e = rep.phi_e;
                        b.phi_l = rep.phi_l;
                        if rep.clamped_judgments > 0 {
                            flags.push(format!("logic: {} judge scores clamped", rep.clamped_judgments));
                        }
                    }
                    Err(e) => flags.push(format!("logic failed: {e}")),
                }
                logs_ref.push(self.memory.append(
                    sid,
                    Some(idx),
                    Payload::Logic(LogicLog {
                        report: r.as_ref().ok().cloned(),
                        error: r.as_ref().err().cloned(),
                    }),
                )?);
            }
            if let Some(r) = &v.fact {
                match r {
                    Ok(rep) => {
                        b.phi_k = rep.phi_k;
                        if rep.scores.uninformative_prior {
                            flags.push("fact: no reference information, prior used".into());
                        }
                    }
                    Err(e) => flags.push(format!("fact failed: {e}")),
                }
                logs_ref.push(self.memory.append(
                    sid,
                    Some(idx),
                    Payload::Fact(FactLog {
                        report: r.as_ref().ok().cloned(),
                        error: r.as_ref().err().cloned(),
                    }),
                )?);
            }
            if let Some(r) = &v.consensus {
                match r {
                    Ok(c) => {
                        b.phi_a = c.phi_a;
                        b.phi_b = c.phi_b;
                        b.phi_c = c.phi_c;
                        b.phi_c_applicable = c.applicable;
                        if c.panel_failed {
                            flags.push("consensus: every classifier failed".into());
                        }
                    }
                    Err(e) => {
                        b.phi_c_applicable = true;
                        flags.push(format!("consensus failed: {e}"));
                    }
                }
                logs_ref.push(self.memory.append(
                    sid,
                    Some(idx),
                    Payload::Consensus(ConsensusLog {
                        result: r.as_ref().ok().cloned(),
                        panel_failures: panel.as_ref().map(|p| p.failures.clone()).unwrap_or_default(),
                        error: r.as_ref().err().cloned(),
                    }),
                )?);
            }
            b.phi_total = match weights {
                Some(w) => summary::total_score(&b, w).map_err(SummaryError::from)?,
                None => {
                    flags.push("all verification weights are zero".into());
                    0.0
                }
            };
            records.push(VerificationRecord {
                response_index: idx,
                model_id: cand.model_id.clone(),
                scores: b,
                logs_ref,
                flags,
            });
        }

        // selection and summary
        let best_pos = select_best(&records)?;
        self.memory.append(
            sid,
            None,
            Payload::Summarizing(SummarizingLog::Selection {
                records: records.clone(),
                best_index: best_pos,
            }),
        )?;
        let best_record = &records[best_pos];
        let best = &candidates[best_record.response_index];
        let digest = log_digest(&records);
        let summarizer = self.optional(agents.summarizer.as_deref())?;
        let draft = if on(Stage::Summarizing) {
            let others: Vec<(usize, &CandidateResponse)> =
                successes.iter().copied().filter(|(i, _)| *i != best_record.response_index).collect();
            let align_judge = self.optional(agents.alignment_judge.as_deref())?;
            let aligned = extract_aligned_content(best, &others, align_judge.as_deref()).await?;
            let draft = draft_summary(&query.question, &best.text, &aligned, &digest, summarizer.as_deref()).await?;
            self.memory.append(
                sid,
                None,
                Payload::Summarizing(SummarizingLog::Draft {
                    aligned,
                    draft: draft.clone(),
                }),
            )?;
            draft
        } else {
            best.text.clone()
        };

        let fused_map = self.fuse_maps(sid)?;

        let deliberation = if on(Stage::Summarizing) && on(Stage::Reasoning) {
            let reasoners: Vec<Arc<dyn ChatClient>> =
                agents.reasoners.iter().map(|id| self.registry.chat(id)).collect::<Result<_, _>>()?;
            if reasoners.is_empty() {
                return Err(PipelineError::MissingAgent("reasoner"));
            }
            let ctx = DeliberationContext {
                question: &query.question,
                log_digest: &digest,
                r_max: self.config.deliberation.r_max,
                reviser: summarizer.as_deref(),
            };
            let state = deliberate(&draft, &reasoners, ctx).await?;
            for (i, votes) in state.vote_history.iter().enumerate() {
                self.memory.append(
                    sid,
                    None,
                    Payload::Reasoning(ReasoningLog {
                        round: i as u32 + 1,
                        prompt: reasoner_prompt(&query.question, &digest, &state.draft_history[i]),
                        votes: votes.clone(),
                        endorsed: summary::endorsed(votes),
                        revised_draft: state.draft_history.get(i + 1).cloned(),
                    }),
                )?;
            }
            Some(state)
        } else {
            None
        };

        let final_answer = FinalAnswer {
            text: deliberation.as_ref().map_or(draft, |s| s.final_draft().to_string()),
            best_response_index: Some(best_pos),
            phi_total_best: Some(best_record.scores.phi_total),
            consensus_round: deliberation.as_ref().and_then(DeliberationState::consensus_round),
        };
        Ok(PipelineRun {
            session_id: sid.to_string(),
            query: query.clone(),
            task,
            disabled,
            selected_models,
            answer: AnswerDocument::new(&final_answer, Some(best_record.scores), deliberation.as_ref()),
            final_answer,
            records,
            candidates,
            deliberation,
            fused_map,
        })
    }

    fn fuse_maps(&self, sid: &str) -> Result<Option<FusedMap>, PipelineError> {
        let f = &self.config.fusion;
        if f.maps.is_empty() {
            return Ok(None);
        }
        let maps: Vec<AttentionMap> = f.maps.iter().map(|p| AttentionMap::load(p)).collect::<Result<_, _>>()?;
        let fused = vizfusion::fuse(&maps, f.rows, f.cols, f.mode)?;
        if let Some(out) = &f.output {
            vizfusion::render(&fused, out)?;
        }
        self.memory.append(
            sid,
            None,
            Payload::Summarizing(SummarizingLog::Fusion {
                source_ids: fused.source_ids.clone(),
                grid: (fused.rows, fused.cols),
                degenerate: fused.degenerate,
            }),
        )?;
        Ok(Some(fused))
    }
}

/// One line per verified candidate, as handed to the summarizer and the
/// reasoners.
pub fn log_digest(records: &[VerificationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let s = &r.scores;
        let c = if s.phi_c_applicable { format!("{:.4}", s.phi_c) } else { "n/a".into() };
        let _ = write!(
            out,
            "candidate {} ({}): phi_l={:.4} phi_k={:.4} phi_c={c} phi_total={:.4}",
            r.response_index, r.model_id, s.phi_l, s.phi_k, s.phi_total
        );
        if !r.flags.is_empty() {
            let _ = write!(out, " [{}]", r.flags.join("; "));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{FnChat, FnClassifier};
    use crate::backends::{BackendDescriptor, BackendKind, Endpoint};
    use crate::memory::Agent;

    const CFG: &str = r#"
        [agents]
        zoo = ["m0", "m1", "m2"]
        models_per_task = 3
        judge = "judge"
        reasoners = ["r0", "r1", "r2"]
        classifiers = ["c0", "c1"]
    "#;

    fn chat(reg: &mut BackendRegistry, c: FnChat) {
        let id = ChatClient::id(&c).to_string();
        reg.add_chat(BackendDescriptor::new(id, BackendKind::Chat, Endpoint::Hang), Arc::new(c)).unwrap();
    }

    /// Three models whose answers are judged 0.2, 0.9 and 0.4 by the judge.
    fn build(extra: &str) -> Pipeline {
        let mut cfg: Config = toml::from_str(&format!("{extra}\n{CFG}")).unwrap();
        let mut backends = Vec::new();
        for id in ["m0", "m1", "m2", "judge", "r0", "r1", "r2"] {
            backends.push(BackendDescriptor::new(id, BackendKind::Chat, Endpoint::Hang));
        }
        for id in ["c0", "c1"] {
            backends.push(BackendDescriptor::new(id, BackendKind::Classifier, Endpoint::Hang));
        }
        cfg.backends = backends;
        cfg.validate().unwrap();
        let mut reg = BackendRegistry::new();
        chat(&mut reg, FnChat::constant("m0", "Tumor cells show alpha pattern."));
        chat(&mut reg, FnChat::constant("m1", "The tumor is adenocarcinoma with glandular structures."));
        chat(&mut reg, FnChat::constant("m2", "Tumor cells show gamma pattern."));
        chat(
            &mut reg,
            FnChat::new("judge", |r| {
                let k = r.key();
                Ok(if k.contains("alpha") {
                    "0.2"
                } else if k.contains("adenocarcinoma") {
                    "0.9"
                } else {
                    "0.4"
                }
                .into())
            }),
        );
        for id in ["r0", "r1"] {
            chat(&mut reg, FnChat::constant(id, "ENDORSE"));
        }
        chat(&mut reg, FnChat::constant("r2", "REVISE: add grade"));
        for id in ["c0", "c1"] {
            reg.add_classifier(
                BackendDescriptor::new(id, BackendKind::Classifier, Endpoint::Hang),
                Arc::new(FnClassifier::constant(id, "adenocarcinoma")),
            )
            .unwrap();
        }
        Pipeline::with_registry(cfg, reg, RunOptions { seed: Some(7), timestamps: false }).unwrap()
    }

    fn query() -> Query {
        Query::new("slide-1", "What is the histological type of this tumor?").unwrap()
    }

    #[tokio::test]
    async fn argmax_through_the_pipeline() {
        let p = build("");
        let run = p.run(&query()).await.unwrap();
        assert_eq!(run.records.len(), 3);
        assert_eq!(run.final_answer.best_response_index, Some(1));
        assert_eq!(run.final_answer.consensus_round, Some(1));
        for r in &run.records {
            r.scores.check_invariants().unwrap();
            let w = effective_weights(p.config().weights, &BTreeSet::new()).unwrap();
            assert!((summary::total_score(&r.scores, w).unwrap() - r.scores.phi_total).abs() <= 1e-12);
        }
        // only the adenocarcinoma answer names a cancer type
        assert!(run.records[1].scores.phi_c_applicable);
        assert!(!run.records[0].scores.phi_c_applicable);
    }

    #[tokio::test]
    async fn deterministic_json() {
        let a = build("").run(&query()).await.unwrap().to_json();
        let b = build("").run(&query()).await.unwrap().to_json();
        assert_eq!(a, b);
    }

    #[tokio::test]
    async fn stage_order_in_memory() {
        let p = build("");
        let run = p.run(&query()).await.unwrap();
        let entries = p.memory().query(&run.session_id, None);
        let rank = |a: Agent| match a {
            Agent::Task => 0,
            Agent::Expert => 1,
            Agent::Logic | Agent::Fact | Agent::Consensus => 2,
            Agent::Summarizing => 3,
            Agent::Reasoning => 4,
        };
        let ranks: Vec<_> = entries.iter().map(|e| rank(e.agent())).collect();
        assert!(ranks.windows(2).all(|w| w[0] <= w[1]), "{ranks:?}");
        assert_eq!(entries.iter().map(|e| e.seq).collect::<Vec<_>>(), (1..=entries.len() as u64).collect::<Vec<_>>());
    }

    #[tokio::test]
    async fn out_of_scope_short_circuits() {
        let p = build("");
        let q = Query::new("slide-1", "What is the capital of France?").unwrap();
        let run = p.run(&q).await.unwrap();
        assert_eq!(run.final_answer.text, REFUSAL);
        assert!(run.candidates.is_empty() && run.records.is_empty());
        let log = p.memory().query(&run.session_id, None);
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].agent(), Agent::Task);
    }

    #[tokio::test]
    async fn ablations() {
        let p = build("");
        let full = p.run(&query()).await.unwrap();
        let same = build("").run_ablation(&query(), &BTreeSet::new()).await.unwrap();
        assert_eq!(full.to_json(), same.to_json());

        let no_reason = p.run_ablation(&query(), &[Stage::Reasoning].into()).await.unwrap();
        assert!(no_reason.deliberation.is_none());
        assert_eq!(no_reason.final_answer.consensus_round, None);
        let first_draft = &full.deliberation.as_ref().unwrap().draft_history[0];
        assert_eq!(&no_reason.final_answer.text, first_draft);

        let only_c = p.run_ablation(&query(), &[Stage::Icv, Stage::FactEkv].into()).await.unwrap();
        for r in &only_c.records {
            let expect = if r.scores.phi_c_applicable { r.scores.phi_c } else { 0.0 };
            assert_eq!(r.scores.phi_total, expect);
        }

        let raw = p.run_ablation(&query(), &[Stage::Summarizing].into()).await.unwrap();
        assert_eq!(raw.final_answer.text, raw.candidates[1].text);

        let default_task = p.run_ablation(&query(), &[Stage::TaskRouting].into()).await.unwrap();
        assert_eq!(default_task.task.task_type, TaskType::KeyDiagnostic);
    }

    #[tokio::test]
    async fn whole_zoo_when_selection_disabled() {
        let p = build("");
        let r = p.run_ablation(&query(), &[Stage::ExpertSelection].into()).await.unwrap();
        assert_eq!(r.selected_models, ["m0", "m1", "m2"]);
    }

    #[tokio::test]
    async fn failing_judge_zeroes_components() {
        let mut cfg: Config = toml::from_str(CFG).unwrap();
        cfg.agents.reasoners = vec!["m0".into()];
        cfg.agents.classifiers.clear();
        let mut reg = BackendRegistry::new();
        chat(&mut reg, FnChat::constant("m0", "ENDORSE. Tumor is present. Glands are irregular."));
        chat(&mut reg, FnChat::constant("m1", "Tumor is present. Glands are irregular."));
        chat(&mut reg, FnChat::constant("m2", "Tumor is present. Glands are irregular."));
        chat(&mut reg, FnChat::failing("judge"));
        let p = Pipeline::with_registry(cfg, reg, RunOptions { seed: None, timestamps: false }).unwrap();
        let run = p.run(&query()).await.unwrap();
        for r in &run.records {
            assert_eq!(r.scores.phi_l, 0.0);
            // no retrieval configured: φ_k stays at the prior, weighted 1/2
            assert_eq!(r.scores.phi_k, 0.5);
            assert_eq!(r.scores.phi_total, 0.25);
            assert!(r.flags.iter().any(|f| f.starts_with("logic failed")));
        }
        assert_eq!(run.final_answer.best_response_index, Some(0));
    }

    #[test]
    fn session_ids_are_stable() {
        let q = query();
        assert_eq!(session_id(&q, Some(1)), session_id(&q, Some(1)));
        assert_ne!(session_id(&q, Some(1)), session_id(&q, Some(2)));
    }

    #[test]
    fn effective_weight_renormalization() {
        let w = WeightConfig::default();
        let only_c = effective_weights(w, &[Stage::Icv, Stage::FactEkv].into()).unwrap();
        assert_eq!((only_c.w1, only_c.w2, only_c.w3), (0.0, 0.0, 1.0));
        assert!(effective_weights(w, &[Stage::Icv, Stage::FactEkv, Stage::ConsensusEkv].into()).is_none());
    }
}
