//! Summarizing and reasoning agents: total verification score, best-response
//! selection, aligned-content extraction, draft summary and the deliberation
//! rounds that end at a strict-majority endorsement.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::CandidateResponse;
use crate::backends::{BackendError, ChatClient, ChatRequest};
use crate::domain::{check_unit, normalize_weights, ScoreBundle, ScoreError, WeightConfig};
use crate::icv::split_sentences;
use crate::judging;
use crate::knowledge::tokenize;

pub const DEFAULT_R_MAX: u32 = 3;
pub const ALIGNMENT_THRESHOLD: f64 = 0.5;
/// Suggestion recorded for a reasoner that failed or sent no usable vote.
pub const PLACEHOLDER_SUGGESTION: &str = "(no usable suggestion)";

#[derive(Debug, Error)]
pub enum SummaryError {
    #[error("no verification records to select from")]
    NoRecords,
    #[error("at least one reasoner is required")]
    NoReasoners,
    #[error("R_max must be at least 1")]
    BadRoundLimit,
    #[error("alignment judge failed: {0}")]
    JudgeError(#[source] BackendError),
    #[error("summarizer failed: {0}")]
    SummarizerError(#[source] BackendError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// φ_total = w1 φ_l + w2 φ_k + w3 φ_c. When φ_c is not applicable its weight
/// is redistributed over w1 and w2 in proportion, and the total is 0 if
/// w1 + w2 = 0.
pub fn total_score(b: &ScoreBundle, w: WeightConfig) -> Result<f64, ScoreError> {
    let w = normalize_weights(w)?;
    check_unit("phi_l", b.phi_l)?;
    check_unit("phi_k", b.phi_k)?;
    if b.phi_c_applicable {
        check_unit("phi_c", b.phi_c)?;
        return Ok((w.w1 * b.phi_l + w.w2 * b.phi_k + w.w3 * b.phi_c).clamp(0.0, 1.0));
    }
    let rest = w.w1 + w.w2;
    if rest == 0.0 {
        return Ok(0.0);
    }
    Ok((w.w1 / rest * b.phi_l + w.w2 / rest * b.phi_k).clamp(0.0, 1.0))
}

/// Scores and log pointers of one verified candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    /// Index into the candidate list.
    pub response_index: usize,
    pub model_id: String,
    pub scores: ScoreBundle,
    /// Memory sequence numbers of this candidate's verification entries.
    pub logs_ref: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Position in `records` of the best record: highest φ_total, then higher
/// φ_k, then higher φ_c, then lower response index.
pub fn select_best(records: &[VerificationRecord]) -> Result<usize, SummaryError> {
    if records.is_empty() {
        return Err(SummaryError::NoRecords);
    }
    let mut best = 0;
    for (i, r) in records.iter().enumerate().skip(1) {
        let b = &records[best];
        let better = r
            .scores
            .phi_total
            .total_cmp(&b.scores.phi_total)
            .then(r.scores.phi_k.total_cmp(&b.scores.phi_k))
            .then(r.scores.phi_c.total_cmp(&b.scores.phi_c))
            .then(b.response_index.cmp(&r.response_index));
        if better.is_gt() {
            best = i;
        }
    }
    Ok(best)
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "have", "in", "is", "it", "its", "of", "on",
    "or", "that", "the", "this", "to", "was", "were", "which", "with",
];

pub fn content_tokens(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// A sentence of another response that agrees with the best response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSnippet {
    pub response_index: usize,
    pub model_id: String,
    pub text: String,
    pub score: f64,
}

const ALIGN_SYSTEM: &str = "Compare a claim with a reference pathology answer. Reply with a single number in [0,1]: 1 if the claim agrees with the answer, 0 if it is unrelated or conflicts with it.";

/// Sentences of `others` (tagged with their candidate index) that align with
/// `best`, in input order, deduplicated by text.
pub async fn extract_aligned_content(
    best: &CandidateResponse,
    others: &[(usize, &CandidateResponse)],
    judge: Option<&dyn ChatClient>,
) -> Result<Vec<AlignedSnippet>, SummaryError> {
    let best_claims: Vec<BTreeSet<String>> = split_sentences(&best.text).iter().map(|s| content_tokens(s)).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &(idx, other) in others {
        for sentence in split_sentences(&other.text) {
            let score = match judge {
                None => {
                    let toks = content_tokens(&sentence);
                    best_claims.iter().map(|b| jaccard(&toks, b)).fold(0.0, f64::max)
                }
                Some(j) => {
                    let prompt = format!("Answer:\n{}\n\nClaim: {}", best.text, sentence);
                    judging::score(j, ALIGN_SYSTEM, prompt).await.map_err(SummaryError::JudgeError)?.value
                }
            };
            if score >= ALIGNMENT_THRESHOLD && seen.insert(sentence.to_lowercase()) {
                out.push(AlignedSnippet {
                    response_index: idx,
                    model_id: other.model_id.clone(),
                    text: sentence,
                    score,
                });
            }
        }
    }
    Ok(out)
}

const ALIGNED_HEADER: &str = "Supporting findings from other responses:";

const SUMMARIZE_SYSTEM: &str = "You are the summarizing agent of a pathology council. Write the final answer to the question from the best response, the aligned content of the other responses and the verification log digest. Keep it faithful to verified content.";

/// Initial summary. The fallback is the best text followed by one bullet per
/// aligned snippet.
pub async fn draft_summary(
    question: &str,
    best_text: &str,
    aligned: &[AlignedSnippet],
    log_digest: &str,
    summarizer: Option<&dyn ChatClient>,
) -> Result<String, SummaryError> {
    match summarizer {
        None => Ok(with_bullets(best_text, ALIGNED_HEADER, aligned.iter().map(|s| s.text.as_str()))),
        Some(s) => {
            let bullets: String = aligned.iter().map(|a| format!("- {}\n", a.text)).collect();
            let prompt = format!(
                "Question: {question}\n\nBest response:\n{best_text}\n\nAligned content:\n{bullets}\nVerification log digest:\n{log_digest}"
            );
            let reply = s.complete(&ChatRequest::new(SUMMARIZE_SYSTEM, prompt)).await.map_err(SummaryError::SummarizerError)?;
            Ok(reply.text)
        }
    }
}

fn with_bullets<'a>(body: &str, header: &str, items: impl Iterator<Item = &'a str>) -> String {
    let bullets: Vec<String> = items.map(|s| format!("- {s}")).collect();
    if bullets.is_empty() {
        return body.to_string();
    }
    format!("{body}\n\n{header}\n{}", bullets.join("\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Endorse,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub reasoner_id: String,
    pub verdict: Verdict,
    /// Empty exactly when the verdict is Endorse.
    pub suggestion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Vote {
    fn failed(reasoner_id: &str, error: String) -> Self {
        tracing::warn!(reasoner = reasoner_id, "reasoner vote counted as revise: {error}");
        Self {
            reasoner_id: reasoner_id.to_string(),
            verdict: Verdict::Revise,
            suggestion: PLACEHOLDER_SUGGESTION.into(),
            error: Some(error),
        }
    }
}

/// Reads a vote: the first line starts with ENDORSE or REVISE and the rest of
/// the reply is the suggestion.
pub fn parse_vote(reasoner_id: &str, reply: &str) -> Vote {
    let reply = reply.trim_start();
    let (first, rest) = reply.split_once('\n').unwrap_or((reply, ""));
    let head = first.trim_start();
    let upper = head.to_ascii_uppercase();
    if upper.starts_with("ENDORSE") {
        return Vote {
            reasoner_id: reasoner_id.to_string(),
            verdict: Verdict::Endorse,
            suggestion: String::new(),
            error: None,
        };
    }
    if upper.starts_with("REVISE") {
        let tail = head["REVISE".len()..].trim_start_matches([':', '-', ' ', '\t']);
        let suggestion = format!("{tail}\n{rest}").trim().to_string();
        return Vote {
            reasoner_id: reasoner_id.to_string(),
            verdict: Verdict::Revise,
            suggestion: if suggestion.is_empty() { PLACEHOLDER_SUGGESTION.into() } else { suggestion },
            error: None,
        };
    }
    Vote::failed(reasoner_id, format!("reply does not start with ENDORSE or REVISE: {first:?}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Consensus,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliberationState {
    /// Rounds completed.
    pub round: u32,
    pub draft_history: Vec<String>,
    pub vote_history: Vec<Vec<Vote>>,
    pub outcome: Outcome,
}

impl DeliberationState {
    pub fn final_draft(&self) -> &str {
        self.draft_history.last().map(String::as_str).unwrap_or("")
    }

    pub fn consensus_round(&self) -> Option<u32> {
        (self.outcome == Outcome::Consensus).then_some(self.round)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    /// Position of the best record; `None` when no candidate was verified.
    pub best_response_index: Option<usize>,
    pub phi_total_best: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus_round: Option<u32>,
}

pub fn endorsed(votes: &[Vote]) -> bool {
    let n = votes.iter().filter(|v| v.verdict == Verdict::Endorse).count();
    2 * n > votes.len()
}

const REASONER_SYSTEM: &str = "You are a reasoning agent reviewing a draft pathology answer with its verification logs. Reply ENDORSE on the first line if the draft is accurate and complete. Otherwise reply REVISE on the first line followed by specific revision suggestions.";
const REVISE_SYSTEM: &str = "You are the summarizing agent of a pathology council. Revise the draft answer by applying the reviewers' suggestions. Reply with the revised answer only.";
const NOTES_HEADER: &str = "Reviewer revisions:";

/// Everything deliberation needs besides the draft and reasoners.
#[derive(Clone, Copy)]
pub struct DeliberationContext<'a> {
    pub question: &'a str,
    pub log_digest: &'a str,
    pub r_max: u32,
    pub reviser: Option<&'a dyn ChatClient>,
}

pub fn reasoner_prompt(question: &str, log_digest: &str, draft: &str) -> String {
    format!("Question: {question}\n\nVerification log digest:\n{log_digest}\n\nDraft answer:\n{draft}")
}

async fn revise(
    ctx: &DeliberationContext<'_>,
    initial: &str,
    draft: &str,
    votes: &[Vote],
) -> Result<String, SummaryError> {
    let suggestions: Vec<&str> =
        votes.iter().filter(|v| v.verdict == Verdict::Revise).map(|v| v.suggestion.as_str()).collect();
    match ctx.reviser {
        // the notes of earlier rounds are replaced, not stacked
        None => Ok(with_bullets(initial, NOTES_HEADER, suggestions.into_iter())),
        Some(r) => {
            let joined: String = suggestions.iter().map(|s| format!("- {s}\n")).collect();
            let prompt = format!("Question: {}\n\nDraft answer:\n{draft}\n\nSuggestions:\n{joined}", ctx.question);
            let reply = r.complete(&ChatRequest::new(REVISE_SYSTEM, prompt)).await.map_err(SummaryError::SummarizerError)?;
            Ok(reply.text)
        }
    }
}

/// Runs review rounds until more than half of the reasoners endorse the
/// current draft or `r_max` rounds have passed. No revision follows the
/// final round, so an exhausted run returns the draft that was last reviewed.
pub async fn deliberate(
    initial_draft: &str,
    reasoners: &[Arc<dyn ChatClient>],
    ctx: DeliberationContext<'_>,
) -> Result<DeliberationState, SummaryError> {
    if reasoners.is_empty() {
        return Err(SummaryError::NoReasoners);
    }
    if ctx.r_max == 0 {
        return Err(SummaryError::BadRoundLimit);
    }
    let mut state = DeliberationState {
        round: 0,
        draft_history: vec![initial_draft.to_string()],
        vote_history: Vec::new(),
        outcome: Outcome::Exhausted,
    };
    loop {
        state.round += 1;
        let draft = state.final_draft().to_string();
        let req = ChatRequest::new(REASONER_SYSTEM, reasoner_prompt(ctx.question, ctx.log_digest, &draft)).with_max_tokens(512);
        let replies = futures::future::join_all(reasoners.iter().map(|r| r.complete(&req))).await;
        let votes: Vec<Vote> = reasoners
            .iter()
            .zip(replies)
            .map(|(r, reply)| match reply {
                Ok(resp) => parse_vote(r.id(), &resp.text),
                Err(e) => Vote::failed(r.id(), e.to_string()),
            })
            .collect();
        let done = endorsed(&votes);
        state.vote_history.push(votes);
        if done {
            state.outcome = Outcome::Consensus;
            return Ok(state);
        }
        if state.round >= ctx.r_max {
            return Ok(state);
        }
        let next = revise(&ctx, initial_draft, &draft, state.vote_history.last().unwrap()).await?;
        state.draft_history.push(next);
    }
}

/// The emitted answer document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDocument {
    pub answer: String,
    pub best_index: Option<usize>,
    pub scores: Option<ScoreBundle>,
    pub deliberation: DeliberationSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliberationSummary {
    pub rounds: u32,
    /// `consensus`, `exhausted`, or `skipped` when no deliberation ran.
    pub outcome: String,
}

impl AnswerDocument {
    pub fn new(final_answer: &FinalAnswer, scores: Option<ScoreBundle>, state: Option<&DeliberationState>) -> Self {
        let deliberation = match state {
            Some(s) => DeliberationSummary {
                rounds: s.round,
                outcome: match s.outcome {
                    Outcome::Consensus => "consensus".into(),
                    Outcome::Exhausted => "exhausted".into(),
                },
            },
            None => DeliberationSummary {
                rounds: 0,
                outcome: "skipped".into(),
            },
        };
        Self {
            answer: final_answer.text.clone(),
            best_index: final_answer.best_response_index,
            scores,
            deliberation,
        }
    }
}
