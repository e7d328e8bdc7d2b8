//! Internal consistency verification (the logic agent).
//!
//! A response is broken into claims, each optionally carrying evidence.
//! A judge scores every claim pair for compatibility (`G_ij`) and every
//! piece of evidence for validity (`V_i`). The compatibility score `phi_g`
//! is the mean of the upper-triangular entries of `G`, the validity score
//! `phi_e` is the mean of the `V_i`, and the internal consistency score
//! `phi_l` is their average.

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatClient, ChatRequest};
use crate::domain::{check_unit, ScoreError};
use crate::judging::{self, MAX_IN_FLIGHT};

#[derive(Debug, Error)]
pub enum IcvError {
    #[error("response yielded no claims")]
    ExtractionEmpty,
    #[error("malformed claim extraction: {0}")]
    MalformedExtraction(String),
    #[error("claim extractor failed: {0}")]
    Extractor(#[source] BackendError),
    #[error("judge failed on claims {pair:?}: {source}")]
    JudgeError {
        /// 1-based claim indices; the second is absent for evidence checks.
        pair: (usize, Option<usize>),
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    /// 1-based position within its claim set.
    pub index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Evidence>,
}

impl Claim {
    pub fn new(index: usize, text: impl Into<String>) -> Self {
        Self {
            index,
            text: text.into(),
            evidence: None,
        }
    }

    pub fn with_evidence(mut self, text: impl Into<String>) -> Self {
        self.evidence = Some(Evidence {
            text: text.into(),
            validity: None,
        });
        self
    }
}

/// Pairwise claim compatibility, stored as the strict upper triangle in
/// row-major order. Lookups are symmetric; the diagonal is not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CompatibilityMatrix {
    /// An `n`-claim matrix with every pair set to `fill`.
    pub fn filled(n: usize, fill: f64) -> Self {
        Self {
            n,
            entries: vec![fill; pair_count(n)],
        }
    }

    /// Builds from the upper triangle listed row by row:
    /// `(0,1), (0,2), ..., (1,2), ...`.
    pub fn from_upper(n: usize, entries: Vec<f64>) -> Result<Self, String> {
        if entries.len() != pair_count(n) {
            return Err(format!("{} entries for n = {n}, expected {}", entries.len(), pair_count(n)));
        }
        if let Some(v) = entries.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("entry {v} outside [0,1]"));
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        assert!(i != j && j < self.n, "pair ({i},{j}) out of range for n = {}", self.n);
        // rows 0..i hold (n-1) + (n-2) + ... + (n-i) entries
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    /// Entry for 0-based claims `i != j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[self.offset(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let o = self.offset(i, j);
        self.entries[o] = v;
    }

    /// All `(i, j)` with `i < j`, in storage order.
    pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
    }
}

fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// How claims are pulled out of a response.
#[derive(Clone, Copy)]
pub enum ClaimExtractor<'a> {
    /// One claim per sentence, no evidence.
    Sentences,
    /// A backend returning `[{"claim": ..., "evidence": ...|null}]`.
    Model(&'a dyn ChatClient),
}

const EXTRACT_SYSTEM: &str = "Extract the atomic factual claims from the pathology answer. Reply with only a JSON array of objects {\"claim\": string, \"evidence\": string or null}, where evidence is the text in the answer that supports the claim.";

/// Splits on `.`, `!` or `?` followed by whitespace (or end of text); the
/// punctuation stays with its sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            let at_break = match chars.peek() {
                None => true,
                Some((_, n)) => n.is_whitespace(),
            };
            if at_break {
                push_trimmed(&mut out, &text[start..end]);
                start = end;
            }
        }
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let t = s.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

#[derive(Deserialize)]
struct ExtractedClaim {
    claim: String,
    #[serde(default)]
    evidence: Option<String>,
}

/// Parses a model extractor reply into re-indexed claims. Text around the
/// outermost JSON array is ignored.
pub fn parse_claim_json(reply: &str) -> Result<Vec<Claim>, IcvError> {
    let (Some(lo), Some(hi)) = (reply.find('['), reply.rfind(']')) else {
        return Err(IcvError::MalformedExtraction("no JSON array in reply".into()));
    };
    if hi < lo {
        return Err(IcvError::MalformedExtraction("no JSON array in reply".into()));
    }
    let items: Vec<ExtractedClaim> =
        serde_json::from_str(&reply[lo..=hi]).map_err(|e| IcvError::MalformedExtraction(e.to_string()))?;
    let mut claims = Vec::with_capacity(items.len());
    for item in items {
        let text = item.claim.trim();
        if text.is_empty() {
            return Err(IcvError::MalformedExtraction("empty claim text".into()));
        }
        let mut c = Claim::new(claims.len() + 1, text);
        if let Some(ev) = item.evidence.map(|e| e.trim().to_string()).filter(|e| !e.is_empty()) {
            c = c.with_evidence(ev);
        }
        claims.push(c);
    }
    if claims.is_empty() {
        return Err(IcvError::ExtractionEmpty);
    }
    Ok(claims)
}

pub async fn extract_claims(response: &str, extractor: ClaimExtractor<'_>) -> Result<Vec<Claim>, IcvError> {
    if response.trim().is_empty() {
        return Err(IcvError::ExtractionEmpty);
    }
    match extractor {
        ClaimExtractor::Sentences => {
            let claims: Vec<Claim> = split_sentences(response)
                .into_iter()
                .enumerate()
                .map(|(i, s)| Claim::new(i + 1, s))
                .collect();
            if claims.is_empty() {
                return Err(IcvError::ExtractionEmpty);
            }
            Ok(claims)
        }
        ClaimExtractor::Model(backend) => {
            let reply = backend
                .complete(&ChatRequest::new(EXTRACT_SYSTEM, response))
                .await
                .map_err(IcvError::Extractor)?;
            parse_claim_json(&reply.text)
        }
    }
}

const COMPAT_SYSTEM: &str = "You check pathology claims for contradictions. Reply with a single number in [0,1]: 1 if the two claims can both be true, 0 if they contradict.";
const EVIDENCE_SYSTEM: &str = "You check whether evidence supports a pathology claim. Reply with a single number in [0,1]: 1 if the evidence fully supports the claim, 0 if it does not.";

pub fn compatibility_prompt(a: &Claim, b: &Claim) -> String {
    format!("Claim A: {}\nClaim B: {}", a.text, b.text)
}

pub fn evidence_prompt(c: &Claim, evidence: &str) -> String {
    format!("Claim: {}\nEvidence: {}", c.text, evidence)
}

/// Result of a judged batch along with how many replies were clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgedMatrix {
    pub matrix: CompatibilityMatrix,
    pub clamped: usize,
}

/// Asks the judge about every claim pair, one prompt per pair.
pub async fn judge_compatibility(claims: &[Claim], judge: &dyn ChatClient) -> Result<JudgedMatrix, IcvError> {
    let n = claims.len();
    let pairs: Vec<(usize, usize)> = CompatibilityMatrix::pairs(n).collect();
    let results: Vec<_> = stream::iter(pairs.iter().copied())
        .map(|(i, j)| async move {
            let r = judging::score(judge, COMPAT_SYSTEM, compatibility_prompt(&claims[i], &claims[j])).await;
            ((i, j), r)
        })
        .buffered(MAX_IN_FLIGHT)
        .collect()
        .await;
    let mut matrix = CompatibilityMatrix::filled(n, 0.0);
    let mut clamped = 0;
    for ((i, j), r) in results {
        let judged = r.map_err(|source| IcvError::JudgeError {
            pair: (claims[i].index, Some(claims[j].index)),
            source,
        })?;
        clamped += judged.clamped as usize;
        matrix.set(i, j, judged.value);
    }
    Ok(JudgedMatrix { matrix, clamped })
}

/// `sum_{i<j} G_ij / (N(N-1)/2)`, or 1 when there is no pair.
pub fn compatibility_score(g: &CompatibilityMatrix) -> f64 {
    if g.n() <= 1 {
        return 1.0;
    }
    // summed in sorted order so relabeling claims cannot change the result
    let mut e = g.entries().to_vec();
    e.sort_by(f64::total_cmp);
    let sum: f64 = e.iter().sum();
    sum / pair_count(g.n()) as f64
}

/// Validity per claim. Claims without evidence score 0 without a judge call.
pub async fn judge_evidence(claims: &[Claim], judge: &dyn ChatClient) -> Result<(Vec<f64>, usize), IcvError> {
    let results: Vec<_> = stream::iter(claims.iter())
        .map(|c| async move {
            match &c.evidence {
                None => (c.index, Ok(judging::Judged { value: 0.0, clamped: false })),
                Some(ev) => (c.index, judging::score(judge, EVIDENCE_SYSTEM, evidence_prompt(c, &ev.text)).await),
            }
        })
        .buffered(MAX_IN_FLIGHT)
        .collect()
        .await;
    let mut out = Vec::with_capacity(claims.len());
    let mut clamped = 0;
    for (index, r) in results {
        let j = r.map_err(|source| IcvError::JudgeError {
            pair: (index, None),
            source,
        })?;
        clamped += j.clamped as usize;
        out.push(j.value);
    }
    Ok((out, clamped))
}

/// Arithmetic mean of the validities.
pub fn validity_score(v: &[f64]) -> Result<f64, ScoreError> {
    mean_unit(v)
}

/// Mean of a nonempty list of [0,1] values.
pub(crate) fn mean_unit(v: &[f64]) -> Result<f64, ScoreError> {
    if v.is_empty() {
        return Err(ScoreError::EmptyList);
    }
    for &x in v {
        check_unit("list entry", x)?;
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn internal_consistency(phi_g: f64, phi_e: f64) -> Result<f64, ScoreError> {
    check_unit("phi_g", phi_g)?;
    check_unit("phi_e", phi_e)?;
    Ok((phi_g + phi_e) / 2.0)
}

/// Everything the logic agent produced for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcvReport {
    pub claims: Vec<Claim>,
    pub matrix: CompatibilityMatrix,
    pub validities: Vec<f64>,
    pub phi_g: f64,
    pub phi_e: f64,
    pub phi_l: f64,
    pub clamped_judgments: usize,
}

/// Runs the full logic-agent pass over already extracted claims.
pub async fn verify_claims(claims: Vec<Claim>, judge: &dyn ChatClient) -> Result<IcvReport, IcvError> {
    if claims.is_empty() {
        return Err(IcvError::ExtractionEmpty);
    }
    let (compat, evidence) = futures::join!(judge_compatibility(&claims, judge), judge_evidence(&claims, judge));
    let compat = compat?;
    let (validities, ev_clamped) = evidence?;
    let phi_g = compatibility_score(&compat.matrix);
    let phi_e = validity_score(&validities)?;
    let phi_l = internal_consistency(phi_g, phi_e)?;
    let mut claims = claims;
    for (c, v) in claims.iter_mut().zip(&validities) {
        if let Some(ev) = &mut c.evidence {
            ev.validity = Some(*v);
        }
    }
    Ok(IcvReport {
        claims,
        matrix: compat.matrix,
        validities,
        phi_g,
        phi_e,
        phi_l,
        clamped_judgments: compat.clamped + ev_clamped,
    })
}
