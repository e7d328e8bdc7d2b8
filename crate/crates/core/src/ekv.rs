//! External knowledge verification: the fact agent (claims against reference
//! knowledge, φ_k) and the consensus agent (response cancer type against a
//! classifier panel, φ_a, φ_b, φ_c).

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatClient, ChatRequest, ClassifierVerdict, SlideClassifier};
use crate::domain::{check_unit, ScoreError, SlideRef};
use crate::icv::{mean_unit, Claim};
use crate::judging::{self, MAX_IN_FLIGHT};
use crate::knowledge::{summarize_references, KnowledgeChunk, KnowledgeError, ReferenceSummary, RetrievalHit, Retriever};
use crate::lexicon::{fold, Lexicon, TermTable};

/// f_i assigned to every claim when no reference text could be retrieved.
pub const UNINFORMATIVE_PRIOR: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EkvError {
    #[error("at least one claim is required")]
    NoClaims,
    #[error("response text is empty")]
    EmptyResponse,
    #[error("extractor {backend}: {reason}")]
    ExtractionError { backend: String, reason: String },
    #[error("fact judge failed on claim {claim}: {source}")]
    JudgeError {
        claim: usize,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

/// Diagnostic keywords k drawn from a response's claims.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeywordSet {
    terms: Vec<String>,
}

impl KeywordSet {
    /// Folds each term, drops empties and keeps the first occurrence of each.
    pub fn new(terms: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut seen = BTreeSet::new();
        let terms = terms
            .into_iter()
            .map(|t| fold(t.as_ref()))
            .filter(|t| !t.is_empty() && seen.insert(t.clone()))
            .collect();
        Self { terms }
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }
}

const KEYWORD_SYSTEM: &str = "List the diagnostic keywords (entities, features, grades, stages) found in the numbered pathology claims. Reply with a JSON array of strings only.";

fn numbered(claims: &[Claim]) -> String {
    claims.iter().map(|c| format!("{}. {}", c.index, c.text)).collect::<Vec<_>>().join("\n")
}

/// Parses the first JSON string array in `reply`.
pub fn parse_string_array(reply: &str) -> Option<Vec<String>> {
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    if end < start {
        return None;
    }
    serde_json::from_str(&reply[start..=end]).ok()
}

/// Keywords from the extractor backend, or else the diagnostic-term lexicon
/// hits in claim order.
pub async fn extract_keywords(
    claims: &[Claim],
    lexicon: &Lexicon,
    extractor: Option<&dyn ChatClient>,
) -> Result<KeywordSet, EkvError> {
    if claims.is_empty() {
        return Err(EkvError::NoClaims);
    }
    match extractor {
        None => Ok(KeywordSet::new(
            claims
                .iter()
                .flat_map(|c| lexicon.diagnostic_terms.find_all(&c.text))
                .map(|(_, _, canonical)| canonical),
        )),
        Some(ex) => {
            let err = |reason: String| EkvError::ExtractionError {
                backend: ex.id().to_string(),
                reason,
            };
            let reply = ex
                .complete(&ChatRequest::new(KEYWORD_SYSTEM, numbered(claims)).with_max_tokens(256))
                .await
                .map_err(|e| err(e.to_string()))?;
            let terms = parse_string_array(&reply.text)
                .ok_or_else(|| err(format!("expected a JSON string array, got {:?}", reply.text)))?;
            Ok(KeywordSet::new(terms))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactJudgment {
    pub claim_index: usize,
    pub f: f64,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactScores {
    pub judgments: Vec<FactJudgment>,
    /// Set when Q was empty and every f_i is the uninformative prior.
    pub uninformative_prior: bool,
    pub clamped_judgments: usize,
}

const FACT_SYSTEM: &str = "You check pathology claims against reference knowledge. Reply with a number between 0 and 1 first: 1 if the claim agrees with the reference, 0 if it violates it. Then give a one-sentence justification.";

pub fn fact_prompt(claim: &Claim, q: &ReferenceSummary) -> String {
    format!("Reference:\n{}\n\nClaim: {}", q.text, claim.text)
}

/// One f_i per claim.
pub async fn fact_scores(claims: &[Claim], q: &ReferenceSummary, judge: &dyn ChatClient) -> Result<FactScores, EkvError> {
    if claims.is_empty() {
        return Err(EkvError::NoClaims);
    }
    if q.is_empty() {
        tracing::info!(claims = claims.len(), "empty reference summary; using uninformative prior");
        return Ok(FactScores {
            judgments: claims
                .iter()
                .map(|c| FactJudgment {
                    claim_index: c.index,
                    f: UNINFORMATIVE_PRIOR,
                    justification: "no reference information retrieved".into(),
                })
                .collect(),
            uninformative_prior: true,
            clamped_judgments: 0,
        });
    }
    let results: Vec<_> = stream::iter(claims)
        .map(|c| async move {
            let r = judging::score_with_reply(judge, FACT_SYSTEM, fact_prompt(c, q), 256).await;
            (c.index, r)
        })
        .buffered(MAX_IN_FLIGHT)
        .collect()
        .await;
    let mut judgments = Vec::with_capacity(claims.len());
    let mut clamped = 0;
    for (claim_index, r) in results {
        let (j, text) = r.map_err(|source| EkvError::JudgeError {
            claim: claim_index,
            source,
        })?;
        clamped += j.clamped as usize;
        judgments.push(FactJudgment {
            claim_index,
            f: j.value,
            justification: text.trim().to_string(),
        });
    }
    Ok(FactScores {
        judgments,
        uninformative_prior: false,
        clamped_judgments: clamped,
    })
}

/// φ_k: mean of the f_i.
pub fn knowledge_verification(f: &[f64]) -> Result<f64, ScoreError> {
    mean_unit(f)
}

/// Configuration of one fact-agent pass.
#[derive(Clone, Copy)]
pub struct FactAgent<'a> {
    pub lexicon: &'a Lexicon,
    pub judge: &'a dyn ChatClient,
    pub keyword_extractor: Option<&'a dyn ChatClient>,
    pub retriever: Option<&'a dyn Retriever>,
    pub summarizer: Option<&'a dyn ChatClient>,
    pub top_k: usize,
    pub summary_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactReport {
    pub keywords: KeywordSet,
    pub hits: Vec<RetrievalHit>,
    pub reference: ReferenceSummary,
    pub scores: FactScores,
    pub phi_k: f64,
}

impl FactAgent<'_> {
    /// Keywords, retrieval, reference summary Q, per-claim judgments, φ_k.
    pub async fn verify(&self, claims: &[Claim]) -> Result<FactReport, EkvError> {
        let keywords = extract_keywords(claims, self.lexicon, self.keyword_extractor).await?;
        let hits = match self.retriever {
            Some(r) if !keywords.is_empty() => r.search(keywords.terms(), self.top_k.max(1)).await?,
            _ => Vec::new(),
        };
        let reference = match self.retriever {
            Some(r) => {
                let chunks: HashMap<&str, &KnowledgeChunk> =
                    hits.iter().filter_map(|h| r.chunk(&h.chunk_id)).map(|c| (c.chunk_id.as_str(), c)).collect();
                summarize_references(&hits, &chunks, self.summarizer, self.summary_budget).await?
            }
            None => ReferenceSummary::default(),
        };
        let scores = fact_scores(claims, &reference, self.judge).await?;
        let f: Vec<f64> = scores.judgments.iter().map(|j| j.f).collect();
        let phi_k = knowledge_verification(&f)?;
        Ok(FactReport {
            keywords,
            hits,
            reference,
            scores,
            phi_k,
        })
    }
}

const CANCER_TYPE_SYSTEM: &str = "Name the cancer type diagnosed in the pathology text. Reply with the cancer type only, or NONE if the text names no cancer type.";

/// The cancer type T named by a response, normalized through the synonym
/// table; `None` when the response names none.
pub async fn extract_cancer_type(
    response: &str,
    lexicon: &Lexicon,
    extractor: Option<&dyn ChatClient>,
) -> Result<Option<String>, EkvError> {
    if response.trim().is_empty() {
        return Err(EkvError::EmptyResponse);
    }
    match extractor {
        None => Ok(lexicon
            .cancer_types
            .find_all(response)
            .into_iter()
            .next()
            .map(|(_, _, canonical)| lexicon.normalize_label(&canonical))),
        Some(ex) => {
            let reply = ex
                .complete(&ChatRequest::new(CANCER_TYPE_SYSTEM, response).with_max_tokens(32))
                .await
                .map_err(|e| EkvError::ExtractionError {
                    backend: ex.id().to_string(),
                    reason: e.to_string(),
                })?;
            let line = reply.text.lines().next().unwrap_or("").trim().trim_end_matches('.');
            let folded = fold(line);
            if folded.is_empty() || folded == "none" {
                Ok(None)
            } else {
                Ok(Some(lexicon.normalize_label(line)))
            }
        }
    }
}

/// A_i = 1(norm(T) = norm(R_i)) and φ_a = ΣA_i / H.
pub fn mllm_classifier_agreement(
    t: &str,
    verdicts: &[ClassifierVerdict],
    synonyms: &TermTable,
) -> Result<(Vec<u8>, f64), ScoreError> {
    if verdicts.is_empty() {
        return Err(ScoreError::EmptyList);
    }
    let t = synonyms.normalize(t);
    let a: Vec<u8> = verdicts.iter().map(|v| (synonyms.normalize(&v.label) == t) as u8).collect();
    let sum: u32 = a.iter().map(|&x| x as u32).sum();
    let phi_a = sum as f64 / a.len() as f64;
    Ok((a, phi_a))
}

/// φ_b: the fraction of classifier pairs with identical labels; 1 for a
/// single classifier.
pub fn inter_classifier_agreement<S: AsRef<str>>(labels: &[S]) -> Result<f64, ScoreError> {
    let h = labels.len();
    match h {
        0 => Err(ScoreError::EmptyList),
        1 => Ok(1.0),
        _ => {
            let mut counts: HashMap<&str, u64> = HashMap::new();
            for l in labels {
                *counts.entry(l.as_ref()).or_default() += 1;
            }
            let equal: u64 = counts.values().map(|&c| c * (c - 1) / 2).sum();
            Ok(2.0 * equal as f64 / (h as f64 * (h as f64 - 1.0)))
        }
    }
}

/// φ_c = φ_a · φ_b.
pub fn classifier_verification(phi_a: f64, phi_b: f64) -> Result<f64, ScoreError> {
    Ok(check_unit("phi_a", phi_a)? * check_unit("phi_b", phi_b)?)
}

/// One failed classifier of the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierFailure {
    pub backend_id: String,
    pub error: String,
}

/// Verdicts of the whole panel for one slide, in panel order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelResult {
    pub verdicts: Vec<ClassifierVerdict>,
    pub failures: Vec<ClassifierFailure>,
}

/// Queries every classifier concurrently.
pub async fn poll_classifiers(panel: &[Arc<dyn SlideClassifier>], slide: &SlideRef) -> PanelResult {
    let results = futures::future::join_all(panel.iter().map(|c| c.classify(slide))).await;
    let mut out = PanelResult::default();
    for (c, r) in panel.iter().zip(results) {
        match r {
            Ok(v) => out.verdicts.push(v),
            Err(e) => {
                tracing::warn!(classifier = c.id(), error = %e, "classifier failed");
                out.failures.push(ClassifierFailure {
                    backend_id: c.id().to_string(),
                    error: e.to_string(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub extracted_type: Option<String>,
    pub verdicts: Vec<ClassifierVerdict>,
    pub agreements: Vec<u8>,
    pub phi_a: f64,
    pub phi_b: f64,
    pub phi_c: f64,
    pub applicable: bool,
    /// Set when a cancer type was found but no classifier answered.
    #[serde(default)]
    pub panel_failed: bool,
}

impl ConsensusResult {
    fn not_applicable(verdicts: Vec<ClassifierVerdict>) -> Self {
        Self {
            extracted_type: None,
            verdicts,
            agreements: Vec::new(),
            phi_a: 0.0,
            phi_b: 0.0,
            phi_c: 0.0,
            applicable: false,
            panel_failed: false,
        }
    }
}

/// Consensus agent for one response given the panel's verdicts.
pub async fn consensus(
    response: &str,
    lexicon: &Lexicon,
    extractor: Option<&dyn ChatClient>,
    verdicts: &[ClassifierVerdict],
) -> Result<ConsensusResult, EkvError> {
    let Some(t) = extract_cancer_type(response, lexicon, extractor).await? else {
        return Ok(ConsensusResult::not_applicable(verdicts.to_vec()));
    };
    if verdicts.is_empty() {
        return Ok(ConsensusResult {
            extracted_type: Some(t),
            panel_failed: true,
            applicable: true,
            ..ConsensusResult::not_applicable(Vec::new())
        });
    }
    let (agreements, phi_a) = mllm_classifier_agreement(&t, verdicts, &lexicon.synonyms)?;
    let labels: Vec<String> = verdicts.iter().map(|v| lexicon.normalize_label(&v.label)).collect();
    let phi_b = inter_classifier_agreement(&labels)?;
    let phi_c = classifier_verification(phi_a, phi_b)?;
    Ok(ConsensusResult {
        extracted_type: Some(t),
        verdicts: verdicts.to_vec(),
        agreements,
        phi_a,
        phi_b,
        phi_c,
        applicable: true,
        panel_failed: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{FnChat, FnClassifier};
    use crate::knowledge::{build_index, ingest, SourceDocument};
    use proptest::prelude::*;

    fn claims(texts: &[&str]) -> Vec<Claim> {
        texts.iter().enumerate().map(|(i, t)| Claim::new(i + 1, *t)).collect()
    }

    fn verdicts(labels: &[&str]) -> Vec<ClassifierVerdict> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| ClassifierVerdict {
                backend_id: format!("c{i}"),
                label: l.to_string(),
                confidence: None,
            })
            .collect()
    }

    #[tokio::test]
    async fn keywords_from_lexicon() {
        let lex = Lexicon::builtin();
        let k = extract_keywords(&claims(&["The tumor is an adenocarcinoma."]), &lex, None).await.unwrap();
        assert!(k.terms().contains(&"adenocarcinoma".to_string()));
        let none = extract_keywords(&claims(&["Nothing of note here."]), &lex, None).await.unwrap();
        assert!(none.is_empty());
        let echo = FnChat::constant("kx", r#"["grade 3","mitoses"]"#);
        let k = extract_keywords(&claims(&["x"]), &lex, Some(&echo)).await.unwrap();
        assert_eq!(k.terms(), ["grade 3", "mitoses"]);
        let bad = FnChat::constant("kx", "grade 3, mitoses");
        assert!(matches!(
            extract_keywords(&claims(&["x"]), &lex, Some(&bad)).await,
            Err(EkvError::ExtractionError { .. })
        ));
        assert!(matches!(extract_keywords(&[], &lex, None).await, Err(EkvError::NoClaims)));
    }

    #[test]
    fn keyword_set_dedups_and_folds() {
        let k = KeywordSet::new(["Grade  3", "grade 3", " ", "Mitoses"]);
        assert_eq!(k.terms(), ["grade 3", "mitoses"]);
    }

    fn q(text: &str) -> ReferenceSummary {
        ReferenceSummary {
            text: text.into(),
            supporting_chunk_ids: vec!["d#00000000".into()],
        }
    }

    #[tokio::test]
    async fn fact_scores_passthrough_clamp_and_prior() {
        let cs = claims(&["alpha", "beta"]);
        let judge = FnChat::new("j", |r| Ok(if r.key().ends_with("alpha") { "1" } else { "0" }.into()));
        let s = fact_scores(&cs, &q("ref"), &judge).await.unwrap();
        assert_eq!(s.judgments.iter().map(|j| j.f).collect::<Vec<_>>(), [1.0, 0.0]);
        assert!(!s.uninformative_prior);

        let prior = fact_scores(&cs, &ReferenceSummary::default(), &judge).await.unwrap();
        assert!(prior.uninformative_prior);
        assert!(prior.judgments.iter().all(|j| j.f == 0.5));

        let hot = FnChat::constant("j", "1.7 because");
        let s = fact_scores(&cs[..1], &q("ref"), &hot).await.unwrap();
        assert_eq!(s.judgments[0].f, 1.0);
        assert_eq!(s.clamped_judgments, 1);
        assert!(matches!(
            fact_scores(&cs, &q("ref"), &FnChat::failing("j")).await,
            Err(EkvError::JudgeError { claim: 1, .. })
        ));
    }

    #[test]
    fn knowledge_verification_means() {
        assert_eq!(knowledge_verification(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(knowledge_verification(&[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(knowledge_verification(&[0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert!(knowledge_verification(&[]).is_err());
    }

    #[tokio::test]
    async fn cancer_type_extraction() {
        let lex = Lexicon::builtin();
        let t = extract_cancer_type("The lesion is adenocarcinoma. This classification is supported.", &lex, None)
            .await
            .unwrap();
        assert_eq!(t.as_deref(), Some("adenocarcinoma"));
        let none = extract_cancer_type("Sheets of cells with abundant cytoplasm.", &lex, None).await.unwrap();
        assert_eq!(none, None);
        let u = extract_cancer_type("Findings support high-grade urothelial carcinoma.", &lex, None).await.unwrap();
        assert_eq!(u.as_deref(), Some("urothelial carcinoma"));
        let ex = FnChat::constant("x", "Lung adenocarcinoma");
        assert_eq!(
            extract_cancer_type("whatever", &lex, Some(&ex)).await.unwrap().as_deref(),
            Some("adenocarcinoma")
        );
        let abstain = FnChat::constant("x", "NONE");
        assert_eq!(extract_cancer_type("whatever", &lex, Some(&abstain)).await.unwrap(), None);
        assert!(matches!(extract_cancer_type("  ", &lex, None).await, Err(EkvError::EmptyResponse)));
    }

    #[test]
    fn agreement_examples() {
        let syn = Lexicon::builtin().synonyms;
        let (a, phi) =
            mllm_classifier_agreement("adenocarcinoma", &verdicts(&["adenocarcinoma", "adenocarcinoma", "seminoma"]), &syn)
                .unwrap();
        assert_eq!(a, [1, 1, 0]);
        assert_eq!(phi, 2.0 / 3.0);
        assert_eq!(mllm_classifier_agreement("seminoma", &verdicts(&["seminoma"; 3]), &syn).unwrap().1, 1.0);
        assert_eq!(mllm_classifier_agreement("melanoma", &verdicts(&["seminoma"; 2]), &syn).unwrap().1, 0.0);
        assert_eq!(
            mllm_classifier_agreement("LUAD", &verdicts(&["lung adenocarcinoma"]), &syn).unwrap().1,
            1.0
        );
    }

    #[test]
    fn inter_agreement_examples() {
        assert_eq!(inter_classifier_agreement(&["A", "A", "B"]).unwrap(), 1.0 / 3.0);
        assert_eq!(inter_classifier_agreement(&["A", "A", "A"]).unwrap(), 1.0);
        assert_eq!(inter_classifier_agreement(&["A", "B"]).unwrap(), 0.0);
        assert_eq!(inter_classifier_agreement(&["A"]).unwrap(), 1.0);
        assert!(inter_classifier_agreement::<&str>(&[]).is_err());
    }

    #[test]
    fn classifier_verification_examples() {
        assert_eq!(classifier_verification(2.0 / 3.0, 1.0 / 3.0).unwrap(), 2.0 / 9.0);
        assert_eq!(classifier_verification(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(classifier_verification(0.37, 0.0).unwrap(), 0.0);
        assert!(classifier_verification(1.2, 0.5).is_err());
    }

    #[tokio::test]
    async fn consensus_paths() {
        let lex = Lexicon::builtin();
        let v = verdicts(&["adenocarcinoma", "adenocarcinoma", "seminoma"]);
        let c = consensus("This is adenocarcinoma.", &lex, None, &v).await.unwrap();
        assert!(c.applicable);
        assert_eq!(c.phi_a, 2.0 / 3.0);
        assert_eq!(c.phi_b, 1.0 / 3.0);
        assert_eq!(c.phi_c, c.phi_a * c.phi_b);
        let na = consensus("Glands are present.", &lex, None, &v).await.unwrap();
        assert!(!na.applicable && na.extracted_type.is_none());
        let failed = consensus("This is seminoma.", &lex, None, &[]).await.unwrap();
        assert!(failed.applicable && failed.panel_failed && failed.phi_c == 0.0);
    }

    #[tokio::test]
    async fn panel_polling_keeps_order_and_failures() {
        let panel: Vec<Arc<dyn SlideClassifier>> = vec![
            Arc::new(FnClassifier::constant("a", "seminoma")),
            Arc::new(FnClassifier::new("b", |s| {
                Err(BackendError::UnknownSlide {
                    backend: "b".into(),
                    slide: s.to_string(),
                })
            })),
            Arc::new(FnClassifier::constant("c", "melanoma")),
        ];
        let r = poll_classifiers(&panel, &SlideRef::new("s1")).await;
        assert_eq!(r.verdicts.iter().map(|v| v.backend_id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
        assert_eq!(r.failures.len(), 1);
    }

    #[tokio::test]
    async fn fact_agent_end_to_end() {
        let lex = Lexicon::builtin();
        let docs = [SourceDocument {
            doc_id: "who".into(),
            title: "t".into(),
            body: "Adenocarcinoma is a malignant epithelial tumor with glandular differentiation.".into(),
            origin: "o".into(),
        }];
        let idx = build_index(ingest(&docs, 512, 64).unwrap()).unwrap();
        let judge = FnChat::new("j", |r| Ok(if r.key().contains("glandular") { "0.9" } else { "0.1" }.into()));
        let agent = FactAgent {
            lexicon: &lex,
            judge: &judge,
            keyword_extractor: None,
            retriever: Some(&idx),
            summarizer: None,
            top_k: 5,
            summary_budget: 1000,
        };
        let r = agent.verify(&claims(&["The tumor is an adenocarcinoma."])).await.unwrap();
        assert_eq!(r.hits.len(), 1);
        assert_eq!(r.reference.supporting_chunk_ids, ["who#00000000"]);
        assert_eq!(r.phi_k, 0.9);
        let no_kb = FactAgent { retriever: None, ..agent };
        let r = no_kb.verify(&claims(&["The tumor is an adenocarcinoma."])).await.unwrap();
        assert!(r.scores.uninformative_prior);
        assert_eq!(r.phi_k, 0.5);
    }

    fn brute_phi_b(labels: &[u8]) -> f64 {
        let h = labels.len();
        if h == 1 {
            return 1.0;
        }
        let mut eq = 0usize;
        for i in 0..h {
            for j in i + 1..h {
                if labels[i] == labels[j] {
                    eq += 1;
                }
            }
        }
        2.0 * eq as f64 / (h * (h - 1)) as f64
    }

    proptest! {
        #[test]
        fn phi_b_matches_double_loop(labels in prop::collection::vec(0u8..4, 1..=6)) {
            let s: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
            prop_assert!((inter_classifier_agreement(&s).unwrap() - brute_phi_b(&labels)).abs() <= 1e-12);
        }

        #[test]
        fn phi_b_permutation_invariant(labels in prop::collection::vec(0u8..3, 1..=6).prop_shuffle()) {
            let mut sorted = labels.clone();
            sorted.sort();
            let a: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
            let b: Vec<String> = sorted.iter().map(|l| l.to_string()).collect();
            prop_assert_eq!(inter_classifier_agreement(&a).unwrap(), inter_classifier_agreement(&b).unwrap());
        }

        #[test]
        fn unanimous_addition_never_lowers_phi_b(n in 1usize..6) {
            let base = vec!["x".to_string(); n];
            let mut more = base.clone();
            more.push("x".into());
            prop_assert!(inter_classifier_agreement(&more).unwrap() >= inter_classifier_agreement(&base).unwrap());
        }

        #[test]
        fn phi_c_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let c = classifier_verification(a, b).unwrap();
            prop_assert!((0.0..=1.0).contains(&c) && c <= a.min(b));
        }

        #[test]
        fn phi_k_is_mean(f in prop::collection::vec(0.0f64..=1.0, 1..=8)) {
            let mut s = 0.0;
            for x in &f { s += x; }
            prop_assert_eq!(knowledge_verification(&f).unwrap(), s / f.len() as f64);
        }
    }
}
