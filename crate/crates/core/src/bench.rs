//! Benchmark harness: run the pipeline over a case file and score each
//! final answer by the fraction of ground-truth claims it entails.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatClient};
use crate::config::{BenchMetric, Stage};
use crate::domain::{ExpertRole, Query, TaskType};
use crate::icv::{self, ClaimExtractor, IcvError};
use crate::judging;
use crate::lexicon::fold;
use crate::pipeline::{session_id, Pipeline};

const PRECISION_SYSTEM: &str = "You grade pathology answers. Given one ground-truth claim and an answer, \
reply with a single number in [0,1]: 1 if the answer states or clearly entails the claim, 0 if it \
does not or contradicts it.";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("bad bench file: {0}")]
    Parse(String),
    #[error("duplicate case_id {0:?}")]
    DuplicateCase(String),
    #[error("case {0:?} has an empty ground truth")]
    EmptyGroundTruth(String),
    #[error("no ground-truth claims to score")]
    NoClaims,
    #[error("the precision metric needs a judge backend")]
    NoJudge,
    #[error("precision judge failed: {0}")]
    Judge(#[from] BackendError),
    #[error("claim extraction failed: {0}")]
    Extraction(#[from] IcvError),
}

impl BenchError {
    /// Problems with the bench file itself, as opposed to the run.
    pub fn is_input_error(&self) -> bool {
        matches!(self, BenchError::Parse(_) | BenchError::DuplicateCase(_) | BenchError::EmptyGroundTruth(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCase {
    pub case_id: String,
    pub slide_ref: String,
    pub question: String,
    pub ground_truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<TaskType>,
    /// Precomputed claims; derived from `ground_truth` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_claims: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<PathBuf>,
}

pub fn parse_bench(text: &str) -> Result<Vec<BenchCase>, BenchError> {
    let cases: Vec<BenchCase> = serde_json::from_str(text).map_err(|e| BenchError::Parse(e.to_string()))?;
    let mut seen = HashSet::new();
    for c in &cases {
        if !seen.insert(c.case_id.as_str()) {
            return Err(BenchError::DuplicateCase(c.case_id.clone()));
        }
        if c.ground_truth.trim().is_empty() {
            return Err(BenchError::EmptyGroundTruth(c.case_id.clone()));
        }
    }
    Ok(cases)
}

pub fn load_bench(path: &Path) -> Result<Vec<BenchCase>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_bench(&text)
}

pub fn precision_prompt(claim: &str, answer: &str) -> String {
    format!("Claim: {claim}\n\nAnswer:\n{answer}")
}

/// Mean judged entailment of each ground-truth claim by `answer`.
pub async fn wsi_precision<S: AsRef<str>>(gt_claims: &[S], answer: &str, judge: &dyn ChatClient) -> Result<f64, BenchError> {
    if gt_claims.is_empty() {
        return Err(BenchError::NoClaims);
    }
    let scores: Vec<Result<judging::Judged, BackendError>> = stream::iter(gt_claims.iter())
        .map(|c| judging::score(judge, PRECISION_SYSTEM, precision_prompt(c.as_ref(), answer)))
        .buffered(judging::MAX_IN_FLIGHT)
        .collect()
        .await;
    let mut sum = 0.0;
    for s in scores {
        sum += s?.value;
    }
    Ok(sum / gt_claims.len() as f64)
}

/// Closed-ended scoring: 1 when the answer matches the ground truth after
/// case folding and dropping trailing punctuation.
pub fn exact_match(ground_truth: &str, answer: &str) -> f64 {
    let norm = |s: &str| fold(s).trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()).to_string();
    (norm(ground_truth) == norm(answer)) as u8 as f64
}

/// Report group of a task type.
pub fn group_name(role: Option<ExpertRole>) -> &'static str {
    match role {
        Some(ExpertRole::Morphology) => "Morph.",
        Some(ExpertRole::Diagnosis) => "Diagnosis",
        Some(ExpertRole::TreatmentPlanning) => "Treat. Plan.",
        Some(ExpertRole::ReportGeneration) => "Report Gen.",
        None => "Out of scope",
    }
}

const GROUPS: [&str; 4] = ["Morph.", "Diagnosis", "Treat. Plan.", "Report Gen."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub task_type: TaskType,
    pub group: String,
    pub score: f64,
    pub gt_claims: Vec<String>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub name: String,
    pub n: usize,
    /// `None` when no case falls in the row.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub metric: BenchMetric,
    pub cases: Vec<CaseResult>,
    pub by_task: Vec<MeanRow>,
    pub by_group: Vec<MeanRow>,
    pub overall: MeanRow,
}

fn mean_row(name: &str, xs: &[f64]) -> MeanRow {
    MeanRow {
        name: name.to_string(),
        n: xs.len(),
        mean: (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64),
    }
}

impl BenchReport {
    pub fn from_cases(metric: BenchMetric, cases: Vec<CaseResult>) -> Self {
        let mut tasks: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for c in &cases {
            tasks.entry(c.task_type.abbreviation()).or_default().push(c.score);
            groups.entry(c.group.as_str()).or_default().push(c.score);
        }
        let by_task = TaskType::ALL
            .iter()
            .filter_map(|t| tasks.get(t.abbreviation()).map(|xs| mean_row(t.abbreviation(), xs)))
            .collect();
        let mut by_group: Vec<MeanRow> = GROUPS.iter().map(|g| mean_row(g, groups.get(g).map_or(&[][..], |v| v))).collect();
        if let Some(xs) = groups.get("Out of scope") {
            by_group.push(mean_row("Out of scope", xs));
        }
        let all: Vec<f64> = cases.iter().map(|c| c.score).collect();
        BenchReport {
            metric,
            by_task,
            by_group,
            overall: mean_row("Avg.", &all),
            cases,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let fmt = |m: Option<f64>| m.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let id_w = self.cases.iter().map(|c| c.case_id.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<id_w$}  {:<6}  {:<12}  {:>9}", "case", "task", "group", "score");
        for c in &self.cases {
            let mark = if c.error.is_some() { " !" } else { "" };
            let _ = writeln!(
                out,
                "{:<id_w$}  {:<6}  {:<12}  {:>9}{mark}",
                c.case_id,
                c.task_type.abbreviation(),
                c.group,
                format!("{:.3}", c.score)
            );
        }
        out.push('\n');
        let rows: Vec<&MeanRow> = self.by_group.iter().chain(std::iter::once(&self.overall)).collect();
        let _ = writeln!(out, "{}", rows.iter().map(|r| format!("{:>12}", r.name)).collect::<String>());
        let _ = writeln!(out, "{}", rows.iter().map(|r| format!("{:>12}", fmt(r.mean))).collect::<String>());
        if !self.by_task.is_empty() {
            out.push('\n');
            let _ = writeln!(out, "{}", self.by_task.iter().map(|r| format!("{:>8}", r.name)).collect::<String>());
            let _ = writeln!(out, "{}", self.by_task.iter().map(|r| format!("{:>8}", fmt(r.mean))).collect::<String>());
        }
        out
    }
}

pub struct BenchOptions<'a> {
    /// Required by the precision metric.
    pub judge: Option<&'a dyn ChatClient>,
    pub metric: BenchMetric,
    /// Backend used to split ground truth into claims when a case has none.
    pub claim_extractor: Option<&'a dyn ChatClient>,
    /// Concurrent cases; 1 runs sequentially.
    pub parallel: usize,
    pub disable: &'a std::collections::BTreeSet<Stage>,
}

async fn gt_claims(case: &BenchCase, extractor: Option<&dyn ChatClient>) -> Result<Vec<String>, BenchError> {
    if let Some(c) = &case.gt_claims {
        return Ok(c.clone());
    }
    let ex = match extractor {
        Some(m) => ClaimExtractor::Model(m),
        None => ClaimExtractor::Sentences,
    };
    Ok(icv::extract_claims(&case.ground_truth, ex).await?.into_iter().map(|c| c.text).collect())
}

async fn run_case(case: &BenchCase, pipeline: &Pipeline, opts: &BenchOptions<'_>) -> Result<CaseResult, BenchError> {
    let claims = gt_claims(case, opts.claim_extractor).await?;
    if claims.is_empty() {
        return Err(BenchError::NoClaims);
    }
    let query = Query::new(case.slide_ref.clone(), case.question.clone())
        .and_then(|q| match &case.thumbnail {
            Some(t) => q.with_thumbnail(t.clone()),
            None => Ok(q),
        });
    let seed = pipeline.options().seed;
    let run = match query {
        Ok(q) => {
            let sid = format!("{}-{}", session_id(&q, seed), case.case_id);
            pipeline.run_in_session(&q, &sid, opts.disable).await.map_err(|e| e.to_string())
        }
        Err(e) => Err(e.to_string()),
    };
    let (task, answer, error) = match run {
        Ok(r) => (r.task.task_type, r.final_answer.text, None),
        Err(e) => (case.task_type.unwrap_or(TaskType::OutOfScope), String::new(), Some(e)),
    };
    let task_type = case.task_type.unwrap_or(task);
    let score = match (&error, opts.metric) {
        (Some(_), _) => 0.0,
        (None, BenchMetric::Precision) => wsi_precision(&claims, &answer, opts.judge.ok_or(BenchError::NoJudge)?).await?,
        (None, BenchMetric::ExactMatch) => exact_match(&case.ground_truth, &answer),
    };
    Ok(CaseResult {
        case_id: case.case_id.clone(),
        task_type,
        group: group_name(task_type.expert_role()).to_string(),
        score,
        gt_claims: claims,
        answer,
        error,
    })
}

/// Runs every case and aggregates. A pipeline failure scores the case 0
/// and records the error; a precision judge failure aborts the bench.
pub async fn run_bench(cases: &[BenchCase], pipeline: &Pipeline, opts: BenchOptions<'_>) -> Result<BenchReport, BenchError> {
    if opts.metric == BenchMetric::Precision && opts.judge.is_none() {
        return Err(BenchError::NoJudge);
    }
    let results: Vec<Result<CaseResult, BenchError>> = stream::iter(cases.iter())
        .map(|c| run_case(c, pipeline, &opts))
        .buffered(opts.parallel.max(1))
        .collect()
        .await;
    Ok(BenchReport::from_cases(opts.metric, results.into_iter().collect::<Result<_, _>>()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::FnChat;

    #[tokio::test]
    async fn precision_is_a_mean() {
        let judge = FnChat::new("j", |r| Ok(if r.key().contains("Claim: a") { "1" } else { "0" }.into()));
        assert_eq!(wsi_precision(&["a", "b"], "whatever", &judge).await.unwrap(), 0.5);
        assert!(matches!(wsi_precision::<&str>(&[], "x", &judge).await, Err(BenchError::NoClaims)));
    }

    #[tokio::test]
    async fn echo_judge_scores_identical_answer_as_one() {
        let judge = FnChat::new("j", |r| {
            let k = r.key();
            let (claim, answer) = k.trim_start_matches("Claim: ").split_once("\n\nAnswer:\n").unwrap();
            Ok(if answer.contains(claim) { "1" } else { "0" }.into())
        });
        let gt = "Glands are irregular. Nuclei are enlarged.";
        let claims: Vec<String> = icv::split_sentences(gt);
        assert_eq!(wsi_precision(&claims, gt, &judge).await.unwrap(), 1.0);
    }

    #[test]
    fn exact_match_folds_case_and_punctuation() {
        assert_eq!(exact_match("Yes", "yes."), 1.0);
        assert_eq!(exact_match("Seminoma", "  SEMINOMA  "), 1.0);
        assert_eq!(exact_match("yes", "yes, probably"), 0.0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = r#"[
            {"case_id": "a", "slide_ref": "s", "question": "q", "ground_truth": "g"},
            {"case_id": "a", "slide_ref": "s", "question": "q", "ground_truth": "g"}
        ]"#;
        let e = parse_bench(text).unwrap_err();
        assert!(matches!(e, BenchError::DuplicateCase(_)) && e.is_input_error());
        assert!(parse_bench("{").unwrap_err().is_input_error());
    }

    #[test]
    fn group_means() {
        let case = |id: &str, t: TaskType, p: f64| CaseResult {
            case_id: id.into(),
            task_type: t,
            group: group_name(t.expert_role()).into(),
            score: p,
            gt_claims: vec![],
            answer: String::new(),
            error: None,
        };
        let r = BenchReport::from_cases(BenchMetric::Precision, vec![
            case("1", TaskType::GlobalMorph, 0.5),
            case("2", TaskType::KeyDiagnostic, 1.0),
            case("3", TaskType::Grading, 0.25),
        ]);
        assert_eq!(r.by_group[0].mean, Some(0.75));
        assert_eq!(r.by_group[1].mean, Some(0.25));
        assert_eq!(r.by_group[2].mean, None);
        assert_eq!(r.overall.mean, Some(1.75 / 3.0));
        assert_eq!(r.by_task.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), ["G.M.", "K.D.", "G.R."]);
        let table = r.to_table();
        assert!(table.contains("Treat. Plan.") && table.contains("0.583"));
    }
}
