//! Shared domain types: queries, task taxonomy, verification weights and
//! per-response score bundles.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used for every score comparison.
pub const SCORE_TOLERANCE: f64 = 1e-12;

/// Largest accepted thumbnail edge, in pixels.
pub const MAX_THUMBNAIL_EDGE: u32 = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("all verification weights are zero")]
    AllZeroWeights,
    #[error("weight {name} is negative or not finite: {value}")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error("input {name} = {value} lies outside [0, 1]")]
    OutOfRangeInput { name: &'static str, value: f64 },
    #[error("cannot average an empty list")]
    EmptyList,
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("slide reference is empty")]
    EmptySlideRef,
    #[error("thumbnail {path}: {reason}")]
    BadThumbnail { path: PathBuf, reason: String },
}

/// Opaque identifier of a whole-slide image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SlideRef(pub String);

impl SlideRef {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SlideRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A slide plus the natural-language question asked about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub slide_ref: SlideRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail_path: Option<PathBuf>,
    pub question: String,
}

impl Query {
    /// Builds a query without a thumbnail.
    pub fn new(slide_ref: impl Into<String>, question: impl Into<String>) -> Result<Self, QueryError> {
        let q = Self {
            slide_ref: SlideRef::new(slide_ref),
            thumbnail_path: None,
            question: question.into(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn with_thumbnail(mut self, path: impl Into<PathBuf>) -> Result<Self, QueryError> {
        let path = path.into();
        check_thumbnail(&path)?;
        self.thumbnail_path = Some(path);
        Ok(self)
    }

    /// Checks the question and slide invariants and, when present, decodes
    /// the thumbnail to confirm its dimensions.
    pub fn validate(&self) -> Result<(), QueryError> {
        if self.question.trim().is_empty() {
            return Err(QueryError::EmptyQuestion);
        }
        if self.slide_ref.0.trim().is_empty() {
            return Err(QueryError::EmptySlideRef);
        }
        if let Some(p) = &self.thumbnail_path {
            check_thumbnail(p)?;
        }
        Ok(())
    }
}

fn check_thumbnail(path: &Path) -> Result<(), QueryError> {
    let img = image::open(path).map_err(|e| QueryError::BadThumbnail {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width(), img.height());
    if !(1..=MAX_THUMBNAIL_EDGE).contains(&w) || !(1..=MAX_THUMBNAIL_EDGE).contains(&h) {
        return Err(QueryError::BadThumbnail {
            path: path.to_path_buf(),
            reason: format!("dimensions {w}x{h} outside 1..={MAX_THUMBNAIL_EDGE}"),
        });
    }
    Ok(())
}

/// The question taxonomy: ten benchmark subtypes, report generation, and a
/// terminal out-of-scope value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskType {
    GlobalMorph,
    KeyDiagnostic,
    RegionalStructure,
    SpecificFeature,
    HistologicalTyping,
    Grading,
    MolecularSubtyping,
    Staging,
    TreatmentRecommendation,
    Prognosis,
    ReportGeneration,
    OutOfScope,
}

impl TaskType {
    pub const ALL: [TaskType; 12] = [
        TaskType::GlobalMorph,
        TaskType::KeyDiagnostic,
        TaskType::RegionalStructure,
        TaskType::SpecificFeature,
        TaskType::HistologicalTyping,
        TaskType::Grading,
        TaskType::MolecularSubtyping,
        TaskType::Staging,
        TaskType::TreatmentRecommendation,
        TaskType::Prognosis,
        TaskType::ReportGeneration,
        TaskType::OutOfScope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::GlobalMorph => "GlobalMorph",
            TaskType::KeyDiagnostic => "KeyDiagnostic",
            TaskType::RegionalStructure => "RegionalStructure",
            TaskType::SpecificFeature => "SpecificFeature",
            TaskType::HistologicalTyping => "HistologicalTyping",
            TaskType::Grading => "Grading",
            TaskType::MolecularSubtyping => "MolecularSubtyping",
            TaskType::Staging => "Staging",
            TaskType::TreatmentRecommendation => "TreatmentRecommendation",
            TaskType::Prognosis => "Prognosis",
            TaskType::ReportGeneration => "ReportGeneration",
            TaskType::OutOfScope => "OutOfScope",
        }
    }

    /// Benchmark abbreviation (G.M., K.D., ...).
    pub fn abbreviation(self) -> &'static str {
        match self {
            TaskType::GlobalMorph => "G.M.",
            TaskType::KeyDiagnostic => "K.D.",
            TaskType::RegionalStructure => "R.S.",
            TaskType::SpecificFeature => "S.F.",
            TaskType::HistologicalTyping => "H.T.",
            TaskType::Grading => "G.R.",
            TaskType::MolecularSubtyping => "M.S.",
            TaskType::Staging => "S.T.",
            TaskType::TreatmentRecommendation => "T.R.",
            TaskType::Prognosis => "P.R.",
            TaskType::ReportGeneration => "R.G.",
            TaskType::OutOfScope => "O.S.",
        }
    }

    /// The expert role that owns this task type, `None` for out-of-scope.
    pub fn expert_role(self) -> Option<ExpertRole> {
        use TaskType::*;
        match self {
            GlobalMorph | KeyDiagnostic | RegionalStructure | SpecificFeature => Some(ExpertRole::Morphology),
            HistologicalTyping | Grading | MolecularSubtyping | Staging => Some(ExpertRole::Diagnosis),
            TreatmentRecommendation | Prognosis => Some(ExpertRole::TreatmentPlanning),
            ReportGeneration => Some(ExpertRole::ReportGeneration),
            OutOfScope => None,
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown task type {0:?}")]
pub struct UnknownTaskType(pub String);

impl FromStr for TaskType {
    type Err = UnknownTaskType;

    /// Accepts the variant name or its abbreviation, case-insensitively and
    /// ignoring punctuation and whitespace.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        TaskType::ALL
            .into_iter()
            .find(|t| {
                let name = t.name().to_ascii_lowercase();
                let abbr: String = t.abbreviation().chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
                key == name || key == abbr
            })
            .ok_or_else(|| UnknownTaskType(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpertRole {
    Morphology,
    Diagnosis,
    TreatmentPlanning,
    ReportGeneration,
}

impl ExpertRole {
    pub const ALL: [ExpertRole; 4] = [
        ExpertRole::Morphology,
        ExpertRole::Diagnosis,
        ExpertRole::TreatmentPlanning,
        ExpertRole::ReportGeneration,
    ];

    /// File stem of the role's prompt template.
    pub fn slug(self) -> &'static str {
        match self {
            ExpertRole::Morphology => "morphology",
            ExpertRole::Diagnosis => "diagnosis",
            ExpertRole::TreatmentPlanning => "treatment_planning",
            ExpertRole::ReportGeneration => "report_generation",
        }
    }
}

/// Importance weights of the three verification processes
/// (internal consistency, knowledge, classifier consensus).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            w1: 1.0 / 3.0,
            w2: 1.0 / 3.0,
            w3: 1.0 / 3.0,
        }
    }
}

impl WeightConfig {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Self {
        Self { w1, w2, w3 }
    }

    pub fn sum(&self) -> f64 {
        self.w1 + self.w2 + self.w3
    }

    pub fn is_normalized(&self) -> bool {
        (self.sum() - 1.0).abs() <= SCORE_TOLERANCE
    }
}

/// Scales the weights to sum to one, preserving their ratios.
pub fn normalize_weights(w: WeightConfig) -> Result<WeightConfig, ScoreError> {
    for (name, value) in [("w1", w.w1), ("w2", w.w2), ("w3", w.w3)] {
        if !value.is_finite() || value < 0.0 {
            return Err(ScoreError::InvalidWeight { name, value });
        }
    }
    let sum = w.sum();
    if sum == 0.0 {
        return Err(ScoreError::AllZeroWeights);
    }
    if sum == 1.0 {
        return Ok(w);
    }
    Ok(WeightConfig {
        w1: w.w1 / sum,
        w2: w.w2 / sum,
        w3: w.w3 / sum,
    })
}

/// The per-response verification scores.
///
/// `phi_k` is the knowledge-verification (fact) score. Disabled or failed
/// components carry 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub phi_g: f64,
    pub phi_e: f64,
    pub phi_l: f64,
    pub phi_k: f64,
    pub phi_a: f64,
    pub phi_b: f64,
    pub phi_c: f64,
    pub phi_total: f64,
    pub phi_c_applicable: bool,
}

impl ScoreBundle {
    /// Checks range and the algebraic couplings between components.
    pub fn check_invariants(&self) -> Result<(), String> {
        let fields = [
            ("phi_g", self.phi_g),
            ("phi_e", self.phi_e),
            ("phi_l", self.phi_l),
            ("phi_k", self.phi_k),
            ("phi_a", self.phi_a),
            ("phi_b", self.phi_b),
            ("phi_c", self.phi_c),
            ("phi_total", self.phi_total),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0,1]"));
            }
        }
        if (self.phi_l - (self.phi_g + self.phi_e) / 2.0).abs() > SCORE_TOLERANCE {
            return Err("phi_l is not the mean of phi_g and phi_e".into());
        }
        if self.phi_c_applicable && (self.phi_c - self.phi_a * self.phi_b).abs() > SCORE_TOLERANCE {
            return Err("phi_c is not phi_a * phi_b".into());
        }
        Ok(())
    }
}

/// Returns `Err(OutOfRangeInput)` unless `value` lies in [0, 1].
pub(crate) fn check_unit(name: &'static str, value: f64) -> Result<f64, ScoreError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(ScoreError::OutOfRangeInput { name, value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_weights_normalize_to_thirds() {
        let w = normalize_weights(WeightConfig::new(1.0, 1.0, 1.0)).unwrap();
        assert!((w.w1 - 1.0 / 3.0).abs() <= SCORE_TOLERANCE);
        assert!((w.w2 - 1.0 / 3.0).abs() <= SCORE_TOLERANCE);
        assert!((w.w3 - 1.0 / 3.0).abs() <= SCORE_TOLERANCE);
    }

    #[test]
    fn single_component_weight() {
        let w = normalize_weights(WeightConfig::new(2.0, 0.0, 0.0)).unwrap();
        assert_eq!(w, WeightConfig::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn weights_one_two_one() {
        let w = normalize_weights(WeightConfig::new(1.0, 2.0, 1.0)).unwrap();
        assert_eq!(w, WeightConfig::new(0.25, 0.5, 0.25));
    }

    #[test]
    fn all_zero_weights_rejected() {
        assert_eq!(
            normalize_weights(WeightConfig::new(0.0, 0.0, 0.0)),
            Err(ScoreError::AllZeroWeights)
        );
        assert!(matches!(
            normalize_weights(WeightConfig::new(-1.0, 2.0, 0.0)),
            Err(ScoreError::InvalidWeight { name: "w1", .. })
        ));
    }

    #[test]
    fn task_roles_follow_fixed_mapping() {
        assert_eq!(TaskType::Staging.expert_role(), Some(ExpertRole::Diagnosis));
        assert_eq!(TaskType::SpecificFeature.expert_role(), Some(ExpertRole::Morphology));
        assert_eq!(TaskType::Prognosis.expert_role(), Some(ExpertRole::TreatmentPlanning));
        assert_eq!(TaskType::ReportGeneration.expert_role(), Some(ExpertRole::ReportGeneration));
        assert_eq!(TaskType::OutOfScope.expert_role(), None);
    }

    #[test]
    fn task_type_parses_names_and_abbreviations() {
        for t in TaskType::ALL {
            assert_eq!(t.name().parse::<TaskType>().unwrap(), t);
            assert_eq!(t.abbreviation().parse::<TaskType>().unwrap(), t);
        }
        assert_eq!(" histologicaltyping ".parse::<TaskType>().unwrap(), TaskType::HistologicalTyping);
        assert!("capital".parse::<TaskType>().is_err());
    }

    #[test]
    fn blank_question_rejected() {
        assert!(matches!(Query::new("s1", "   \n"), Err(QueryError::EmptyQuestion)));
        assert!(Query::new("s1", "What grade?").is_ok());
    }

    #[test]
    fn thumbnail_dimensions_checked() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.png");
        image::RgbImage::new(16, 8).save(&ok).unwrap();
        let big = dir.path().join("big.png");
        image::RgbImage::new(1025, 4).save(&big).unwrap();
        let q = Query::new("s1", "Describe the slide.").unwrap();
        assert!(q.clone().with_thumbnail(&ok).is_ok());
        assert!(matches!(q.clone().with_thumbnail(&big), Err(QueryError::BadThumbnail { .. })));
        assert!(matches!(
            q.with_thumbnail(dir.path().join("missing.png")),
            Err(QueryError::BadThumbnail { .. })
        ));
    }

    proptest! {
        #[test]
        fn normalization_sums_to_one_and_is_idempotent(
            w1 in 0.0f64..100.0, w2 in 0.0f64..100.0, w3 in 0.0f64..100.0
        ) {
            prop_assume!(w1 + w2 + w3 > 0.0);
            let once = normalize_weights(WeightConfig::new(w1, w2, w3)).unwrap();
            prop_assert!(once.is_normalized());
            let twice = normalize_weights(once).unwrap();
            prop_assert!((twice.w1 - once.w1).abs() <= SCORE_TOLERANCE);
            prop_assert!((twice.w2 - once.w2).abs() <= SCORE_TOLERANCE);
            prop_assert!((twice.w3 - once.w3).abs() <= SCORE_TOLERANCE);
            // ratios preserved
            if w2 > 0.0 {
                prop_assert!((once.w1 / once.w2 - w1 / w2).abs() <= 1e-9 * (1.0 + w1 / w2));
            }
        }
    }
}
