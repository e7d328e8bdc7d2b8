//! TOML run configuration. Relative paths are resolved against the directory
//! of the configuration file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendDescriptor, BackendKind, Endpoint};
use crate::domain::{normalize_weights, TaskType, WeightConfig};
use crate::knowledge::{DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP, DEFAULT_SUMMARY_BUDGET, DEFAULT_TOP_K};
use crate::lexicon::{Lexicon, LexiconError, TermTable};
use crate::summary::DEFAULT_R_MAX;
use crate::vizfusion::FusionMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("agent {role} refers to unknown backend {id:?}")]
    UnknownBackend { role: String, id: String },
    #[error("agent {role} needs a {expected} backend but {id:?} is not one")]
    WrongKind {
        role: String,
        id: String,
        expected: BackendKind,
    },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

/// A pipeline stage that can be switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "ICV")]
    Icv,
    #[serde(rename = "FactEKV")]
    FactEkv,
    #[serde(rename = "ConsensusEKV")]
    ConsensusEkv,
    Summarizing,
    Reasoning,
    TaskRouting,
    ExpertSelection,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Icv,
        Stage::FactEkv,
        Stage::ConsensusEkv,
        Stage::Summarizing,
        Stage::Reasoning,
        Stage::TaskRouting,
        Stage::ExpertSelection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Icv => "ICV",
            Stage::FactEkv => "FactEKV",
            Stage::ConsensusEkv => "ConsensusEKV",
            Stage::Summarizing => "Summarizing",
            Stage::Reasoning => "Reasoning",
            Stage::TaskRouting => "TaskRouting",
            Stage::ExpertSelection => "ExpertSelection",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Stage::ALL
            .into_iter()
            .find(|st| st.name().to_ascii_lowercase() == key)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Which backend plays which agent role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentsConfig {
    /// Candidate answer generators, in priority order.
    pub zoo: Vec<String>,
    /// M: candidates generated per query.
    pub models_per_task: usize,
    pub router: Option<String>,
    /// Default judge for every scoring role below that is left unset.
    pub judge: Option<String>,
    pub logic_judge: Option<String>,
    pub fact_judge: Option<String>,
    pub alignment_judge: Option<String>,
    pub bench_judge: Option<String>,
    pub claim_extractor: Option<String>,
    pub keyword_extractor: Option<String>,
    pub cancer_type_extractor: Option<String>,
    pub reference_summarizer: Option<String>,
    pub summarizer: Option<String>,
    pub reasoners: Vec<String>,
    pub classifiers: Vec<String>,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        Self {
            zoo: Vec::new(),
            models_per_task: 5,
            router: None,
            judge: None,
            logic_judge: None,
            fact_judge: None,
            alignment_judge: None,
            bench_judge: None,
            claim_extractor: None,
            keyword_extractor: None,
            cancer_type_extractor: None,
            reference_summarizer: None,
            summarizer: None,
            reasoners: Vec::new(),
            classifiers: Vec::new(),
        }
    }
}

impl AgentsConfig {
    pub fn logic_judge(&self) -> Option<&str> {
        self.logic_judge.as_deref().or(self.judge.as_deref())
    }

    pub fn fact_judge(&self) -> Option<&str> {
        self.fact_judge.as_deref().or(self.judge.as_deref())
    }

    pub fn bench_judge(&self) -> Option<&str> {
        self.bench_judge.as_deref().or(self.judge.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Persisted knowledge-base index; no retrieval when absent.
    pub index: Option<PathBuf>,
    pub chunk_size: usize,
    pub overlap: usize,
    pub top_k: usize,
    /// Character budget of the reference summary.
    pub summary_budget: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            index: None,
            chunk_size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_OVERLAP,
            top_k: DEFAULT_TOP_K,
            summary_budget: DEFAULT_SUMMARY_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeliberationConfig {
    pub r_max: u32,
}

impl Default for DeliberationConfig {
    fn default() -> Self {
        Self { r_max: DEFAULT_R_MAX }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    /// Rule file replacing the builtin routing rules.
    pub rules: Option<PathBuf>,
    /// Task used when task routing is disabled.
    pub default_task: TaskType,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            rules: None,
            default_task: TaskType::KeyDiagnostic,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptsConfig {
    /// Directory of `<role>.txt` expert templates.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexiconConfig {
    pub synonyms: Option<PathBuf>,
    pub cancer_types: Option<PathBuf>,
    pub diagnostic_terms: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Attention-map files; fusion runs only when nonempty.
    pub maps: Vec<PathBuf>,
    pub rows: usize,
    pub cols: usize,
    pub mode: FusionMode,
    /// PNG written after fusion, with a JSON sidecar.
    pub output: Option<PathBuf>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            maps: Vec::new(),
            rows: 64,
            cols: 64,
            mode: FusionMode::Mean,
            output: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Cap on candidates verified (and generated) concurrently; 0 means one
    /// per candidate.
    pub parallelism: usize,
    pub disable: BTreeSet<Stage>,
}

/// How bench answers are scored against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMetric {
    /// Mean judged entailment of the ground-truth claims.
    #[default]
    Precision,
    /// 1 when the case-folded answer equals the ground truth, ignoring
    /// trailing punctuation; for closed-ended questions.
    ExactMatch,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub metric: BenchMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub weights: WeightConfig,
    #[serde(default)]
    pub agents: AgentsConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub deliberation: DeliberationConfig,
    #[serde(default)]
    pub routing: RoutingConfig,
    #[serde(default)]
    pub prompts: PromptsConfig,
    #[serde(default)]
    pub lexicon: LexiconConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub backends: Vec<BackendDescriptor>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    /// Parses, resolves relative paths against `base_dir` and validates.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for b in &mut self.backends {
            if let Endpoint::Script(p) = &mut b.endpoint {
                resolve(base, p);
            }
        }
        let opts = [
            &mut self.retrieval.index,
            &mut self.routing.rules,
            &mut self.prompts.dir,
            &mut self.lexicon.synonyms,
            &mut self.lexicon.cancer_types,
            &mut self.lexicon.diagnostic_terms,
            &mut self.fusion.output,
        ];
        for p in opts.into_iter().flatten() {
            resolve(base, p);
        }
        for p in &mut self.fusion.maps {
            resolve(base, p);
        }
    }

    pub fn backend(&self, id: &str) -> Option<&BackendDescriptor> {
        self.backends.iter().find(|b| b.id == id)
    }

    fn check_ref(&self, role: &str, id: &str, kind: BackendKind) -> Result<(), ConfigError> {
        match self.backend(id) {
            None => Err(ConfigError::UnknownBackend {
                role: role.into(),
                id: id.into(),
            }),
            Some(b) if b.kind != kind => Err(ConfigError::WrongKind {
                role: role.into(),
                id: id.into(),
                expected: kind,
            }),
            Some(_) => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        normalize_weights(self.weights).map_err(|e| ConfigError::Invalid(format!("weights: {e}")))?;
        let mut ids = BTreeSet::new();
        for b in &self.backends {
            if !ids.insert(b.id.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate backend id {:?}", b.id)));
            }
            b.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let a = &self.agents;
        if a.zoo.is_empty() {
            return Err(ConfigError::Invalid("agents.zoo lists no models".into()));
        }
        if a.models_per_task == 0 {
            return Err(ConfigError::Invalid("agents.models_per_task must be at least 1".into()));
        }
        for id in &a.zoo {
            self.check_ref("zoo", id, BackendKind::Chat)?;
        }
        for id in &a.reasoners {
            self.check_ref("reasoner", id, BackendKind::Chat)?;
        }
        for id in &a.classifiers {
            self.check_ref("classifier", id, BackendKind::Classifier)?;
        }
        let singles = [
            ("router", &a.router),
            ("judge", &a.judge),
            ("logic_judge", &a.logic_judge),
            ("fact_judge", &a.fact_judge),
            ("alignment_judge", &a.alignment_judge),
            ("bench_judge", &a.bench_judge),
            ("claim_extractor", &a.claim_extractor),
            ("keyword_extractor", &a.keyword_extractor),
            ("cancer_type_extractor", &a.cancer_type_extractor),
            ("reference_summarizer", &a.reference_summarizer),
            ("summarizer", &a.summarizer),
        ];
        for (role, id) in singles {
            if let Some(id) = id {
                self.check_ref(role, id, BackendKind::Chat)?;
            }
        }
        let r = &self.retrieval;
        if r.chunk_size == 0 || r.overlap >= r.chunk_size {
            return Err(ConfigError::Invalid(format!(
                "retrieval: need 0 <= overlap < chunk_size, got {} and {}",
                r.overlap, r.chunk_size
            )));
        }
        if r.top_k == 0 {
            return Err(ConfigError::Invalid("retrieval.top_k must be at least 1".into()));
        }
        if self.deliberation.r_max == 0 {
            return Err(ConfigError::Invalid("deliberation.r_max must be at least 1".into()));
        }
        if !self.fusion.maps.is_empty() && (self.fusion.rows == 0 || self.fusion.cols == 0) {
            return Err(ConfigError::Invalid("fusion grid must be at least 1x1".into()));
        }
        Ok(())
    }

    /// Builtin tables with any configured file replacing its table.
    pub fn lexicon(&self) -> Result<Lexicon, ConfigError> {
        let mut lex = Lexicon::builtin();
        if let Some(p) = &self.lexicon.synonyms {
            lex.synonyms = TermTable::load(p)?;
        }
        if let Some(p) = &self.lexicon.cancer_types {
            lex.cancer_types = TermTable::load(p)?;
        }
        if let Some(p) = &self.lexicon.diagnostic_terms {
            lex.diagnostic_terms = TermTable::load(p)?;
        }
        Ok(lex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        [agents]
        zoo = ["m1"]
        judge = "j"
        classifiers = ["c1"]

        [[backends]]
        id = "m1"
        kind = "chat"
        endpoint = { script = "scripts/m1.json" }

        [[backends]]
        id = "j"
        kind = "chat"
        endpoint = { inline = { "*" = "1" } }

        [[backends]]
        id = "c1"
        kind = "classifier"
        endpoint = { inline = { s1 = "seminoma" } }
    "#;

    #[test]
    fn parses_with_defaults_and_resolves_paths() {
        let cfg = Config::from_toml(BASE, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.weights, WeightConfig::default());
        assert_eq!(cfg.agents.models_per_task, 5);
        assert_eq!(cfg.deliberation.r_max, 3);
        assert_eq!(cfg.agents.logic_judge(), Some("j"));
        assert_eq!(cfg.backend("m1").unwrap().endpoint, Endpoint::Script("/cfg/scripts/m1.json".into()));
    }

    #[test]
    fn rejects_bad_references() {
        let bad = BASE.replace(r#"zoo = ["m1"]"#, r#"zoo = ["nope"]"#);
        assert!(matches!(Config::from_toml(&bad, Path::new(".")), Err(ConfigError::UnknownBackend { .. })));
        let bad = BASE.replace(r#"classifiers = ["c1"]"#, r#"classifiers = ["j"]"#);
        assert!(matches!(Config::from_toml(&bad, Path::new(".")), Err(ConfigError::WrongKind { .. })));
        let bad = format!("[weights]\nw1 = 0\nw2 = 0\nw3 = 0\n{BASE}");
        assert!(matches!(Config::from_toml(&bad, Path::new(".")), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::from_toml("nonsense = 1", Path::new(".")), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn stages_parse_by_name() {
        assert_eq!("icv".parse::<Stage>().unwrap(), Stage::Icv);
        assert_eq!("Fact-EKV".parse::<Stage>().unwrap(), Stage::FactEkv);
        assert!("everything".parse::<Stage>().is_err());
        let cfg = Config::from_toml(&format!("[pipeline]\ndisable = [\"ICV\", \"Reasoning\"]\n{BASE}"), Path::new(".")).unwrap();
        assert!(cfg.pipeline.disable.contains(&Stage::Reasoning));
    }
}
