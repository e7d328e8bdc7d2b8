//! Term tables: label synonyms, cancer-type lexicon and diagnostic-term
//! lexicon. All three share the `term<TAB>canonical` text format.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_SYNONYMS: &str = include_str!("../data/synonyms.tsv");
pub const DEFAULT_CANCER_TYPES: &str = include_str!("../data/cancer_types.tsv");
pub const DEFAULT_DIAGNOSTIC_TERMS: &str = include_str!("../data/diagnostic_terms.tsv");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("synonym cycle through {0:?}")]
    Cycle(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Lowercases, trims and collapses internal whitespace.
pub fn fold(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// A map from surface forms to canonical terms.
///
/// Chains (`a -> b`, `b -> c`) are resolved at load time so a single lookup
/// always lands on a fixed point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermTable {
    map: BTreeMap<String, String>,
}

impl TermTable {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let term = fold(cols.next().unwrap_or_default());
            let canonical = cols.next().map(fold).unwrap_or_else(|| term.clone());
            if cols.next().is_some() {
                return Err(LexiconError::Parse {
                    line: i + 1,
                    reason: "more than two columns".into(),
                });
            }
            if term.is_empty() || canonical.is_empty() {
                return Err(LexiconError::Parse {
                    line: i + 1,
                    reason: "empty term".into(),
                });
            }
            map.insert(term, canonical);
        }
        let mut table = Self { map };
        table.resolve_chains()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    fn resolve_chains(&mut self) -> Result<(), LexiconError> {
        let keys: Vec<String> = self.map.keys().cloned().collect();
        for k in keys {
            let mut cur = self.map[&k].clone();
            let mut steps = 0;
            while let Some(next) = self.map.get(&cur) {
                if *next == cur {
                    break;
                }
                cur = next.clone();
                steps += 1;
                if steps > self.map.len() {
                    return Err(LexiconError::Cycle(k));
                }
            }
            self.map.insert(k, cur);
        }
        Ok(())
    }

    /// Canonical form of `s`, or the folded input when the table has no entry.
    pub fn normalize(&self, s: &str) -> String {
        let f = fold(s);
        match self.map.get(&f) {
            Some(c) => c.clone(),
            None => f,
        }
    }

    pub fn get(&self, s: &str) -> Option<&str> {
        self.map.get(&fold(s)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// All occurrences of table surface forms in `text`, as
    /// `(start_byte, surface_len, canonical)` on the lowercased text, matched
    /// on word boundaries. Overlapping shorter matches inside a longer one
    /// starting at the same position are dropped.
    pub fn find_all(&self, text: &str) -> Vec<(usize, usize, String)> {
        let hay = text.to_lowercase();
        let bytes = hay.as_bytes();
        let is_word = |b: u8| b.is_ascii_alphanumeric() || b == b'-';
        let mut hits: Vec<(usize, usize, String)> = Vec::new();
        for (term, canonical) in &self.map {
            let mut from = 0;
            while let Some(off) = hay[from..].find(term.as_str()) {
                let start = from + off;
                let end = start + term.len();
                let left_ok = start == 0 || !is_word(bytes[start - 1]);
                let right_ok = end == bytes.len() || !is_word(bytes[end]);
                if left_ok && right_ok {
                    hits.push((start, term.len(), canonical.clone()));
                }
                from = start + 1;
                while !hay.is_char_boundary(from) {
                    from += 1;
                }
            }
        }
        // earliest first, longest first at equal start
        hits.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        let mut out: Vec<(usize, usize, String)> = Vec::new();
        let mut covered_until = 0usize;
        for h in hits {
            if !out.is_empty() && h.0 < covered_until {
                continue;
            }
            covered_until = h.0 + h.1;
            out.push(h);
        }
        out
    }
}

/// The three tables used by the verification agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub synonyms: TermTable,
    pub cancer_types: TermTable,
    pub diagnostic_terms: TermTable,
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self {
            synonyms: TermTable::parse(DEFAULT_SYNONYMS).expect("builtin synonyms"),
            cancer_types: TermTable::parse(DEFAULT_CANCER_TYPES).expect("builtin cancer types"),
            diagnostic_terms: TermTable::parse(DEFAULT_DIAGNOSTIC_TERMS).expect("builtin diagnostic terms"),
        }
    }

    /// Normalized label: folded then synonym-mapped.
    pub fn normalize_label(&self, s: &str) -> String {
        self.synonyms.normalize(s)
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::builtin()
    }
}
