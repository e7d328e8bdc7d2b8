use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendDescriptor, BackendError, BackendKind, Endpoint};

/// Prefix of keys matched against the SHA-256 hex digest of the request key.
pub const HASH_PREFIX: &str = "sha256:";
/// Prefix of keys matched as substrings of the request key.
pub const CONTAINS_PREFIX: &str = "contains:";
/// Fallback key.
pub const WILDCARD: &str = "*";

/// A reply table for offline backends.
///
/// For chat backends the request key is the last user turn and lookup goes:
/// exact key, then `sha256:<hex of key>`, then `contains:<needle>` rules in
/// file order, then `*`. Classifier tables are looked up by exact slide
/// reference only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Script(pub IndexMap<String, String>);

impl Script {
    pub fn from_pairs<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        Self(pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn lookup_chat(&self, key: &str) -> Option<&str> {
        if let Some(v) = self.0.get(key) {
            return Some(v);
        }
        let digest = hex_sha256(key);
        if let Some(v) = self.0.get(&format!("{HASH_PREFIX}{digest}")) {
            return Some(v);
        }
        for (k, v) in &self.0 {
            if let Some(needle) = k.strip_prefix(CONTAINS_PREFIX) {
                if key.contains(needle) {
                    return Some(v);
                }
            }
        }
        self.0.get(WILDCARD).map(String::as_str)
    }

    pub fn lookup_exact(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

pub fn hex_sha256(s: &str) -> String {
    let d = Sha256::digest(s.as_bytes());
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// A chat backend that replies deterministically from `script`.
pub fn make_scripted_backend(id: impl Into<String>, script: Script) -> Result<BackendDescriptor, BackendError> {
    if script.is_empty() {
        return Err(BackendError::EmptyScript);
    }
    Ok(BackendDescriptor::new(id, BackendKind::Chat, Endpoint::Inline(script)))
}

/// A classifier backend answering from a `{slide_ref: label}` table.
pub fn make_scripted_classifier(id: impl Into<String>, table: Script) -> Result<BackendDescriptor, BackendError> {
    if table.is_empty() {
        return Err(BackendError::EmptyScript);
    }
    Ok(BackendDescriptor::new(id, BackendKind::Classifier, Endpoint::Inline(table)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_precedence() {
        let q = "What is the grade?";
        let s = Script::from_pairs([
            ("*", "default"),
            ("contains:grade", "by-substring"),
            (&*format!("sha256:{}", hex_sha256(q)), "by-hash"),
        ]);
        assert_eq!(s.lookup_chat(q), Some("by-hash"));
        assert_eq!(s.lookup_chat("grade 3?"), Some("by-substring"));
        assert_eq!(s.lookup_chat("other"), Some("default"));
        let exact = Script::from_pairs([("grade 3?", "exact"), ("contains:grade", "sub")]);
        assert_eq!(exact.lookup_chat("grade 3?"), Some("exact"));
        assert_eq!(exact.lookup_chat("nothing"), None);
    }

    #[test]
    fn contains_rules_follow_file_order() {
        let s: Script = serde_json::from_str(r#"{"contains:b":"first","contains:a":"second"}"#).unwrap();
        assert_eq!(s.lookup_chat("ab"), Some("first"));
    }

    #[test]
    fn empty_script_rejected() {
        assert_eq!(make_scripted_backend("x", Script::default()), Err(BackendError::EmptyScript));
        assert_eq!(make_scripted_classifier("x", Script::default()), Err(BackendError::EmptyScript));
    }
}
