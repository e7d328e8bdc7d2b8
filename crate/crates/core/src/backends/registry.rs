use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use super::{BackendClient, BackendDescriptor, BackendError, BackendKind, ChatClient, SlideClassifier};
use crate::lexicon::TermTable;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("duplicate backend id {0:?}")]
    Duplicate(String),
    #[error("no {kind} backend with id {id:?}")]
    Missing { id: String, kind: BackendKind },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// All configured backends, keyed by id, in registry order.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    descriptors: Vec<BackendDescriptor>,
    chat: HashMap<String, Arc<dyn ChatClient>>,
    classifiers: HashMap<String, Arc<dyn SlideClassifier>>,
}

impl std::fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendRegistry")
            .field("ids", &self.descriptors.iter().map(|d| d.id.as_str()).collect::<Vec<_>>())
            .finish()
    }
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_descriptors(
        descriptors: impl IntoIterator<Item = BackendDescriptor>,
        synonyms: Arc<TermTable>,
        seed: Option<u64>,
    ) -> Result<Self, RegistryError> {
        let mut reg = Self::new();
        for d in descriptors {
            let client = Arc::new(BackendClient::with_synonyms(d.clone(), synonyms.clone())?.with_seed(seed));
            match d.kind {
                BackendKind::Chat => reg.add_chat(d, client)?,
                BackendKind::Classifier => reg.add_classifier(d, client)?,
            }
        }
        Ok(reg)
    }

    fn check_new(&self, id: &str) -> Result<(), RegistryError> {
        if self.descriptors.iter().any(|d| d.id == id) {
            return Err(RegistryError::Duplicate(id.to_string()));
        }
        Ok(())
    }

    /// Registers a chat client under `desc.id`.
    pub fn add_chat(&mut self, desc: BackendDescriptor, client: Arc<dyn ChatClient>) -> Result<(), RegistryError> {
        self.check_new(&desc.id)?;
        self.chat.insert(desc.id.clone(), client);
        self.descriptors.push(desc);
        Ok(())
    }

    pub fn add_classifier(
        &mut self,
        desc: BackendDescriptor,
        client: Arc<dyn SlideClassifier>,
    ) -> Result<(), RegistryError> {
        self.check_new(&desc.id)?;
        self.classifiers.insert(desc.id.clone(), client);
        self.descriptors.push(desc);
        Ok(())
    }

    pub fn descriptors(&self) -> &[BackendDescriptor] {
        &self.descriptors
    }

    pub fn descriptor(&self, id: &str) -> Option<&BackendDescriptor> {
        self.descriptors.iter().find(|d| d.id == id)
    }

    pub fn chat(&self, id: &str) -> Result<Arc<dyn ChatClient>, RegistryError> {
        self.chat.get(id).cloned().ok_or_else(|| RegistryError::Missing {
            id: id.to_string(),
            kind: BackendKind::Chat,
        })
    }

    pub fn classifier(&self, id: &str) -> Result<Arc<dyn SlideClassifier>, RegistryError> {
        self.classifiers.get(id).cloned().ok_or_else(|| RegistryError::Missing {
            id: id.to_string(),
            kind: BackendKind::Classifier,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{make_scripted_backend, make_scripted_classifier, Script};
    use crate::lexicon::Lexicon;

    #[test]
    fn ids_must_be_unique() {
        let a = make_scripted_backend("x", Script::from_pairs([("*", "1")])).unwrap();
        let b = make_scripted_classifier("x", Script::from_pairs([("s", "l")])).unwrap();
        let err = BackendRegistry::from_descriptors([a, b], Arc::new(Lexicon::builtin().synonyms), None).unwrap_err();
        assert!(matches!(err, RegistryError::Duplicate(id) if id == "x"));
    }

    #[test]
    fn lookup_by_kind() {
        let a = make_scripted_backend("gen", Script::from_pairs([("*", "1")])).unwrap();
        let b = make_scripted_classifier("cls", Script::from_pairs([("s", "l")])).unwrap();
        let reg = BackendRegistry::from_descriptors([a, b], Arc::new(Lexicon::builtin().synonyms), None).unwrap();
        assert!(reg.chat("gen").is_ok());
        assert!(reg.classifier("cls").is_ok());
        assert!(matches!(reg.chat("cls"), Err(RegistryError::Missing { .. })));
        assert_eq!(reg.descriptors().len(), 2);
    }
}
