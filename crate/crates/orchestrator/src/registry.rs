//! Versioned model registry.

use std::collections::HashMap;

use fedcampus_core::model::{validate_model, CanonicalModel, ModelSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelStatus {
    Active,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRegistryEntry {
    pub model_id: String,
    pub version: u64,
    pub document: CanonicalModel,
    pub uploaded_at: u64,
    pub status: ModelStatus,
    /// Hex SHA-256 of the uploaded bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistryError {
    #[error("invalid model: {}", .0.join("; "))]
    InvalidModel(Vec<String>),
    #[error("unknown model {model_id} v{version:?}")]
    UnknownModel {
        model_id: String,
        version: Option<u64>,
    },
    #[error("registry replay: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Registered {
    New,
    Duplicate,
}

#[derive(Debug, Default)]
pub struct Registry {
    entries: Vec<ModelRegistryEntry>,
    by_hash: HashMap<String, usize>,
    latest: HashMap<String, u64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Registry {
    /// Rebuilds from persisted entries, checking uniqueness and contiguity.
    pub fn restore(entries: Vec<ModelRegistryEntry>) -> Result<Self, RegistryError> {
        let mut reg = Registry::default();
        for (i, e) in entries.into_iter().enumerate() {
            let expect = reg.latest.get(&e.model_id).copied().unwrap_or(0) + 1;
            if e.version != expect {
                return Err(RegistryError::Replay(format!(
                    "entry {} has {} v{}, expected v{expect}",
                    i + 1,
                    e.model_id,
                    e.version
                )));
            }
            reg.insert(e);
        }
        Ok(reg)
    }

    fn insert(&mut self, e: ModelRegistryEntry) {
        self.latest.insert(e.model_id.clone(), e.version);
        self.by_hash.insert(e.sha256.clone(), self.entries.len());
        self.entries.push(e);
    }

    /// Parses and validates an upload, assigning the next version for its id.
    /// The document's own `version` field is overwritten. Byte-identical
    /// re-uploads return the existing entry.
    pub fn register(
        &mut self,
        raw: &[u8],
        uploaded_at: u64,
    ) -> Result<(ModelRegistryEntry, Registered), RegistryError> {
        let hash = sha256_hex(raw);
        if let Some(&i) = self.by_hash.get(&hash) {
            return Ok((self.entries[i].clone(), Registered::Duplicate));
        }
        let mut doc: CanonicalModel = serde_json::from_slice(raw)
            .map_err(|e| RegistryError::InvalidModel(vec![e.to_string()]))?;
        let version = self.latest.get(&doc.model_id).copied().unwrap_or(0) + 1;
        doc.version = version;
        validate_model(&doc).map_err(|vs| {
            RegistryError::InvalidModel(vs.iter().map(|v| v.to_string()).collect())
        })?;
        let entry = ModelRegistryEntry {
            model_id: doc.model_id.clone(),
            version,
            document: doc,
            uploaded_at,
            status: ModelStatus::Active,
            sha256: hash,
        };
        self.insert(entry.clone());
        Ok((entry, Registered::New))
    }

    pub fn entries(&self) -> &[ModelRegistryEntry] {
        &self.entries
    }

    /// A specific version, or the latest when `version` is `None`.
    pub fn get(
        &self,
        model_id: &str,
        version: Option<u64>,
    ) -> Result<&ModelRegistryEntry, RegistryError> {
        let v = version.or_else(|| self.latest.get(model_id).copied());
        v.and_then(|v| {
            self.entries
                .iter()
                .find(|e| e.model_id == model_id && e.version == v)
        })
        .ok_or_else(|| RegistryError::UnknownModel {
            model_id: model_id.into(),
            version,
        })
    }

    pub fn spec(&self, model_id: &str, version: Option<u64>) -> Result<ModelSpec, RegistryError> {
        self.get(model_id, version).map(|e| e.document.spec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, w: f64) -> Vec<u8> {
        serde_json::to_vec(&ModelSpec::linear(id, 2).with_params(vec![w, 0.0, 0.0])).unwrap()
    }

    #[test]
    fn versions_count_up_and_duplicates_are_idempotent() {
        let mut reg = Registry::default();
        let (a, s) = reg.register(&doc("sleep_eff", 0.0), 0).unwrap();
        assert_eq!(
            (a.model_id.as_str(), a.version, s),
            ("sleep_eff", 1, Registered::New)
        );
        let (b, _) = reg.register(&doc("sleep_eff", 1.0), 1).unwrap();
        assert_eq!(b.version, 2);
        let (c, s) = reg.register(&doc("sleep_eff", 1.0), 2).unwrap();
        assert_eq!((c.version, s), (2, Registered::Duplicate));
        assert_eq!(reg.entries().len(), 2);
        let (d, _) = reg.register(&doc("other", 0.0), 3).unwrap();
        assert_eq!(d.version, 1);
        assert_eq!(reg.get("sleep_eff", None).unwrap().version, 2);
        assert_eq!(reg.get("sleep_eff", Some(1)).unwrap().version, 1);
        assert!(reg.get("sleep_eff", Some(3)).is_err());
        assert!(reg.get("nope", None).is_err());
    }

    #[test]
    fn uploaded_version_field_is_overridden() {
        let mut reg = Registry::default();
        let mut m = ModelSpec::linear("m", 1).with_params(vec![0.0, 0.0]);
        m.version = 7;
        let (e, _) = reg.register(&serde_json::to_vec(&m).unwrap(), 0).unwrap();
        assert_eq!((e.version, e.document.version), (1, 1));
    }

    #[test]
    fn invalid_documents_echo_violations() {
        let mut reg = Registry::default();
        let bad = br#"{"model_id":"m","version":1,"arch":"Linear","layers":[{"name":"w","shape":[2]},{"name":"b","shape":[1]}],"params":[1.0]}"#;
        match reg.register(bad, 0) {
            Err(RegistryError::InvalidModel(v)) => assert!(!v.is_empty()),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            reg.register(b"not json", 0),
            Err(RegistryError::InvalidModel(_))
        ));
        assert!(reg.entries().is_empty());
    }

    #[test]
    fn restore_round_trips_and_rejects_gaps() {
        let mut reg = Registry::default();
        for w in 0..3 {
            reg.register(&doc("m", w as f64), w).unwrap();
        }
        let copy = Registry::restore(reg.entries().to_vec()).unwrap();
        assert_eq!(copy.entries(), reg.entries());
        let mut gap = reg.entries().to_vec();
        gap.remove(1);
        assert!(Registry::restore(gap).is_err());
    }
}
