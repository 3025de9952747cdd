//! Content-addressed checkpoints plus an index recording, for each stage,
//! the checkpoint hash and the hashes of the predecessors it was trained
//! against.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stages::Stage;
use super::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub hash: String,
    pub parents: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageIndex {
    pub stages: BTreeMap<String, StageEntry>,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Store { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("stages.json")
    }

    pub fn checkpoint_path(&self, hash: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{hash}.json"))
    }

    pub fn index(&self) -> Result<StageIndex> {
        let p = self.index_path();
        if !p.exists() {
            return Ok(StageIndex::default());
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks that `stage` has a checkpoint whose predecessors are the
    /// current ones, recursively.
    pub fn require(&self, stage: Stage) -> Result<StageEntry> {
        let index = self.index()?;
        self.require_in(&index, stage)
    }

    fn require_in(&self, index: &StageIndex, stage: Stage) -> Result<StageEntry> {
        let entry = index.stages.get(stage.as_str()).cloned().ok_or_else(|| {
            Error::dependency(stage.as_str(), format!("no checkpoint found; run `train {}` first", stage.as_str()))
        })?;
        for dep in stage.dependencies() {
            let current = self.require_in(index, *dep)?;
            if entry.parents.get(dep.as_str()) != Some(&current.hash) {
                return Err(Error::dependency(
                    dep.as_str(),
                    format!("the {} checkpoint was trained against a different {}; retrain it", stage.as_str(), dep.as_str()),
                ));
            }
        }
        Ok(entry)
    }

    /// Writes a checkpoint, records it for `stage` and returns its hash.
    pub fn put<P: Serialize>(&self, stage: Stage, payload: &P) -> Result<String> {
        let mut index = self.index()?;
        let mut parents = BTreeMap::new();
        for dep in stage.dependencies() {
            parents.insert(dep.as_str().to_string(), self.require_in(&index, *dep)?.hash);
        }
        let bytes = serde_json::to_vec(payload)?;
        let hash = sha256_hex(&bytes);
        write_atomic(&self.checkpoint_path(&hash), &bytes)?;
        index.stages.insert(stage.as_str().to_string(), StageEntry { hash: hash.clone(), parents });
        write_atomic(&self.index_path(), serde_json::to_string_pretty(&index)?.as_bytes())?;
        Ok(hash)
    }

    /// Loads the current checkpoint of `stage`, verifying its hash.
    pub fn get<P: DeserializeOwned>(&self, stage: Stage) -> Result<(P, String)> {
        let entry = self.require(stage)?;
        let path = self.checkpoint_path(&entry.hash);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.hash {
            return Err(Error::dependency(stage.as_str(), format!("{} does not match its content hash", path.display())));
        }
        Ok((serde_json::from_slice(&bytes)?, entry.hash))
    }

    /// Current checkpoint hash of every stage that has one.
    pub fn hashes(&self) -> Result<BTreeMap<String, String>> {
        Ok(self.index()?.stages.into_iter().map(|(k, v)| (k, v.hash)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dag_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::new(dir.path());
        let err = s.put(Stage::FeatureCodec, &1).unwrap_err();
        assert!(matches!(&err, Error::Dependency { stage, .. } if stage == "extractor"), "{err}");
        s.put(Stage::Extractor, &"a").unwrap();
        let err = s.put(Stage::Generator, &1).unwrap_err();
        assert!(matches!(&err, Error::Dependency { stage, .. } if stage == "feature_codec"), "{err}");
        s.put(Stage::FeatureCodec, &"b").unwrap();
        s.put(Stage::Generator, &"c").unwrap();
        assert_eq!(s.get::<String>(Stage::Generator).unwrap().0, "c");
        // retraining a predecessor makes the successor stale
        s.put(Stage::FeatureCodec, &"b2").unwrap();
        assert!(matches!(s.get::<String>(Stage::Generator), Err(Error::Dependency { .. })));
        // tampering is detected
        let h = s.put(Stage::Generator, &"c2").unwrap();
        std::fs::write(s.checkpoint_path(&h), b"\"x\"").unwrap();
        assert!(matches!(s.get::<String>(Stage::Generator), Err(Error::Dependency { .. })));
    }
}
