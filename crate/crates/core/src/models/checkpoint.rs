//! Checkpoint archive: named tensors plus the architecture id and a hash of
//! the run configuration, both validated on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::RunConfig;
use crate::error::{Error, Result};
use crate::models::graph::ParamSpec;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture_id: String,
    pub config_hash: String,
    /// Last completed epoch.
    pub epoch: usize,
    pub tensors: BTreeMap<String, TensorRecord>,
    /// Scalar state that is not a tensor (optimizer step counts, learning
    /// rates, remember rate).
    pub scalars: BTreeMap<String, f64>,
    /// Free-form text entries (for example a JSON-encoded metric history).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// SHA-256 of the canonical TOML rendering of a configuration.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let text = cfg.to_toml_string()?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpoint {
    pub fn new(architecture_id: impl Into<String>, config_hash: impl Into<String>, epoch: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            architecture_id: architecture_id.into(),
            config_hash: config_hash.into(),
            epoch,
            tensors: BTreeMap::new(),
            scalars: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// Stores every parameter of a network under `prefix.<name>`.
    pub fn insert_params(&mut self, prefix: &str, specs: &[ParamSpec], params: &[f64]) {
        for spec in specs {
            self.tensors.insert(
                format!("{prefix}.{}", spec.name),
                TensorRecord {
                    shape: spec.shape.clone(),
                    data: params[spec.range()].to_vec(),
                },
            );
        }
    }

    pub fn insert_vector(&mut self, name: &str, data: &[f64]) {
        self.tensors.insert(
            name.to_string(),
            TensorRecord {
                shape: vec![data.len()],
                data: data.to_vec(),
            },
        );
    }

    /// Restores parameters written by [`Checkpoint::insert_params`], checking
    /// every name and shape.
    pub fn load_params(&self, prefix: &str, specs: &[ParamSpec], params: &mut [f64]) -> Result<()> {
        for spec in specs {
            let name = format!("{prefix}.{}", spec.name);
            let rec = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if rec.shape != spec.shape || rec.data.len() != spec.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    rec.shape, spec.shape
                )));
            }
            params[spec.range()].copy_from_slice(&rec.data);
        }
        Ok(())
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<&[f64]> {
        let rec = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if rec.data.len() != len {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has {} values, expected {len}",
                rec.data.len()
            )));
        }
        Ok(&rec.data)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing scalar '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and checks it belongs to the expected architecture
    /// and configuration.
    pub fn load(path: &Path, architecture_id: &str, config_hash: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                ck.format_version
            )));
        }
        if ck.architecture_id != architecture_id {
            return Err(Error::Checkpoint(format!(
                "architecture '{}' does not match expected '{architecture_id}'",
                ck.architecture_id
            )));
        }
        if ck.config_hash != config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match expected {config_hash}",
                ck.config_hash
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ModelConfig;
    use crate::models::{ArchitectureId, Segmenter};

    #[test]
    fn round_trip_is_exact_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let cfg = RunConfig::default();
        let hash = config_hash(&cfg).unwrap();
        let seg = Segmenter::new(ArchitectureId::PeerA, &ModelConfig::default(), 4);
        let mut ck = Checkpoint::new("peer_a", &hash, 3);
        ck.insert_params("seg", seg.param_specs(), seg.params());
        ck.scalars.insert("gamma".into(), 0.1 + 0.2);
        ck.save(&path).unwrap();

        let loaded = Checkpoint::load(&path, "peer_a", &hash).unwrap();
        let mut fresh = Segmenter::new(ArchitectureId::PeerA, &ModelConfig::default(), 99);
        let specs = fresh.param_specs().to_vec();
        loaded.load_params("seg", &specs, fresh.params_mut()).unwrap();
        assert_eq!(fresh.params(), seg.params());
        assert_eq!(loaded.scalar("gamma").unwrap(), 0.1 + 0.2);

        assert!(Checkpoint::load(&path, "peer_b", &hash).is_err());
        assert!(Checkpoint::load(&path, "peer_a", "deadbeef").is_err());
        let mut other = Segmenter::new(ArchitectureId::PeerB, &ModelConfig::default(), 0);
        let specs = other.param_specs().to_vec();
        assert!(loaded.load_params("seg", &specs, other.params_mut()).is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}
