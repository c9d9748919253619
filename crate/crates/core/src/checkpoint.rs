//! Versioned checkpoint container and config hashing.
//!
//! A checkpoint is a JSON document: a format version, a metadata record
//! (geometry, seed, step counter, config hash, architecture fingerprint) and
//! the named parameter arrays of whatever bundle is stored.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config_hash: String,
    pub arch_fingerprint: String,
    pub seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub payload: T,
}

/// Stable hash of any serializable value via its canonical JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("serializable");
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(&digest[..16])
}

pub fn save<T: Serialize>(path: &Path, meta: CheckpointMeta, payload: &T) -> Result<()> {
    let ckpt = Checkpoint { version: CHECKPOINT_VERSION, meta, payload };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec(&ckpt)?)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    let ckpt: Checkpoint<T> = serde_json::from_slice(&bytes)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint version {} (expected {})",
            ckpt.version, CHECKPOINT_VERSION
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = hash_json(&(1u32, "x"));
        let b = hash_json(&(1u32, "x"));
        let c = hash_json(&(2u32, "x"));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn roundtrip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let meta = CheckpointMeta {
            kind: "test".into(),
            config_hash: "h".into(),
            arch_fingerprint: "f".into(),
            seed: 1,
            step: 2,
        };
        save(&path, meta.clone(), &vec![1.0f64, 2.0]).unwrap();
        let back: Checkpoint<Vec<f64>> = load(&path).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.payload, vec![1.0, 2.0]);
    }
}
