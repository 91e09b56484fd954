//! Content-addressed on-disk response cache.
//!
//! Keys are sha256 digests of a canonical request description; values are
//! small JSON files holding the key fields and the raw response text, so a
//! cache entry is auditable with a pager. Writes go through a temp file and
//! an atomic rename, which gives serialized-writer semantics without locks;
//! concurrent writers of the same key produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::hex;
use crate::error::{Error, Result};

#[derive(Clone)]
pub struct DiskCache {
    root: PathBuf,
    counter: Arc<AtomicU64>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: serde_json::Value,
    value: String,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> DiskCache {
        DiskCache {
            root: root.into(),
            counter: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Digest of a canonical key document. serde_json serializes struct
    /// fields in declaration order, so the digest is stable.
    pub fn digest(key: &serde_json::Value) -> String {
        let bytes = serde_json::to_vec(key).expect("cache key serializes");
        hex(&Sha256::digest(&bytes))
    }

    fn path_for(&self, namespace: &str, digest: &str) -> PathBuf {
        self.root
            .join(namespace)
            .join(&digest[..2])
            .join(format!("{digest}.json"))
    }

    pub fn get(&self, namespace: &str, key: &serde_json::Value) -> Option<String> {
        let path = self.path_for(namespace, &Self::digest(key));
        let bytes = fs::read(&path).ok()?;
        let entry: Entry = serde_json::from_slice(&bytes).ok()?;
        Some(entry.value)
    }

    pub fn put(&self, namespace: &str, key: &serde_json::Value, value: &str) -> Result<()> {
        let digest = Self::digest(key);
        let path = self.path_for(namespace, &digest);
        let dir = path.parent().expect("cache path has parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let entry = Entry {
            key: key.clone(),
            value: value.to_string(),
        };
        let unique = self.counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".{digest}.{}.{unique}.tmp", std::process::id()));
        fs::write(&tmp, serde_json::to_vec(&entry)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_namespaces_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::new(dir.path());
        let key = serde_json::json!({"model": "m", "prompt_sha": "abc"});
        assert!(cache.get("gen", &key).is_none());
        cache.put("gen", &key, "Beyoncé").unwrap();
        assert_eq!(cache.get("gen", &key).as_deref(), Some("Beyoncé"));
        assert!(cache.get("nli", &key).is_none());
    }

    #[test]
    fn rewrite_same_key_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::new(dir.path());
        let key = serde_json::json!({"k": 1});
        cache.put("ns", &key, "v").unwrap();
        cache.put("ns", &key, "v").unwrap();
        assert_eq!(cache.get("ns", &key).as_deref(), Some("v"));
    }
}
