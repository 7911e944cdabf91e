//! Content-addressed cache for expert outputs.
//!
//! One file per key under a two-level hex fan-out of the key hash. Each file
//! carries a one-line JSON header (skill, template version, backend, asset
//! digest, timestamp) for audit, followed by the verbatim response text.
//! Keys are content-addressed on asset bytes, so re-downloads and renames do
//! not invalidate entries.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::registry::SkillId;

/// Cache identity for one expert invocation. Two keys are equal iff all four
/// fields are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub skill_id: SkillId,
    pub template_version: u32,
    pub asset_digest: String,
    pub backend_id: String,
}

impl CacheKey {
    /// Hex hash addressing this key on disk.
    pub fn storage_hash(&self) -> String {
        let canonical = format!(
            "{}|{}|{}|{}",
            self.skill_id, self.template_version, self.asset_digest, self.backend_id
        );
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    skill: String,
    template_version: u32,
    backend: String,
    asset_digest: String,
    created_unix_ms: u64,
}

/// Disk-backed cache with concurrent readers and single-writer-per-key
/// coalescing: callers hold the key lock across a miss so duplicate in-flight
/// misses collapse into one backend call.
pub struct ExpertCache {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl ExpertCache {
    pub fn new(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(ExpertCache {
            root,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        let hash = key.storage_hash();
        self.root.join(&hash[0..2]).join(&hash[2..4]).join(&hash)
    }

    /// Acquires the per-key writer lock. Hold the guard across the miss path.
    pub async fn lock_key(&self, key: &CacheKey) -> tokio::sync::OwnedMutexGuard<()> {
        let lock = {
            let mut locks = self.locks.lock().expect("lock map");
            locks
                .entry(key.storage_hash())
                .or_insert_with(|| Arc::new(tokio::sync::Mutex::new(())))
                .clone()
        };
        lock.lock_owned().await
    }

    /// Returns the cached text, or `None` on a miss. Read errors surface so
    /// callers can degrade to uncached operation with a warning.
    pub fn get(&self, key: &CacheKey) -> std::io::Result<Option<String>> {
        let path = self.path_for(key);
        let raw = match std::fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        match raw.split_once('\n') {
            Some((_header, text)) => Ok(Some(text.to_string())),
            None => Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("cache entry {} has no header line", path.display()),
            )),
        }
    }

    /// Stores a response text. The write is atomic (temp file + rename) so
    /// concurrent readers never observe a partial entry.
    pub fn put(&self, key: &CacheKey, text: &str) -> std::io::Result<()> {
        let path = self.path_for(key);
        let dir = path.parent().expect("cache path has parent");
        std::fs::create_dir_all(dir)?;
        let header = EntryHeader {
            skill: key.skill_id.canonical(),
            template_version: key.template_version,
            backend: key.backend_id.clone(),
            asset_digest: key.asset_digest.clone(),
            created_unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        let tmp = path.with_extension("tmp");
        {
            let mut file = std::fs::File::create(&tmp)?;
            writeln!(file, "{}", serde_json::to_string(&header)?)?;
            file.write_all(text.as_bytes())?;
        }
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}
