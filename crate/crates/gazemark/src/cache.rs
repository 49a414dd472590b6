//! On-disk exchange cache: one JSON file per completed model call.
//!
//! The key covers everything that determines a response at temperature 0
//! (instance, condition, model, prompt), so a hit can be replayed instead
//! of re-queried. Corrupt or unreadable entries degrade to misses; only
//! successful exchanges are ever stored, so failures retry on rerun.

use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use gazemark_core::task::Condition;

use crate::client::VlmExchange;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cannot access cache dir {dir}: {source}")]
    Io {
        dir: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Cache key: hex sha256 over the identifying fields, unit-separated so
/// field boundaries cannot collide.
pub fn cache_key(instance_id: &str, condition: Condition, model: &str, prompt_hash: &str) -> String {
    let mut hasher = Sha256::new();
    for part in [instance_id, condition.slug(), model, prompt_hash] {
        hasher.update(part.as_bytes());
        hasher.update([0x1f]);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone)]
pub struct ExchangeCache {
    dir: PathBuf,
}

impl ExchangeCache {
    /// Open (creating if needed) a cache directory.
    pub fn open(dir: &Path) -> Result<Self, CacheError> {
        std::fs::create_dir_all(dir).map_err(|source| CacheError::Io {
            dir: dir.to_path_buf(),
            source,
        })?;
        Ok(ExchangeCache { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Look up a key; anything unreadable or unparseable is a miss.
    pub fn load(&self, key: &str) -> Option<VlmExchange> {
        let bytes = std::fs::read(self.path_for(key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    /// Atomically persist an exchange under `key`.
    pub fn store(&self, key: &str, exchange: &VlmExchange) -> Result<(), CacheError> {
        let io = |source| CacheError::Io { dir: self.dir.clone(), source };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io)?;
        let bytes = serde_json::to_vec_pretty(exchange).expect("exchange serializes");
        tmp.write_all(&bytes).map_err(io)?;
        tmp.write_all(b"\n").map_err(io)?;
        tmp.persist(self.path_for(key)).map_err(|e| io(e.error))?;
        Ok(())
    }

    /// Every cached exchange, in key order. Unreadable entries are skipped.
    pub fn iter_all(&self) -> Vec<VlmExchange> {
        let mut keys: Vec<PathBuf> = match std::fs::read_dir(&self.dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json"))
                .collect(),
            Err(_) => Vec::new(),
        };
        keys.sort();
        keys.iter()
            .filter_map(|p| {
                let bytes = std::fs::read(p).ok()?;
                serde_json::from_slice(&bytes).ok()
            })
            .collect()
    }
}
