//! Content-addressed response cache keyed by request idempotency keys.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use super::BackendResponse;
use crate::error::{Error, Result};
use crate::{fsutil, seed};

pub trait ResponseCache: Send + Sync {
    fn get(&self, key: &str) -> Option<BackendResponse>;
    /// Stores a response; an existing entry for `key` is left untouched.
    fn put(&self, key: &str, response: &BackendResponse) -> Result<()>;
}

#[derive(Default)]
pub struct MemoryCache {
    entries: Mutex<HashMap<String, BackendResponse>>,
}

impl MemoryCache {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ResponseCache for MemoryCache {
    fn get(&self, key: &str) -> Option<BackendResponse> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    fn put(&self, key: &str, response: &BackendResponse) -> Result<()> {
        self.entries
            .lock()
            .unwrap()
            .entry(key.to_string())
            .or_insert_with(|| response.clone());
        Ok(())
    }
}

/// One file per key: first line is the SHA-256 of the body, the rest is the
/// JSON-encoded response.
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(DiskCache { root })
    }

    fn path(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("xx");
        self.root.join(shard).join(format!("{key}.json"))
    }
}

impl ResponseCache for DiskCache {
    fn get(&self, key: &str) -> Option<BackendResponse> {
        let path = self.path(key);
        let text = std::fs::read_to_string(&path).ok()?;
        let (digest, body) = text.split_once('\n')?;
        if seed::sha256_hex(body.as_bytes()) != digest {
            log::warn!(
                "cache entry {} failed its hash check; ignoring",
                path.display()
            );
            return None;
        }
        match serde_json::from_str(body) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("cache entry {} unreadable: {e}", path.display());
                None
            }
        }
    }

    fn put(&self, key: &str, response: &BackendResponse) -> Result<()> {
        let path = self.path(key);
        if path.exists() && self.get(key).is_some() {
            return Ok(());
        }
        let body = serde_json::to_string(response)?;
        let text = format!("{}\n{}", seed::sha256_hex(body.as_bytes()), body);
        fsutil::write_atomic(&path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::new(dir.path()).unwrap();
        let key = "ab12cd";
        assert!(cache.get(key).is_none());
        cache
            .put(key, &BackendResponse::Text("hello".into()))
            .unwrap();
        assert_eq!(cache.get(key), Some(BackendResponse::Text("hello".into())));
        // append-only: a second put does not replace the entry
        cache
            .put(key, &BackendResponse::Text("other".into()))
            .unwrap();
        assert_eq!(cache.get(key), Some(BackendResponse::Text("hello".into())));

        let path = cache.path(key);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("hello", "jello")).unwrap();
        assert!(cache.get(key).is_none());
    }
}
