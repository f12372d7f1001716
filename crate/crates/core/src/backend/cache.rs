//! Content-addressed, append-only completion cache.
//!
//! Layout: `<cache_dir>/<first two hex chars>/<digest>.json`, each file holding
//! the request key and the completion. Files are written to a temporary name
//! in the same directory and renamed into place, so readers never observe a
//! partial entry and concurrent writers of one key cannot corrupt it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BackendError, Completion, CompletionRequest};
use crate::hashing::{json_digest, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub op: String,
    pub model_id: String,
    pub prompt_hash: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Option<Vec<String>>,
    pub want_logprobs: bool,
    pub continuation: Option<String>,
}

impl CacheKey {
    pub fn completion(model_id: &str, request: &CompletionRequest) -> Self {
        CacheKey {
            op: "complete".into(),
            model_id: model_id.into(),
            prompt_hash: request.prompt.content_hash.clone(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            stop: request.stop.clone(),
            want_logprobs: request.want_logprobs,
            continuation: None,
        }
    }

    pub fn score(model_id: &str, prompt: &str, continuation: &str) -> Self {
        CacheKey {
            op: "score".into(),
            model_id: model_id.into(),
            prompt_hash: sha256_hex(prompt),
            temperature: 0.0,
            max_tokens: 0,
            stop: None,
            want_logprobs: true,
            continuation: Some(continuation.into()),
        }
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    request: CacheKey,
    completion: Completion,
}

#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        fs::create_dir_all(dir).map_err(|source| BackendError::Cache {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(DiskCache {
            dir: dir.to_path_buf(),
        })
    }

    pub fn path_for(&self, digest: &str) -> PathBuf {
        self.dir.join(&digest[..2]).join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Result<Option<Completion>, BackendError> {
        let path = self.path_for(digest);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(BackendError::Cache { path, source }),
        };
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) => Ok(Some(entry.completion)),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                Ok(None)
            }
        }
    }

    /// Stores an entry unless one already exists for `digest`.
    pub fn put(
        &self,
        digest: &str,
        key: &CacheKey,
        completion: &Completion,
    ) -> Result<(), BackendError> {
        let path = self.path_for(digest);
        let shard = path.parent().expect("cache path has a shard dir");
        let io_err = |source| BackendError::Cache {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(shard).map_err(io_err)?;
        let entry = CacheEntry {
            request: key.clone(),
            completion: Completion {
                cached: false,
                ..completion.clone()
            },
        };
        let body = serde_json::to_vec_pretty(&entry).expect("cache entries serialize");
        let mut tmp = tempfile::Builder::new()
            .prefix(".tmp-")
            .tempfile_in(shard)
            .map_err(io_err)?;
        tmp.write_all(&body).map_err(io_err)?;
        tmp.as_file().sync_all().map_err(io_err)?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(()),
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => Ok(()),
            Err(e) => Err(io_err(e.error)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn completion(text: &str) -> Completion {
        Completion {
            text: text.into(),
            token_logprobs: None,
            finish_reason: "stop".into(),
            cached: false,
        }
    }

    #[test]
    fn layout_and_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::open(dir.path()).unwrap();
        let key = CacheKey::score("m", "prefix", "A");
        let digest = key.digest();
        assert!(cache.get(&digest).unwrap().is_none());
        cache.put(&digest, &key, &completion("first")).unwrap();
        cache.put(&digest, &key, &completion("second")).unwrap();
        assert_eq!(cache.get(&digest).unwrap().unwrap().text, "first");
        let expected = dir.path().join(&digest[..2]).join(format!("{digest}.json"));
        assert!(expected.is_file());
        let stray: Vec<_> = fs::read_dir(expected.parent().unwrap()).unwrap().collect();
        assert_eq!(stray.len(), 1, "temporary files left behind");
    }

    #[test]
    fn key_covers_request_fields() {
        let a = CacheKey::score("m", "p", "A");
        assert_ne!(a.digest(), CacheKey::score("m", "p", "B").digest());
        assert_ne!(a.digest(), CacheKey::score("m2", "p", "A").digest());
        assert_eq!(a.digest(), CacheKey::score("m", "p", "A").digest());
    }
}
