//! On-disk response cache: one JSON file per key under `ab/cd/<key>.json`.

use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};

use super::{CanonicalRequest, ChatError, FinishReason, TokenUsage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CachedResponse {
    Generate {
        text: String,
        finish_reason: FinishReason,
        usage: Option<TokenUsage>,
    },
    Score {
        logprob: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: CanonicalRequest,
    pub response: CachedResponse,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: u64,
    pub bytes: u64,
    pub generate_entries: u64,
    pub score_entries: u64,
    pub corrupt_entries: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub removed_corrupt: u64,
    pub removed_stale: u64,
    pub removed_temp: u64,
    pub kept: u64,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

const TEMP_PREFIX: &str = ".tmp";

fn io_err(path: &Path, e: impl std::fmt::Display) -> ChatError {
    ChatError::Cache(format!("{}: {e}", path.display()))
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ChatError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let (a, b) = (&key[0..2.min(key.len())], &key[2.min(key.len())..4.min(key.len())]);
        self.root.join(a).join(b).join(format!("{key}.json"))
    }

    /// Returns the stored entry, or `None` when absent or unreadable.
    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let path = self.path_for(key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key => Some(entry),
            Ok(_) | Err(_) => {
                tracing::warn!(path = %path.display(), "ignoring corrupt cache entry");
                None
            }
        }
    }

    /// Stores an entry. The first writer wins; returns `false` if the key already existed.
    pub fn put(&self, entry: &CacheEntry) -> Result<bool, ChatError> {
        let path = self.path_for(&entry.key);
        if path.exists() {
            return Ok(false);
        }
        let dir = path.parent().expect("fan-out path has a parent");
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut tmp = tempfile::Builder::new()
            .prefix(TEMP_PREFIX)
            .tempfile_in(dir)
            .map_err(|e| io_err(dir, e))?;
        let body = serde_json::to_vec_pretty(entry).map_err(|e| io_err(&path, e))?;
        tmp.write_all(&body).map_err(|e| io_err(&path, e))?;
        tmp.as_file().sync_all().map_err(|e| io_err(&path, e))?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(true),
            Err(e) if e.error.kind() == ErrorKind::AlreadyExists => Ok(false),
            Err(e) => Err(io_err(&path, e.error)),
        }
    }

    fn walk(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            let Ok(rd) = fs::read_dir(&dir) else { continue };
            for entry in rd.flatten() {
                let p = entry.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }

    fn is_temp(path: &Path) -> bool {
        path.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with(TEMP_PREFIX))
    }

    pub fn stats(&self) -> CacheStats {
        let mut s = CacheStats::default();
        for p in self.walk() {
            if Self::is_temp(&p) {
                continue;
            }
            s.entries += 1;
            s.bytes += fs::metadata(&p).map(|m| m.len()).unwrap_or(0);
            match fs::read(&p).ok().and_then(|b| serde_json::from_slice::<CacheEntry>(&b).ok()) {
                Some(CacheEntry { response: CachedResponse::Generate { .. }, .. }) => s.generate_entries += 1,
                Some(CacheEntry { response: CachedResponse::Score { .. }, .. }) => s.score_entries += 1,
                None => s.corrupt_entries += 1,
            }
        }
        s
    }

    /// Removes leftover temp files, unreadable entries and, optionally,
    /// entries not modified within `max_age`.
    pub fn gc(&self, max_age: Option<Duration>) -> Result<GcReport, ChatError> {
        let mut r = GcReport::default();
        let now = SystemTime::now();
        for p in self.walk() {
            let remove = |p: &Path| fs::remove_file(p).map_err(|e| io_err(p, e));
            if Self::is_temp(&p) {
                remove(&p)?;
                r.removed_temp += 1;
                continue;
            }
            let stem_ok = p
                .file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_string);
            let valid = fs::read(&p)
                .ok()
                .and_then(|b| serde_json::from_slice::<CacheEntry>(&b).ok())
                .is_some_and(|e| Some(e.key) == stem_ok);
            if !valid {
                remove(&p)?;
                r.removed_corrupt += 1;
                continue;
            }
            if let Some(max_age) = max_age {
                let age = fs::metadata(&p)
                    .and_then(|m| m.modified())
                    .ok()
                    .and_then(|t| now.duration_since(t).ok())
                    .unwrap_or_default();
                if age > max_age {
                    remove(&p)?;
                    r.removed_stale += 1;
                    continue;
                }
            }
            r.kept += 1;
        }
        Ok(r)
    }
}
