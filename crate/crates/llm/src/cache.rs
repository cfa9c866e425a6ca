use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use qurag_core::digest::FramedHasher;
use serde::{Deserialize, Serialize};

use crate::{ClientError, ModelSpec};

/// Digest of (prompt hash, model id, canonical params).
pub fn cache_key(prompt_hash: &str, spec: &ModelSpec) -> String {
    // BTreeMap keys serialize sorted, which makes the JSON canonical.
    let params = serde_json::to_string(&spec.params).expect("params serialize");
    let mut h = FramedHasher::new();
    h.part(prompt_hash.as_bytes())
        .part(spec.model_id.as_bytes())
        .part(params.as_bytes());
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub prompt_hash: String,
    pub model_id: String,
    pub output_text: String,
    pub latency_ms: u64,
    pub created_at: String,
}

/// Append-only JSONL response cache.
#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, CacheEntry>>,
    file: Mutex<File>,
}

impl ResponseCache {
    /// Opens or creates the cache file. Unparseable lines (for example a
    /// write cut short by a crash) are skipped with a warning.
    pub fn open(path: &Path) -> Result<Self, ClientError> {
        let io_err = |source| ClientError::Cache {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut entries = HashMap::new();
        let text = if path.exists() {
            fs::read_to_string(path).map_err(io_err)?
        } else {
            String::new()
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheEntry>(line) {
                Ok(e) => {
                    entries.insert(e.key.clone(), e);
                }
                Err(e) => log::warn!("{}:{}: skipping cache line: {e}", path.display(), i + 1),
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        if !text.is_empty() && !text.ends_with('\n') {
            file.write_all(b"\n").map_err(io_err)?;
        }
        Ok(Self {
            path: path.to_owned(),
            entries: Mutex::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Persists `entry` before making it visible to readers.
    pub fn put(&self, entry: CacheEntry) -> Result<(), ClientError> {
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        {
            let mut file = self.file.lock().expect("cache file lock");
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| ClientError::Cache {
                    path: self.path.display().to_string(),
                    source,
                })?;
        }
        self.entries
            .lock()
            .expect("cache lock")
            .insert(entry.key.clone(), entry);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(key: &str, out: &str) -> CacheEntry {
        CacheEntry {
            key: key.into(),
            prompt_hash: "h".into(),
            model_id: "m".into(),
            output_text: out.into(),
            latency_ms: 12,
            created_at: "2024-06-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn key_depends_on_params() {
        let a = ModelSpec::new("m", "mock:identity");
        let mut b = a.clone();
        b.params.insert("temperature".into(), serde_json::json!(0.0));
        assert_ne!(cache_key("h", &a), cache_key("h", &b));
        assert_eq!(cache_key("h", &a), cache_key("h", &a.clone()));
        assert_ne!(cache_key("h", &a), cache_key("i", &a));
    }

    #[test]
    fn survives_reopen_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/cache.jsonl");
        let cache = ResponseCache::open(&path).unwrap();
        cache.put(entry("k1", "uno\n")).unwrap();
        cache.put(entry("k2", "dos")).unwrap();
        drop(cache);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"key\":\"k3\",\"prom").unwrap();
        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        cache.put(entry("k4", "cuatro")).unwrap();
        drop(cache);
        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.len(), 3);
        assert_eq!(cache.get("k1").unwrap().output_text, "uno\n");
    }
}
