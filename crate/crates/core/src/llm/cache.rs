//! Content-addressed response cache.
//!
//! Layout: `<root>/<backend tag>/<h[0..2]>/<h[2..4]>/<hash>.json`. Writes go
//! to a unique temporary file in the target directory and are renamed into
//! place, so concurrent writers of the same key are harmless. Unreadable or
//! mismatched records are moved to `<root>/quarantine/` and treated as a
//! miss. Distinct requests share a file only on a SHA-256 collision.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub hash: String,
    pub backend: String,
    pub template_id: String,
    pub raw: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn sanitize(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, backend: &str, hash: &str) -> PathBuf {
        assert!(hash.len() >= 4 && hash.is_ascii(), "hash must be hex");
        self.root
            .join(sanitize(backend))
            .join(&hash[..2])
            .join(&hash[2..4])
            .join(format!("{hash}.json"))
    }

    pub fn get(&self, backend: &str, hash: &str) -> Result<Option<String>> {
        let path = self.path_for(backend, hash);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        match serde_json::from_slice::<CacheRecord>(&bytes) {
            Ok(rec) if rec.hash == hash && !rec.raw.is_empty() => Ok(Some(rec.raw)),
            _ => {
                self.quarantine(&path, hash)?;
                Ok(None)
            }
        }
    }

    fn quarantine(&self, path: &Path, hash: &str) -> Result<()> {
        let qdir = self.root.join("quarantine");
        fs::create_dir_all(&qdir).map_err(|e| Error::io(&qdir, e))?;
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let target = qdir.join(format!("{hash}.{}.{n}.json", std::process::id()));
        log::warn!("quarantining corrupt cache record {}", path.display());
        match fs::rename(path, &target) {
            Ok(()) => Ok(()),
            // Another thread already moved it.
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, backend: &str, hash: &str, template_id: &str, raw: &str) -> Result<()> {
        let path = self.path_for(backend, hash);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rec = CacheRecord {
            hash: hash.to_string(),
            backend: backend.to_string(),
            template_id: template_id.to_string(),
            raw: raw.to_string(),
        };
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".{hash}.{}.{n}.tmp", std::process::id()));
        fs::write(&tmp, serde_json::to_vec_pretty(&rec)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}
