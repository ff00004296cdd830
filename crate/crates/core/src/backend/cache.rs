//! Persistent, content-addressed response cache.
//!
//! One directory per backend id, one JSON file per request keyed by the
//! SHA-256 of the full request content (so any prompt or sampling change
//! misses naturally). Writes go through a temp file plus atomic rename:
//! readers only ever see complete entries, and a crash never corrupts what
//! was already stored.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::hashing::hex_digest;

use super::{BackendError, GenerationRequest, GenerationResult, ModelBackend};

/// Hex SHA-256 digest identifying one request to one backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn as_hex(&self) -> &str {
        &self.0
    }
}

/// Canonical key material: backend identity plus the full request,
/// serialized with a fixed field order.
#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend_id: &'a str,
    model_ident: &'a str,
    request: &'a GenerationRequest,
}

pub fn cache_key(backend_id: &str, model_ident: &str, request: &GenerationRequest) -> CacheKey {
    let material = KeyMaterial {
        backend_id,
        model_ident,
        request,
    };
    let canonical = serde_json::to_string(&material).expect("key material serializes");
    CacheKey(hex_digest(&[canonical.as_bytes()]))
}

pub struct ResponseCache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(root: &Path) -> Result<Self, BackendError> {
        fs::create_dir_all(root)
            .map_err(|e| BackendError::CacheUnwritable(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            write_lock: Mutex::new(()),
        })
    }

    fn entry_path(&self, backend_id: &str, key: &CacheKey) -> PathBuf {
        self.root
            .join(backend_id)
            .join(format!("{}.json", key.as_hex()))
    }

    /// A hit returns the stored result with `cached` set; a corrupt entry is
    /// treated as a miss with a logged warning.
    pub fn get(&self, backend_id: &str, key: &CacheKey) -> Option<GenerationResult> {
        let path = self.entry_path(backend_id, key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<GenerationResult>(&bytes) {
            Ok(mut result) => {
                result.cached = true;
                Some(result)
            }
            Err(e) => {
                log::warn!("discarding corrupt cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put(
        &self,
        backend_id: &str,
        key: &CacheKey,
        result: &GenerationResult,
    ) -> Result<(), BackendError> {
        let unwritable = |e: std::io::Error| {
            BackendError::CacheUnwritable(format!("{}: {e}", self.root.display()))
        };
        let dir = self.root.join(backend_id);
        let _guard = self.write_lock.lock().expect("cache lock");
        fs::create_dir_all(&dir).map_err(unwritable)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(unwritable)?;
        let bytes = serde_json::to_vec(result).expect("result serializes");
        tmp.write_all(&bytes).map_err(unwritable)?;
        tmp.persist(self.entry_path(backend_id, key))
            .map_err(|e| BackendError::CacheUnwritable(e.to_string()))?;
        Ok(())
    }
}

/// Live/cache call counters plus live-call latencies for one backend.
#[derive(Debug, Default)]
pub struct CallStats {
    pub live_calls: AtomicU64,
    pub cache_hits: AtomicU64,
    latencies_us: Mutex<Vec<u64>>,
}

impl CallStats {
    pub fn live(&self) -> u64 {
        self.live_calls.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub fn latencies_us(&self) -> Vec<u64> {
        self.latencies_us.lock().expect("stats lock").clone()
    }

    fn record_latency(&self, elapsed: std::time::Duration) {
        self.latencies_us
            .lock()
            .expect("stats lock")
            .push(elapsed.as_micros() as u64);
    }
}

/// Cache-through wrapper: identical results with or without a cache apart
/// from the `cached` flag.
pub struct CachingBackend {
    inner: Box<dyn ModelBackend>,
    cache: Option<std::sync::Arc<ResponseCache>>,
    stats: CallStats,
}

impl CachingBackend {
    pub fn new(inner: Box<dyn ModelBackend>, cache: Option<std::sync::Arc<ResponseCache>>) -> Self {
        Self {
            inner,
            cache,
            stats: CallStats::default(),
        }
    }

    pub fn stats(&self) -> &CallStats {
        &self.stats
    }
}

impl ModelBackend for CachingBackend {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn model_ident(&self) -> String {
        self.inner.model_ident()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let key = self
            .cache
            .as_ref()
            .map(|_| cache_key(self.inner.backend_id(), &self.inner.model_ident(), request));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get(self.inner.backend_id(), key) {
                self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit);
            }
        }
        let started = std::time::Instant::now();
        let result = self.inner.generate(request)?;
        self.stats.record_latency(started.elapsed());
        self.stats.live_calls.fetch_add(1, Ordering::Relaxed);
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            cache.put(self.inner.backend_id(), key, &result)?;
        }
        Ok(result)
    }
}
