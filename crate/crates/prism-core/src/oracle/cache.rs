//! Response caching with concurrent in-flight deduplication.
//!
//! Entries are immutable once written; the file store is append-only JSONL.
//! Concurrent identical queries cost one backend call: the first caller runs
//! it, the rest await the same cell.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::OnceCell;

use crate::error::{Error, Result};

use super::{Oracle, OracleQuery, OracleResponse};

/// The cached portion of a response (hit/attempt flags are per-call).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub probabilities: Vec<f64>,
    pub raw_text: String,
}

/// One append-only cache line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub response: StoredResponse,
    /// Unix seconds at write time.
    pub created_at: u64,
}

/// Cache hit/miss counters for run manifests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub backend_calls: u64,
}

/// In-memory cache map, optionally persisted to an append-only JSONL file.
pub struct CacheStore {
    map: RwLock<HashMap<String, StoredResponse>>,
    sink: Option<Mutex<std::fs::File>>,
    hits: AtomicU64,
    misses: AtomicU64,
    backend_calls: AtomicU64,
}

impl CacheStore {
    /// Purely in-memory store.
    pub fn in_memory() -> Self {
        CacheStore {
            map: RwLock::new(HashMap::new()),
            sink: None,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            backend_calls: AtomicU64::new(0),
        }
    }

    /// File-backed store; loads existing entries, appends new ones.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path: PathBuf = path.into();
        let mut map = HashMap::new();
        if path.exists() {
            let file = std::fs::File::open(&path)?;
            for line in BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry = serde_json::from_str(&line)
                    .map_err(|e| Error::Config(format!("corrupt cache line: {e}")))?;
                map.insert(entry.key, entry.response);
            }
        }
        let sink = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(CacheStore {
            map: RwLock::new(map),
            sink: Some(Mutex::new(sink)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            backend_calls: AtomicU64::new(0),
        })
    }

    pub fn get(&self, key: &str) -> Option<StoredResponse> {
        let hit = self.map.read().expect("cache map lock").get(key).cloned();
        match &hit {
            Some(_) => self.hits.fetch_add(1, Ordering::SeqCst),
            None => self.misses.fetch_add(1, Ordering::SeqCst),
        };
        hit
    }

    pub fn put(&self, key: String, response: StoredResponse) -> Result<()> {
        if let Some(sink) = &self.sink {
            let entry = CacheEntry {
                key: key.clone(),
                response: response.clone(),
                created_at: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let line = serde_json::to_string(&entry)?;
            let mut file = sink.lock().expect("cache sink lock");
            writeln!(file, "{line}")?;
        }
        self.map.write().expect("cache map lock").insert(key, response);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache map lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
        }
    }

    fn note_backend_call(&self) {
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
    }
}

/// Cache wrapper around any oracle. Identical digests resolve to one backend
/// call even under concurrency; `no_cache` queries bypass everything.
pub struct CachedOracle<O> {
    inner: O,
    store: Arc<CacheStore>,
    inflight: Mutex<HashMap<String, Arc<OnceCell<StoredResponse>>>>,
}

impl<O: Oracle> CachedOracle<O> {
    pub fn new(inner: O, store: Arc<CacheStore>) -> Self {
        CachedOracle { inner, store, inflight: Mutex::new(HashMap::new()) }
    }

    pub fn store(&self) -> &Arc<CacheStore> {
        &self.store
    }

    fn cell_for(&self, key: &str) -> Arc<OnceCell<StoredResponse>> {
        let mut map = self.inflight.lock().expect("inflight lock");
        map.entry(key.to_string()).or_default().clone()
    }

    fn release(&self, key: &str) {
        self.inflight.lock().expect("inflight lock").remove(key);
    }
}

#[async_trait]
impl<O: Oracle> Oracle for CachedOracle<O> {
    async fn evaluate(&self, query: &OracleQuery) -> Result<OracleResponse> {
        if query.meta.no_cache {
            self.store.note_backend_call();
            return self.inner.evaluate(query).await;
        }
        let key = query.digest(self.inner.model_id());
        if let Some(stored) = self.store.get(&key) {
            return Ok(OracleResponse {
                probabilities: stored.probabilities,
                raw_text: stored.raw_text,
                cache_hit: true,
                attempts: 0,
            });
        }
        let cell = self.cell_for(&key);
        let mut leader = false;
        let mut attempts = 0;
        let outcome = cell
            .get_or_try_init(|| async {
                leader = true;
                // double-check: another task may have written between the map
                // miss and cell acquisition
                if let Some(stored) = self.store.get(&key) {
                    return Ok::<_, Error>(stored);
                }
                self.store.note_backend_call();
                let response = self.inner.evaluate(query).await?;
                attempts = response.attempts;
                let stored = StoredResponse {
                    probabilities: response.probabilities.clone(),
                    raw_text: response.raw_text.clone(),
                };
                self.store.put(key.clone(), stored.clone())?;
                Ok(stored)
            })
            .await;
        self.release(&key);
        let stored = outcome?;
        Ok(OracleResponse {
            probabilities: stored.probabilities.clone(),
            raw_text: stored.raw_text.clone(),
            cache_hit: !leader,
            attempts,
        })
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}
