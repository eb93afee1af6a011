//! Content-addressed on-disk cache of model responses.
//!
//! Layout under the root directory:
//!
//! ```text
//! manifest.toml                 dataset, config and seed digests
//! responses/ab/cd/<digest>.json one record per file
//! blobs/ab/cd/<digest>.json     auxiliary cached values (embeddings)
//! ```
//!
//! Every file is written to a temporary name and renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::digest::{json_digest, sha256_hex};
use crate::error::{Error, Result};
use crate::gateway::{DecodingParams, ModelEndpoint, Origin, ResponseRecord};

/// SHA-256 digest identifying one cached response.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<CacheKey> {
        let bytes = hex::decode(s).ok()?;
        Some(CacheKey(bytes.try_into().ok()?))
    }

    /// Key for an arbitrary namespaced value.
    pub fn for_value<T: Serialize + ?Sized>(namespace: &str, value: &T) -> CacheKey {
        let digest = json_digest(&(namespace, value));
        CacheKey::from_hex(&digest).expect("sha256 hex")
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Digest over endpoint identity, sample, prompt text, decoding parameters
/// and attempt index.
pub fn cache_key(
    endpoint: &ModelEndpoint,
    sample_id: &str,
    prompt: &str,
    decoding: &DecodingParams,
    attempt: u32,
) -> CacheKey {
    CacheKey::for_value(
        "response-v1",
        &(&endpoint.name, &endpoint.model_id, sample_id, prompt, decoding, attempt),
    )
}

#[derive(Serialize, Deserialize)]
struct Entry<T> {
    key: String,
    checksum: String,
    value: T,
}

/// Run-level metadata stored next to the cached records.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_digest: String,
    pub config_digest: String,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug)]
pub struct ResponseStore {
    root: PathBuf,
    inflight: Mutex<HashMap<CacheKey, Arc<tokio::sync::Mutex<()>>>>,
    tmp_counter: AtomicU64,
    repairs: AtomicU64,
}

impl ResponseStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(ResponseStore {
            root,
            inflight: Mutex::new(HashMap::new()),
            tmp_counter: AtomicU64::new(0),
            repairs: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Entries evicted because they failed verification.
    pub fn repairs(&self) -> u64 {
        self.repairs.load(Ordering::Relaxed)
    }

    fn path_in(&self, namespace: &str, key: &CacheKey) -> PathBuf {
        let hex = key.to_hex();
        self.root
            .join(namespace)
            .join(&hex[0..2])
            .join(&hex[2..4])
            .join(format!("{hex}.json"))
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let dir = path.parent().expect("entry paths have a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".tmp-{}-{n}", std::process::id()));
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn read_entry<T: Serialize + DeserializeOwned>(&self, namespace: &str, key: &CacheKey) -> Result<Option<T>> {
        let path = self.path_in(namespace, key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let verified = serde_json::from_slice::<Entry<T>>(&bytes)
            .ok()
            .filter(|entry| entry.key == key.to_hex() && entry.checksum == json_digest(&entry.value));
        match verified {
            Some(entry) => Ok(Some(entry.value)),
            None => {
                tracing::warn!(path = %path.display(), "evicting corrupted cache entry");
                self.repairs.fetch_add(1, Ordering::Relaxed);
                match std::fs::remove_file(&path) {
                    Ok(()) => Ok(None),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                    Err(e) => Err(Error::io(&path, e)),
                }
            }
        }
    }

    fn write_entry<T: Serialize>(&self, namespace: &str, key: &CacheKey, value: &T) -> Result<()> {
        let entry = Entry {
            key: key.to_hex(),
            checksum: json_digest(value),
            value,
        };
        let bytes = serde_json::to_vec(&entry)?;
        self.write_atomic(&self.path_in(namespace, key), &bytes)
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.path_in("responses", key).is_file()
    }

    /// Stored record, if present and intact. The returned record keeps its
    /// original origin; `fetch_or_query` relabels hits.
    pub fn get(&self, key: &CacheKey) -> Result<Option<ResponseRecord>> {
        self.read_entry("responses", key)
    }

    pub fn put(&self, key: &CacheKey, record: &ResponseRecord) -> Result<()> {
        self.write_entry("responses", key, record)
    }

    pub fn get_blob<T: Serialize + DeserializeOwned>(&self, key: &CacheKey) -> Result<Option<T>> {
        self.read_entry("blobs", key)
    }

    pub fn put_blob<T: Serialize>(&self, key: &CacheKey, value: &T) -> Result<()> {
        self.write_entry("blobs", key, value)
    }

    fn key_lock(&self, key: &CacheKey) -> Arc<tokio::sync::Mutex<()>> {
        let mut map = self.inflight.lock().expect("inflight lock");
        Arc::clone(map.entry(*key).or_default())
    }

    fn release_key(&self, key: &CacheKey, lock: Arc<tokio::sync::Mutex<()>>) {
        let mut map = self.inflight.lock().expect("inflight lock");
        // The map holds one reference and `lock` the other: nobody is waiting.
        if Arc::strong_count(&lock) == 2 {
            map.remove(key);
        }
    }

    /// Serve `key` from disk, or run `producer` once and persist its record.
    ///
    /// Concurrent callers for the same key are serialized, so the producer
    /// runs at most once per missing key. The outer error is a store failure;
    /// the inner one is the producer's and is not cached.
    pub async fn fetch_or_query<F, Fut, E>(
        &self,
        key: &CacheKey,
        producer: F,
    ) -> Result<std::result::Result<ResponseRecord, E>>
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = std::result::Result<ResponseRecord, E>>,
    {
        let lock = self.key_lock(key);
        let guard = lock.lock().await;
        let outcome = match self.get(key) {
            Ok(Some(mut hit)) => {
                hit.origin = Origin::Cache;
                Ok(Ok(hit))
            }
            Ok(None) => match producer().await {
                Ok(record) => self.put(key, &record).map(|()| Ok(record)),
                Err(e) => Ok(Err(e)),
            },
            Err(e) => Err(e),
        };
        drop(guard);
        self.release_key(key, lock);
        outcome
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<()> {
        let text = toml::to_string_pretty(manifest).map_err(|e| Error::Parse {
            path: "manifest.toml".into(),
            message: e.to_string(),
        })?;
        self.write_atomic(&self.root.join("manifest.toml"), text.as_bytes())
    }

    pub fn read_manifest(&self) -> Result<Option<Manifest>> {
        let path = self.root.join("manifest.toml");
        match std::fs::read_to_string(&path) {
            Ok(text) => toml::from_str(&text).map(Some).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Digest summarizing every cached response file name, for reports.
    pub fn state_digest(&self) -> Result<String> {
        let mut names = Vec::new();
        let base = self.root.join("responses");
        if base.is_dir() {
            collect_names(&base, &mut names)?;
        }
        names.sort();
        Ok(sha256_hex(names.join("\n")))
    }
}

fn collect_names(dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_names(&path, out)?;
        } else if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if name.ends_with(".json") {
                out.push(name.to_string());
            }
        }
    }
    Ok(())
}
