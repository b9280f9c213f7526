use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use super::{Backend, BackendError, CallId, DecodingParams, GenerationRequest, GenerationResult, Message};

/// Content-addressed on-disk response cache around any backend.
///
/// One JSON file per request under the cache directory, named by the hex
/// SHA-256 of the request's model, messages, parameters and call id.
pub struct CachedBackend {
    inner: Arc<dyn Backend>,
    dir: PathBuf,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend: &'a str,
    model_id: &'a str,
    messages: &'a [Message],
    params: &'a DecodingParams,
    call: &'a CallId,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    result: GenerationResult,
}

pub fn with_cache(inner: Arc<dyn Backend>, dir: impl AsRef<Path>) -> Result<CachedBackend, BackendError> {
    CachedBackend::new(inner, dir)
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn Backend>, dir: impl AsRef<Path>) -> Result<Self, BackendError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)
            .map_err(|e| BackendError::Config(format!("cannot create cache dir {}: {e}", dir.display())))?;
        Ok(Self { inner, dir })
    }

    pub fn cache_key(&self, req: &GenerationRequest) -> String {
        let material = KeyMaterial {
            backend: self.inner.id(),
            model_id: &req.model_id,
            messages: &req.messages,
            params: &req.params,
            call: &req.call,
        };
        let bytes = serde_json::to_vec(&material).expect("key material serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn entry_path(&self, req: &GenerationRequest) -> PathBuf {
        self.dir.join(format!("{}.json", self.cache_key(req)))
    }

    fn read(&self, path: &Path, key: &str) -> Option<GenerationResult> {
        let bytes = fs::read(path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key => Some(entry.result),
            _ => {
                warn!(path = %path.display(), "ignoring corrupt cache entry");
                None
            }
        }
    }

    fn write(&self, path: &Path, key: &str, result: &GenerationResult) -> std::io::Result<()> {
        let entry = CacheEntry {
            key: key.to_string(),
            result: result.clone(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(&serde_json::to_vec_pretty(&entry).expect("entry serializes"))?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }
}

impl Backend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let key = self.cache_key(req);
        let path = self.dir.join(format!("{key}.json"));
        if let Some(mut hit) = self.read(&path, &key) {
            hit.cached = true;
            return Ok(hit);
        }
        let result = self.inner.generate(req)?;
        if let Err(e) = self.write(&path, &key, &result) {
            warn!(path = %path.display(), error = %e, "failed to write cache entry");
        }
        Ok(result)
    }

    fn supports_top_k(&self) -> bool {
        self.inner.supports_top_k()
    }
}
