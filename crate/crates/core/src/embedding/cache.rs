use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{prepare_text, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheFile {
    /// provider id -> normalized text -> vector
    providers: BTreeMap<String, BTreeMap<String, EmbeddingVector>>,
}

/// Memoizes an inner embedder by (provider id, normalized text), optionally
/// persisted to a JSON file.
pub struct CachedEmbedder<E> {
    inner: E,
    path: Option<PathBuf>,
    state: Mutex<CacheFile>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn in_memory(inner: E) -> Self {
        Self {
            inner,
            path: None,
            state: Mutex::new(CacheFile::default()),
        }
    }

    /// Opens (or starts) the cache file at `path`. Call [`CachedEmbedder::save`]
    /// to persist new entries.
    pub fn open(inner: E, path: &Path) -> Result<Self> {
        let state = if path.exists() {
            jsonl::read_json(path)?
        } else {
            CacheFile::default()
        };
        Ok(Self {
            inner,
            path: Some(path.to_path_buf()),
            state: Mutex::new(state),
        })
    }

    pub fn len(&self) -> usize {
        let state = self.state.lock().unwrap();
        state.providers.get(self.inner.provider_id()).map_or(0, |m| m.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let state = self.state.lock().unwrap();
        jsonl::write_json(path, &*state)
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let key = prepare_text(text)?;
        let provider = self.inner.provider_id();
        if let Some(v) = self
            .state
            .lock()
            .unwrap()
            .providers
            .get(provider)
            .and_then(|m| m.get(&key))
        {
            return Ok(v.clone());
        }
        let v = self.inner.embed(&key)?;
        if v.dim() != self.inner.dim() {
            return Err(Error::IndexMismatch(format!(
                "provider {provider} returned dim {}",
                v.dim()
            )));
        }
        self.state
            .lock()
            .unwrap()
            .providers
            .entry(provider.to_string())
            .or_default()
            .insert(key, v.clone());
        Ok(v)
    }
}
