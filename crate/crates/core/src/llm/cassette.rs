//! Prompt-hash keyed cassettes for deterministic offline replay.
//!
//! A cassette is JSONL, one [`CassetteEntry`] per line. Entries may omit
//! `key`; it is then derived from `model_id`, `prompt`, `temperature`
//! (default 0.0) and `top_p` (default 1.0), which keeps hand-written
//! fixtures practical.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tracing::debug;

use super::{normalize_prompt, request_key, LlmProvider, LlmRequest, Stage};
use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    pub prompt: String,
    pub response: String,
}

impl CassetteEntry {
    pub fn from_exchange(request: &LlmRequest, response: &str) -> Self {
        Self {
            key: Some(request.key()),
            model_id: Some(request.model_id.clone()),
            temperature: Some(request.temperature),
            top_p: Some(request.top_p),
            stage: Some(request.stage),
            prompt: normalize_prompt(&request.prompt),
            response: response.to_string(),
        }
    }

    fn resolved_key(&self) -> std::result::Result<String, String> {
        let derived = self.model_id.as_ref().map(|m| {
            request_key(
                m,
                &self.prompt,
                self.temperature.unwrap_or(0.0),
                self.top_p.unwrap_or(1.0),
            )
        });
        match (&self.key, derived) {
            (Some(k), Some(d)) if *k != d => Err(format!(
                "entry key {k} does not match its request fields (expected {d})"
            )),
            (Some(k), _) => Ok(k.clone()),
            (None, Some(d)) => Ok(d),
            (None, None) => Err("entry has neither key nor model_id".into()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Cassette {
    entries: HashMap<String, CassetteEntry>,
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self> {
        let raw: Vec<(usize, CassetteEntry)> = jsonl::read_numbered(path)?;
        let mut entries: HashMap<String, CassetteEntry> = HashMap::with_capacity(raw.len());
        for (line, entry) in raw {
            let key = entry.resolved_key().map_err(|message| Error::Cassette {
                path: path.to_path_buf(),
                message: format!("line {line}: {message}"),
            })?;
            if let Some(prev) = entries.get(&key) {
                if prev.response != entry.response {
                    return Err(Error::Cassette {
                        path: path.to_path_buf(),
                        message: format!("key collision on {key} with different responses"),
                    });
                }
                continue;
            }
            entries.insert(key, entry);
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&CassetteEntry> {
        self.entries.get(key)
    }
}

/// Answers strictly from a cassette; never touches the network.
pub struct ReplayProvider {
    cassette: Cassette,
    calls: AtomicUsize,
}

impl ReplayProvider {
    pub fn new(cassette: Cassette) -> Self {
        Self {
            cassette,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(Cassette::load(path)?))
    }
}

impl LlmProvider for ReplayProvider {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        request.validate()?;
        let hash = request.key();
        let entry = self
            .cassette
            .get(&hash)
            .ok_or(Error::UnrecordedInteraction { hash })?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(entry.response.clone())
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

struct RecordState {
    seen: HashMap<String, String>,
    file: File,
}

/// Forwards to a live provider and appends every new exchange to a
/// cassette file. Writes are serialized.
pub struct RecordingProvider<P> {
    inner: P,
    path: PathBuf,
    state: Mutex<RecordState>,
}

impl<P: LlmProvider> RecordingProvider<P> {
    /// Appends to `path`, keeping any entries already recorded there.
    pub fn open(inner: P, path: &Path) -> Result<Self> {
        let seen = if path.exists() {
            Cassette::load(path)?
                .entries
                .into_iter()
                .map(|(k, e)| (k, e.response))
                .collect()
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            state: Mutex::new(RecordState { seen, file }),
        })
    }
}

impl<P: LlmProvider> LlmProvider for RecordingProvider<P> {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        request.validate()?;
        let key = request.key();
        if let Some(resp) = self.state.lock().unwrap().seen.get(&key) {
            return Ok(resp.clone());
        }
        let response = self.inner.complete(request)?;
        let mut state = self.state.lock().unwrap();
        if !state.seen.contains_key(&key) {
            let mut line = serde_json::to_string(&CassetteEntry::from_exchange(request, &response))?;
            line.push('\n');
            state
                .file
                .write_all(line.as_bytes())
                .and_then(|_| state.file.flush())
                .map_err(|e| Error::io(&self.path, e))?;
            debug!(key = %key, "recorded interaction");
            state.seen.insert(key, response.clone());
        }
        Ok(response)
    }

    fn calls(&self) -> usize {
        self.inner.calls()
    }
}
