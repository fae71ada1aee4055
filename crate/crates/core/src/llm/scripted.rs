//! In-process LLM stand-in driven by a closure. Used by tests and by
//! offline experiments that need a deterministic "model".

use std::sync::Mutex;

use super::{LlmProvider, LlmRequest};
use crate::error::Result;

type Script = dyn Fn(&LlmRequest) -> Result<String> + Send + Sync;

pub struct ScriptedLlm {
    script: Box<Script>,
    log: Mutex<Vec<LlmRequest>>,
}

impl ScriptedLlm {
    pub fn from_fn(f: impl Fn(&LlmRequest) -> Result<String> + Send + Sync + 'static) -> Self {
        Self {
            script: Box::new(f),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Always answers `response`.
    pub fn always(response: impl Into<String>) -> Self {
        let response = response.into();
        Self::from_fn(move |_| Ok(response.clone()))
    }

    /// Every request seen so far, in call order.
    pub fn requests(&self) -> Vec<LlmRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl LlmProvider for ScriptedLlm {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        self.log.lock().unwrap().push(request.clone());
        (self.script)(request)
    }

    fn calls(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

/// Candidate ids listed in a rerank prompt (`id — description` lines), in
/// the order they appear.
pub fn listed_candidates(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| l.trim().split_once(" — ").map(|(id, _)| id.trim().to_string()))
        .filter(|id| !id.is_empty() && !id.contains(' '))
        .collect()
}

/// The task text from a decomposer or reranker prompt (last `Task: ` line).
pub fn prompt_task(prompt: &str) -> Option<String> {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("Task: ").map(|t| t.trim().to_string()))
}
