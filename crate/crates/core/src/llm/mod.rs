//! Chat-completion providers: remote HTTP, cassette replay/record, and a
//! scripted in-process mock.

mod cassette;
mod remote;
pub mod scripted;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use cassette::{Cassette, CassetteEntry, RecordingProvider, ReplayProvider};
pub use remote::RemoteLlm;
pub use scripted::ScriptedLlm;

/// Which pipeline stage issued a request. Carried for tracing and for mocks;
/// it is not part of the cassette key.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Summarize,
    Decompose,
    RerankWithin,
    RerankAcross,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub model_id: String,
    #[serde(default)]
    pub stage: Stage,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidArgument(format!("temperature {} < 0", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.top_p) || self.top_p == 0.0 {
            return Err(Error::InvalidArgument(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidArgument("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Cassette key: SHA-256 over (model id, normalized prompt, temperature, top_p).
    pub fn key(&self) -> String {
        request_key(&self.model_id, &self.prompt, self.temperature, self.top_p)
    }
}

pub fn request_key(model_id: &str, prompt: &str, temperature: f64, top_p: f64) -> String {
    let canonical = serde_json::to_string(&(model_id, normalize_prompt(prompt), temperature, top_p))
        .expect("tuple of strings and floats serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Decoding parameters shared by every pipeline call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmSettings {
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            model_id: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 1024,
        }
    }
}

impl LlmSettings {
    pub fn request(&self, stage: Stage, prompt: String) -> LlmRequest {
        LlmRequest {
            prompt,
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            model_id: self.model_id.clone(),
            stage,
        }
    }
}

pub trait LlmProvider: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String>;

    /// Number of completed provider calls so far.
    fn calls(&self) -> usize {
        0
    }
}

impl<P: LlmProvider + ?Sized> LlmProvider for Box<P> {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        (**self).complete(request)
    }
    fn calls(&self) -> usize {
        (**self).calls()
    }
}

impl<P: LlmProvider + ?Sized> LlmProvider for std::sync::Arc<P> {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        (**self).complete(request)
    }
    fn calls(&self) -> usize {
        (**self).calls()
    }
}

/// Line endings to LF and trailing whitespace trimmed from every line.
pub fn normalize_prompt(prompt: &str) -> String {
    let unified = prompt.replace("\r\n", "\n").replace('\r', "\n");
    unified
        .split('\n')
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
}


/// One prompt/response pair, kept for run traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub stage: Stage,
    pub prompt_hash: String,
    pub prompt: String,
    pub response: String,
}

/// Provider, decoding settings and templates bundled for the LLM stages.
#[derive(Clone, Copy)]
pub struct LlmContext<'a> {
    pub provider: &'a dyn LlmProvider,
    pub settings: &'a LlmSettings,
    pub templates: &'a crate::prompts::PromptTemplates,
}

impl<'a> LlmContext<'a> {
    pub fn new(
        provider: &'a dyn LlmProvider,
        settings: &'a LlmSettings,
        templates: &'a crate::prompts::PromptTemplates,
    ) -> Self {
        Self {
            provider,
            settings,
            templates,
        }
    }

    pub fn call(&self, stage: Stage, prompt: String) -> Result<Exchange> {
        let request = self.settings.request(stage, prompt);
        let response = self.provider.complete(&request)?;
        Ok(Exchange {
            stage,
            prompt_hash: request.key(),
            prompt: request.prompt,
            response,
        })
    }
}
