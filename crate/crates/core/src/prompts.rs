//! Prompt templates for every LLM stage, shipped as text assets and
//! overridable from a directory.
//!
//! Placeholders are `{{name}}`. Rendering is a single left-to-right pass,
//! so substituted values are never re-scanned for placeholders.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Bumped whenever a shipped template changes; recorded in run traces.
pub const PROMPT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Template {
    name: &'static str,
    text: String,
}

impl Template {
    pub fn new(name: &'static str, text: impl Into<String>) -> Self {
        Self {
            name,
            text: text.into(),
        }
    }

    pub fn name(&self) -> &str {
        self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Substitutes every `{{key}}`. A placeholder with no binding is an error.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String> {
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut rest = self.text.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| {
                Error::InvalidArgument(format!("template {}: unclosed placeholder", self.name))
            })?;
            let key = &after[..end];
            let value = vars
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("template {}: no value for {{{{{key}}}}}", self.name))
                })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplates {
    pub summarize: Template,
    pub decompose: Template,
    pub rerank_within: Template,
    pub rerank_across: Template,
    pub codegen: Template,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            summarize: Template::new("summarize", include_str!("../assets/prompts/summarize.txt")),
            decompose: Template::new("decompose", include_str!("../assets/prompts/decompose.txt")),
            rerank_within: Template::new(
                "rerank_within",
                include_str!("../assets/prompts/rerank_within.txt"),
            ),
            rerank_across: Template::new(
                "rerank_across",
                include_str!("../assets/prompts/rerank_across.txt"),
            ),
            codegen: Template::new("codegen", include_str!("../assets/prompts/codegen.txt")),
        }
    }
}

impl PromptTemplates {
    /// Defaults, with any of `summarize.txt`, `decompose.txt`,
    /// `rerank_within.txt`, `rerank_across.txt`, `codegen.txt` found in `dir`
    /// taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut t = Self::default();
        for slot in [
            &mut t.summarize,
            &mut t.decompose,
            &mut t.rerank_within,
            &mut t.rerank_across,
            &mut t.codegen,
        ] {
            let path = dir.join(format!("{}.txt", slot.name));
            if path.exists() {
                slot.text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(t)
    }
}
