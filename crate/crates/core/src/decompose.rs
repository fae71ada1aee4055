//! LLM decomposer: coarse task in, API-granular subtask sequence out.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example_bank::ExamplePair;
use crate::llm::{Exchange, LlmContext, Stage};

/// Largest gold API sequence in the reference benchmarks is 8.
pub const DEFAULT_MAX_SUBTASKS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskQuery {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library_scope: Option<Vec<String>>,
}

impl TaskQuery {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            library_scope: None,
        }
    }

    pub fn with_scope(mut self, libraries: Vec<String>) -> Self {
        self.library_scope = Some(libraries);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::InvalidArgument("task text is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    /// 1-based position in the sequence.
    pub index: usize,
    pub text: String,
}

impl Subtask {
    /// Numbers `texts` contiguously from 1.
    pub fn sequence(texts: impl IntoIterator<Item = String>) -> Vec<Subtask> {
        texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| Subtask { index: i + 1, text })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decomposition {
    pub subtasks: Vec<Subtask>,
    /// The reply had no usable subtasks; the raw task stands in as the only one.
    pub fallback: bool,
    /// Number of parsed subtasks before capping, when capping applied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncated_from: Option<usize>,
    pub exchange: Exchange,
}

static MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(?:\d+[.)]|[-*])(?:\s+|$)").unwrap());

const QUOTES: [(char, char); 5] = [('"', '"'), ('\'', '\''), ('`', '`'), ('“', '”'), ('‘', '’')];

fn strip_quotes(s: &str) -> Option<&str> {
    let mut chars = s.chars();
    let (first, last) = (chars.next()?, chars.next_back()?);
    QUOTES
        .iter()
        .any(|&(o, c)| first == o && last == c)
        .then(|| &s[first.len_utf8()..s.len() - last.len_utf8()])
}

/// Collapses whitespace, then strips list markers and surrounding quotes
/// until neither applies.
fn clean_item(raw: &str) -> String {
    let mut s = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let before = s.clone();
        if let Some(m) = MARKER.find(&s) {
            s = s[m.end()..].trim().to_string();
        }
        if let Some(inner) = strip_quotes(&s) {
            s = inner.trim().to_string();
        }
        if s == before {
            return s;
        }
    }
}

fn strip_code_fence(text: &str) -> &str {
    let Some(body) = text.strip_prefix("```") else {
        return text;
    };
    let body = body.split_once('\n').map_or("", |(_, rest)| rest);
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// Reads a subtask list out of a model reply. Accepted shapes, in priority
/// order: a JSON array of strings (optionally code-fenced); lines starting
/// with `N.`, `N)`, `-` or `*`; otherwise every non-empty line.
pub fn parse_decomposer_output(raw: &str) -> Vec<String> {
    let text = raw.trim();
    let items: Vec<String> = if let Ok(arr) = serde_json::from_str::<Vec<String>>(strip_code_fence(text)) {
        arr
    } else {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let marked: Vec<&str> = lines.iter().copied().filter(|l| MARKER.is_match(l)).collect();
        if marked.is_empty() {
            lines.into_iter().map(str::to_string).collect()
        } else {
            marked.into_iter().map(str::to_string).collect()
        }
    };
    items
        .iter()
        .map(|s| clean_item(s))
        .filter(|s| !s.is_empty())
        .collect()
}

/// Renders a list the way the parser reads it back: `1. a\n2. b`.
pub fn render_numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_decompose_prompt(task: &TaskQuery, examples: &[ExamplePair], llm: &LlmContext) -> Result<String> {
    let examples_section = if examples.is_empty() {
        String::new()
    } else {
        let blocks: Vec<String> = examples
            .iter()
            .map(|e| format!("Task: {}\nSubtasks:\n{}\n", e.task, render_numbered(&e.subtasks)))
            .collect();
        format!("Examples:\n{}\n", blocks.join("\n"))
    };
    llm.templates
        .decompose
        .render(&[("examples", &examples_section), ("task", task.text.trim())])
}

/// Breaks `task` into at most `max_subtasks` subtasks using `examples` as
/// few-shot demonstrations (an empty slice gives the zero-shot prompt).
/// Never returns an empty list: an unusable reply falls back to the task
/// text itself.
pub fn decompose(
    task: &TaskQuery,
    examples: &[ExamplePair],
    llm: &LlmContext,
    max_subtasks: usize,
) -> Result<Decomposition> {
    task.validate()?;
    if max_subtasks == 0 {
        return Err(Error::InvalidArgument("max_subtasks must be at least 1".into()));
    }
    let prompt = render_decompose_prompt(task, examples, llm)?;
    let exchange = llm.call(Stage::Decompose, prompt)?;
    let mut texts = parse_decomposer_output(&exchange.response);
    let mut truncated_from = None;
    if texts.len() > max_subtasks {
        truncated_from = Some(texts.len());
        texts.truncate(max_subtasks);
    }
    let fallback = texts.is_empty();
    if fallback {
        texts.push(task.text.trim().to_string());
    }
    Ok(Decomposition {
        subtasks: Subtask::sequence(texts),
        fallback,
        truncated_from,
        exchange,
    })
}
