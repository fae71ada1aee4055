//! Few-shot example bank: `<task, subtasks>` pairs summarized from
//! documentation code examples, and similarity-based selection of the
//! examples shown to the decomposer.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::{CodeExample, Corpus};
use crate::embedding::{cosine, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::llm::{LlmContext, Stage};

pub const DEFAULT_KE: usize = 4;
const BANK_FORMAT_VERSION: u32 = 1;
const JSON_ONLY_SUFFIX: &str = "\nRespond with JSON only.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub task: String,
    pub subtasks: Vec<String>,
    pub api_ids: Vec<String>,
    pub source_example_id: String,
    /// True when the summarizer produced exactly one subtask per API, so
    /// `subtasks[i]` describes `api_ids[i]`.
    #[serde(default)]
    pub aligned: bool,
}

#[derive(Debug, Deserialize)]
struct Summary {
    task: String,
    subtasks: Vec<String>,
}

/// Index of the first balanced `{...}` region, skipping braces inside
/// JSON string literals.
fn first_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn valid_summary(s: Summary) -> Option<(String, Vec<String>)> {
    let task = s.task.trim().to_string();
    let subtasks: Vec<String> = s
        .subtasks
        .iter()
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    (!task.is_empty() && !subtasks.is_empty()).then_some((task, subtasks))
}

/// Parses `{"task": ..., "subtasks": [...]}` from a model reply: the whole
/// reply first, then the first balanced object embedded in prose.
pub fn parse_summary(raw: &str) -> Option<(String, Vec<String>)> {
    if let Ok(s) = serde_json::from_str::<Summary>(raw.trim()) {
        return valid_summary(s);
    }
    let obj = first_object(raw)?;
    serde_json::from_str::<Summary>(obj).ok().and_then(valid_summary)
}

pub fn render_summarize_prompt(example: &CodeExample, corpus: &Corpus, llm: &LlmContext) -> Result<String> {
    let mut libraries: Vec<&str> = Vec::new();
    let mut apis = Vec::with_capacity(example.api_ids.len());
    for id in &example.api_ids {
        let r = corpus.get(id)?;
        if !libraries.contains(&r.library.as_str()) {
            libraries.push(&r.library);
        }
        apis.push(format!("{} — {}", r.name, r.description));
    }
    llm.templates.summarize.render(&[
        ("library", &libraries.join(", ")),
        ("code", example.code.trim_end()),
        ("apis", &apis.join("\n")),
    ])
}

/// Summarizes one code example into an [`ExamplePair`]. If neither the
/// reply nor its first embedded object parses, the prompt is retried once
/// with a JSON-only instruction.
pub fn summarize_example(example: &CodeExample, corpus: &Corpus, llm: &LlmContext) -> Result<ExamplePair> {
    let prompt = render_summarize_prompt(example, corpus, llm)?;
    let first = llm.call(Stage::Summarize, prompt.clone())?;
    let parsed = match parse_summary(&first.response) {
        Some(p) => p,
        None => {
            let retry = llm.call(Stage::Summarize, format!("{prompt}{JSON_ONLY_SUFFIX}"))?;
            parse_summary(&retry.response).ok_or(Error::Summarization { raw: retry.response })?
        }
    };
    let (task, subtasks) = parsed;
    Ok(ExamplePair {
        aligned: subtasks.len() == example.api_ids.len(),
        task,
        subtasks,
        api_ids: example.api_ids.clone(),
        source_example_id: example.id.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleBank {
    pairs: Vec<ExamplePair>,
    embeddings: Vec<EmbeddingVector>,
    provider_id: String,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankSidecar {
    format_version: u32,
    provider_id: String,
    dim: usize,
    embeddings: Vec<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BankFailure {
    pub example_id: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct BankBuild {
    pub bank: ExampleBank,
    pub failures: Vec<BankFailure>,
}

/// Summarizes and embeds every example. Unparseable summaries and
/// unembeddable tasks are skipped and reported; provider errors abort.
/// Bank order follows `examples` regardless of `jobs`.
pub fn build_example_bank(
    examples: &[CodeExample],
    corpus: &Corpus,
    llm: &LlmContext,
    embedder: &dyn Embedder,
    jobs: usize,
) -> Result<BankBuild> {
    let one = |ex: &CodeExample| -> Result<std::result::Result<(ExamplePair, EmbeddingVector), BankFailure>> {
        let pair = match summarize_example(ex, corpus, llm) {
            Ok(p) => p,
            Err(Error::Summarization { raw }) => {
                warn!(example = %ex.id, "skipping example with unparseable summary");
                return Ok(Err(BankFailure {
                    example_id: ex.id.clone(),
                    reason: format!("unparseable summary: {raw:?}"),
                }));
            }
            Err(e) => return Err(e),
        };
        match embedder.embed(&pair.task) {
            Ok(v) => Ok(Ok((pair, v))),
            Err(e @ Error::InvalidArgument(_)) => Ok(Err(BankFailure {
                example_id: ex.id.clone(),
                reason: e.to_string(),
            })),
            Err(e) => Err(e),
        }
    };
    let results: Vec<_> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| examples.par_iter().map(one).collect::<Result<Vec<_>>>())?
    } else {
        examples.iter().map(one).collect::<Result<Vec<_>>>()?
    };

    let mut bank = ExampleBank::empty(embedder);
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok((pair, v)) => {
                bank.pairs.push(pair);
                bank.embeddings.push(v);
            }
            Err(f) => failures.push(f),
        }
    }
    Ok(BankBuild { bank, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectedExample {
    pub pair: ExamplePair,
    pub similarity: f64,
}

impl ExampleBank {
    pub fn empty(embedder: &dyn Embedder) -> Self {
        Self {
            pairs: Vec::new(),
            embeddings: Vec::new(),
            provider_id: embedder.provider_id().to_string(),
            dim: embedder.dim(),
        }
    }

    /// Embeds each pair's task with `embedder`.
    pub fn from_pairs(pairs: Vec<ExamplePair>, embedder: &dyn Embedder) -> Result<Self> {
        let embeddings = pairs
            .iter()
            .map(|p| embedder.embed(&p.task))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pairs,
            embeddings,
            provider_id: embedder.provider_id().to_string(),
            dim: embedder.dim(),
        })
    }

    pub fn pairs(&self) -> &[ExamplePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn sidecar_path(bank_path: &Path) -> PathBuf {
        let mut name = bank_path.as_os_str().to_owned();
        name.push(".emb.json");
        PathBuf::from(name)
    }

    /// Writes the pairs as JSONL at `path` and their embeddings to the
    /// `<path>.emb.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.pairs)?;
        jsonl::write_json(
            &Self::sidecar_path(path),
            &BankSidecar {
                format_version: BANK_FORMAT_VERSION,
                provider_id: self.provider_id.clone(),
                dim: self.dim,
                embeddings: self.embeddings.clone(),
            },
        )
    }

    /// Loads pairs from `path`. Embeddings come from the sidecar when it
    /// matches `embedder`; otherwise they are recomputed.
    pub fn load(path: &Path, embedder: &dyn Embedder) -> Result<Self> {
        let pairs: Vec<ExamplePair> = jsonl::read(path)?;
        let sidecar = Self::sidecar_path(path);
        if sidecar.exists() {
            let s: BankSidecar = jsonl::read_json(&sidecar)?;
            if s.format_version == BANK_FORMAT_VERSION
                && s.provider_id == embedder.provider_id()
                && s.embeddings.len() == pairs.len()
                && s.embeddings.iter().all(|v| v.dim() == s.dim)
            {
                return Ok(Self {
                    pairs,
                    embeddings: s.embeddings,
                    provider_id: s.provider_id,
                    dim: s.dim,
                });
            }
            warn!(path = %sidecar.display(), "bank embeddings stale, recomputing");
        }
        Self::from_pairs(pairs, embedder)
    }

    /// The `k_e` pairs whose tasks are most similar to `task`, most similar
    /// first; ties go to the smaller `source_example_id`.
    pub fn select(&self, task: &str, k_e: usize, embedder: &dyn Embedder) -> Result<Vec<SelectedExample>> {
        if k_e == 0 {
            return Err(Error::InvalidArgument("k_e must be at least 1".into()));
        }
        if self.pairs.is_empty() {
            return Ok(Vec::new());
        }
        if embedder.provider_id() != self.provider_id {
            return Err(Error::IndexMismatch(format!(
                "bank embedded with {}, query embedder is {}",
                self.provider_id,
                embedder.provider_id()
            )));
        }
        let query = embedder.embed(task)?;
        let mut scored = self
            .pairs
            .iter()
            .zip(&self.embeddings)
            .map(|(p, e)| Ok((p, cosine(&query, e)?)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| a.0.source_example_id.cmp(&b.0.source_example_id))
        });
        Ok(scored
            .into_iter()
            .take(k_e)
            .map(|(p, similarity)| SelectedExample {
                pair: p.clone(),
                similarity,
            })
            .collect())
    }
}

/// Free-function form of [`ExampleBank::select`].
pub fn select_examples(
    bank: &ExampleBank,
    task: &str,
    k_e: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<SelectedExample>> {
    bank.select(task, k_e, embedder)
}
