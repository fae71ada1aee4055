//! Two-stage LLM reranking: within each subtask's candidate list, then
//! across subtasks into the final top-k.
//!
//! Model replies are repaired rather than trusted: ids not among the
//! candidates are dropped, and candidates the model omitted are appended
//! (within) or filled in by round-robin fusion (across).

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::Corpus;
use crate::decompose::{Subtask, TaskQuery};
use crate::embedding::ScoredApi;
use crate::error::{Error, Result};
use crate::llm::{Exchange, LlmContext, Stage};

pub const DEFAULT_KP: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub subtask: Subtask,
    pub candidates: Vec<ScoredApi>,
}

fn dedup(candidates: &[ScoredApi]) -> Vec<ScoredApi> {
    let mut seen = HashSet::new();
    candidates
        .iter()
        .filter(|c| seen.insert(c.api_id.clone()))
        .cloned()
        .collect()
}

/// Maps free-form model output items onto known candidate ids.
struct IdResolver<'a> {
    ids: HashSet<&'a str>,
    by_name: HashMap<&'a str, Option<&'a str>>,
    by_suffix: HashMap<&'a str, Option<&'a str>>,
}

impl<'a> IdResolver<'a> {
    fn new(ids: impl IntoIterator<Item = &'a str>, corpus: &'a Corpus) -> Self {
        let mut r = Self {
            ids: HashSet::new(),
            by_name: HashMap::new(),
            by_suffix: HashMap::new(),
        };
        for id in ids {
            r.ids.insert(id);
            if let Some(rec) = corpus.lookup(id) {
                r.by_name
                    .entry(rec.name.as_str())
                    .and_modify(|v| *v = None)
                    .or_insert(Some(id));
            }
            let suffix = id.rsplit('.').next().unwrap_or(id);
            r.by_suffix
                .entry(suffix)
                .and_modify(|v| *v = None)
                .or_insert(Some(id));
        }
        r
    }

    fn resolve(&self, item: &str) -> Option<&'a str> {
        if let Some(&id) = self.ids.get(item) {
            return Some(id);
        }
        self.by_name
            .get(item)
            .copied()
            .flatten()
            .or_else(|| self.by_suffix.get(item).copied().flatten())
    }
}

fn clean_token(raw: &str) -> &str {
    let mut s = raw.trim();
    loop {
        let before = s;
        s = s.trim_start_matches(|c: char| c.is_ascii_digit());
        if s.len() != before.len() {
            s = s.strip_prefix('.').or_else(|| s.strip_prefix(')')).unwrap_or(before);
        }
        s = s
            .trim_start_matches(['-', '*', '•'])
            .trim()
            .trim_matches(['"', '\'', '`', '*', '[', ']', ','])
            .trim();
        s = s.strip_suffix("()").unwrap_or(s).trim();
        if s == before {
            return s;
        }
    }
}

/// Pulls candidate ids out of a model reply, in order of first mention.
/// Returns the resolved ids and how many items did not resolve.
fn parse_id_list(raw: &str, resolver: &IdResolver<'_>) -> (Vec<String>, usize) {
    let text = raw.trim();
    let fenced = text
        .strip_prefix("```")
        .and_then(|b| b.split_once('\n'))
        .map(|(_, rest)| rest.trim_end().trim_end_matches("```").trim())
        .unwrap_or(text);
    let items: Vec<String> = match serde_json::from_str::<Vec<String>>(fenced) {
        Ok(arr) => arr,
        Err(_) => fenced
            .lines()
            .flat_map(|line| {
                // Drop a trailing description before splitting on commas.
                let head = [" — ", " – ", " - ", ": "]
                    .iter()
                    .filter_map(|sep| line.find(sep))
                    .min()
                    .map_or(line, |i| &line[..i]);
                head.split(',').map(str::to_string).collect::<Vec<_>>()
            })
            .collect(),
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut dropped = 0;
    for item in &items {
        let token = clean_token(item);
        if token.is_empty() {
            continue;
        }
        match resolver.resolve(token) {
            Some(id) => {
                if seen.insert(id) {
                    out.push(id.to_string());
                }
            }
            None => dropped += 1,
        }
    }
    (out, dropped)
}

/// Errors that end a rerank stage with its deterministic fallback. Transport
/// failures and cassette misses propagate instead.
fn degrade(stage: Stage, err: Error) -> Result<Option<Exchange>> {
    match err {
        Error::Provider { retryable: false, .. } | Error::InvalidArgument(_) => {
            warn!(?stage, error = %err, "llm call failed, using fallback order");
            Ok(None)
        }
        e => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WithinOutcome {
    pub ranked: Vec<ScoredApi>,
    /// Input order was kept because the call failed or nothing parsed.
    pub fallback: bool,
    /// Reply items that matched no candidate.
    pub dropped: usize,
    pub exchange: Option<Exchange>,
}

fn candidate_line(corpus: &Corpus, id: &str) -> String {
    match corpus.lookup(id) {
        Some(r) => format!("{id} — {}", r.description),
        None => id.to_string(),
    }
}

pub fn render_within_prompt(
    subtask: &Subtask,
    candidates: &[ScoredApi],
    corpus: &Corpus,
    library: &str,
    llm: &LlmContext,
) -> Result<String> {
    let lines: Vec<String> = candidates.iter().map(|c| candidate_line(corpus, &c.api_id)).collect();
    llm.templates.rerank_within.render(&[
        ("library", library),
        ("subtask", &subtask.text),
        ("count", &candidates.len().to_string()),
        ("candidates", &lines.join("\n")),
    ])
}

/// Reorders one subtask's candidates. The result is always a permutation of
/// the (deduplicated) input: unknown ids are dropped, omitted ones are
/// appended in their original relative order, scores are carried over.
pub fn rerank_within(
    subtask: &Subtask,
    candidates: &[ScoredApi],
    corpus: &Corpus,
    library: &str,
    llm: &LlmContext,
) -> Result<WithinOutcome> {
    let candidates = dedup(candidates);
    if candidates.is_empty() {
        return Ok(WithinOutcome {
            ranked: candidates,
            fallback: true,
            dropped: 0,
            exchange: None,
        });
    }
    let prompt = render_within_prompt(subtask, &candidates, corpus, library, llm)?;
    let exchange = match llm.call(Stage::RerankWithin, prompt) {
        Ok(x) => Some(x),
        Err(e) => degrade(Stage::RerankWithin, e)?,
    };
    let Some(exchange) = exchange else {
        return Ok(WithinOutcome {
            ranked: candidates,
            fallback: true,
            dropped: 0,
            exchange: None,
        });
    };
    let resolver = IdResolver::new(candidates.iter().map(|c| c.api_id.as_str()), corpus);
    let (order, dropped) = parse_id_list(&exchange.response, &resolver);
    let fallback = order.is_empty();
    Ok(WithinOutcome {
        ranked: apply_order(&candidates, &order),
        fallback,
        dropped,
        exchange: Some(exchange),
    })
}

/// `order` first (ids assumed present and distinct), then the rest of
/// `candidates` in their original order.
fn apply_order(candidates: &[ScoredApi], order: &[String]) -> Vec<ScoredApi> {
    let by_id: HashMap<&str, &ScoredApi> = candidates.iter().map(|c| (c.api_id.as_str(), c)).collect();
    let chosen: HashSet<&str> = order.iter().map(String::as_str).collect();
    order
        .iter()
        .filter_map(|id| by_id.get(id.as_str()).map(|c| (*c).clone()))
        .chain(candidates.iter().filter(|c| !chosen.contains(c.api_id.as_str())).cloned())
        .collect()
}

/// Round-robin merge by rank: every list's rank-1, then every rank-2, and
/// so on, skipping ids already taken, until `k` items or exhaustion.
pub fn fusion_fallback(per_subtask: &[RankedCandidates], k: usize) -> Vec<ScoredApi> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let depth = per_subtask.iter().map(|r| r.candidates.len()).max().unwrap_or(0);
    'outer: for rank in 0..depth {
        for list in per_subtask {
            if out.len() >= k {
                break 'outer;
            }
            if let Some(c) = list.candidates.get(rank) {
                if seen.insert(c.api_id.as_str()) {
                    out.push(c.clone());
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AcrossOutcome {
    pub ranked: Vec<ScoredApi>,
    /// The call failed; the result is pure fusion.
    pub fallback: bool,
    /// Ids taken from the model reply.
    pub from_llm: usize,
    /// Ids filled in by fusion after the model's picks.
    pub padded: usize,
    pub dropped: usize,
    pub exchange: Option<Exchange>,
}

pub fn render_across_prompt(
    task: &TaskQuery,
    per_subtask: &[RankedCandidates],
    k: usize,
    corpus: &Corpus,
    library: &str,
    llm: &LlmContext,
) -> Result<String> {
    let mut blocks = String::new();
    for (i, r) in per_subtask.iter().enumerate() {
        let n = i + 1;
        blocks.push_str(&format!("- Subtask {n}: {}\n", r.subtask.text));
        blocks.push_str(&format!("- Retrieved APIs for subtask {n}:\n"));
        for c in &r.candidates {
            blocks.push_str("  ");
            blocks.push_str(&candidate_line(corpus, &c.api_id));
            blocks.push('\n');
        }
    }
    let count = per_subtask.iter().map(|r| r.candidates.len()).max().unwrap_or(0);
    llm.templates.rerank_across.render(&[
        ("library", library),
        ("task", task.text.trim()),
        ("count", &count.to_string()),
        ("k", &k.to_string()),
        ("subtasks", &blocks),
    ])
}

/// Fuses per-subtask lists into the final top-`k`. The model's picks come
/// first (restricted to the candidate union, deduplicated); if fewer than
/// `min(k, |union|)` survive, fusion order fills the rest.
pub fn rerank_across(
    task: &TaskQuery,
    per_subtask: &[RankedCandidates],
    k: usize,
    corpus: &Corpus,
    library: &str,
    llm: &LlmContext,
) -> Result<AcrossOutcome> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if per_subtask.is_empty() {
        return Err(Error::InvalidArgument("no subtask candidates to rerank".into()));
    }
    let fused = fusion_fallback(per_subtask, usize::MAX);
    let target = k.min(fused.len());
    if fused.is_empty() {
        return Ok(AcrossOutcome {
            ranked: Vec::new(),
            fallback: true,
            from_llm: 0,
            padded: 0,
            dropped: 0,
            exchange: None,
        });
    }

    let prompt = render_across_prompt(task, per_subtask, k, corpus, library, llm)?;
    let exchange = match llm.call(Stage::RerankAcross, prompt) {
        Ok(x) => Some(x),
        Err(e) => degrade(Stage::RerankAcross, e)?,
    };
    let (mut picks, dropped) = match &exchange {
        Some(x) => {
            let resolver = IdResolver::new(fused.iter().map(|c| c.api_id.as_str()), corpus);
            parse_id_list(&x.response, &resolver)
        }
        None => (Vec::new(), 0),
    };
    picks.truncate(target);
    let from_llm = picks.len();
    let mut ranked = apply_order(&fused, &picks);
    ranked.truncate(target);
    Ok(AcrossOutcome {
        padded: ranked.len() - from_llm,
        fallback: exchange.is_none(),
        ranked,
        from_llm,
        dropped,
        exchange,
    })
}
