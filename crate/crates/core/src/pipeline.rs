//! End-to-end recommendation: example selection, decomposition,
//! per-subtask retrieval, and the two rerank stages. Also the direct
//! retrieval baseline, the ablation variants, and code-generation prompt
//! assembly.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::corpus::Corpus;
use crate::decompose::{decompose, Subtask, TaskQuery, DEFAULT_MAX_SUBTASKS};
use crate::embedding::{ApiIndex, Embedder, ScoredApi};
use crate::error::{Error, Result};
use crate::example_bank::{ExampleBank, SelectedExample, DEFAULT_KE};
use crate::llm::{Exchange, LlmContext};
use crate::prompts::{PromptTemplates, PROMPT_VERSION};
use crate::rerank::{fusion_fallback, rerank_across, rerank_within, RankedCandidates, DEFAULT_KP};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Capir,
    Direct,
    NoExamples,
    NoDecomposer,
    NoReranker,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Capir,
        Mode::Direct,
        Mode::NoExamples,
        Mode::NoDecomposer,
        Mode::NoReranker,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Capir => "capir",
            Mode::Direct => "direct",
            Mode::NoExamples => "no_examples",
            Mode::NoDecomposer => "no_decomposer",
            Mode::NoReranker => "no_reranker",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Few-shot examples shown to the decomposer.
    pub k_e: usize,
    /// Candidates retrieved per subtask.
    pub k_p: usize,
    pub max_subtasks: usize,
    /// Worker threads for per-subtask retrieval and reranking.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_e: DEFAULT_KE,
            k_p: DEFAULT_KP,
            max_subtasks: DEFAULT_MAX_SUBTASKS,
            jobs: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_p == 0 || self.max_subtasks == 0 || self.jobs == 0 {
            return Err(Error::InvalidArgument(
                "k_p, max_subtasks and jobs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    /// Decomposer reply was unusable; the task itself was the only subtask.
    pub decompose_fallback: bool,
    pub decompose_truncated_from: Option<usize>,
    /// 1-based subtask indices whose within-rerank kept retrieval order.
    pub within_fallback: Vec<usize>,
    /// Cross-subtask call failed; final list is pure fusion.
    pub across_fallback: bool,
    /// Final ids filled in by fusion after the model's picks.
    pub across_padded: usize,
    /// Reply items (both stages) that matched no candidate.
    pub dropped_ids: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskTrace {
    pub subtask: Subtask,
    pub retrieved: Vec<ScoredApi>,
    /// Absent when the mode skips reranking.
    pub reranked: Option<Vec<ScoredApi>>,
    pub exchange: Option<Exchange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleTrace {
    pub source_example_id: String,
    pub task: String,
    pub similarity: f64,
}

impl From<&SelectedExample> for ExampleTrace {
    fn from(s: &SelectedExample) -> Self {
        Self {
            source_example_id: s.pair.source_example_id.clone(),
            task: s.pair.task.clone(),
            similarity: s.similarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub mode: Mode,
    pub task: TaskQuery,
    pub k: usize,
    pub apis: Vec<ScoredApi>,
    pub examples: Vec<ExampleTrace>,
    pub decompose_exchange: Option<Exchange>,
    pub per_subtask: Vec<SubtaskTrace>,
    pub across_exchange: Option<Exchange>,
    pub flags: Flags,
}

impl Recommendation {
    pub fn ids(&self) -> Vec<&str> {
        self.apis.iter().map(|a| a.api_id.as_str()).collect()
    }
}

/// Serialized per-run record: everything needed to inspect a recommendation
/// after the fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub schema_version: u32,
    pub prompt_version: String,
    pub model_id: String,
    pub embedder: String,
    pub config: PipelineConfig,
    pub recommendation: Recommendation,
}

pub struct Engine<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a ApiIndex,
    pub bank: &'a ExampleBank,
    pub embedder: &'a dyn Embedder,
    pub llm: LlmContext<'a>,
    pub config: PipelineConfig,
}

impl<'a> Engine<'a> {
    pub fn new(
        corpus: &'a Corpus,
        index: &'a ApiIndex,
        bank: &'a ExampleBank,
        embedder: &'a dyn Embedder,
        llm: LlmContext<'a>,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        index.validate_against(corpus)?;
        if index.provider_id() != embedder.provider_id() {
            return Err(Error::IndexMismatch(format!(
                "index built with {}, embedder is {}",
                index.provider_id(),
                embedder.provider_id()
            )));
        }
        if !bank.is_empty() && bank.provider_id() != embedder.provider_id() {
            return Err(Error::IndexMismatch(format!(
                "example bank embedded with {}, embedder is {}",
                bank.provider_id(),
                embedder.provider_id()
            )));
        }
        Ok(Self {
            corpus,
            index,
            bank,
            embedder,
            llm,
            config,
        })
    }

    pub fn trace(&self, recommendation: Recommendation) -> RunTrace {
        RunTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            prompt_version: PROMPT_VERSION.to_string(),
            model_id: self.llm.settings.model_id.clone(),
            embedder: self.embedder.provider_id().to_string(),
            config: self.config.clone(),
            recommendation,
        }
    }

    fn library_label(&self, task: &TaskQuery) -> String {
        match &task.library_scope {
            Some(libs) if !libs.is_empty() => libs.join(", "),
            _ => self.corpus.library_scope().join(", "),
        }
    }

    fn retrieve(&self, task: &TaskQuery, text: &str, k: usize) -> Result<Vec<ScoredApi>> {
        let query = self.embedder.embed(text)?;
        match &task.library_scope {
            Some(libs) if !libs.is_empty() => self.index.top_k_where(&query, k, |id| {
                self.corpus
                    .lookup(id)
                    .is_some_and(|r| libs.contains(&r.library))
            }),
            _ => self.index.top_k(&query, k),
        }
    }

    fn check(task: &TaskQuery, k: usize) -> Result<()> {
        task.validate()?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn run(&self, task: &TaskQuery, k: usize, mode: Mode) -> Result<Recommendation> {
        match mode {
            Mode::Direct => self.recommend_direct(task, k),
            m => self.staged(task, k, m),
        }
    }

    pub fn recommend(&self, task: &TaskQuery, k: usize) -> Result<Recommendation> {
        self.staged(task, k, Mode::Capir)
    }

    /// Ablations: `NoExamples`, `NoDecomposer`, `NoReranker`.
    pub fn recommend_ablation(&self, task: &TaskQuery, k: usize, variant: Mode) -> Result<Recommendation> {
        if matches!(variant, Mode::Capir | Mode::Direct) {
            return Err(Error::InvalidArgument(format!("{variant} is not an ablation")));
        }
        self.staged(task, k, variant)
    }

    /// Plain similarity retrieval on the task text.
    pub fn recommend_direct(&self, task: &TaskQuery, k: usize) -> Result<Recommendation> {
        Self::check(task, k)?;
        let text = task.text.trim();
        let apis = self.retrieve(task, text, k)?;
        Ok(Recommendation {
            mode: Mode::Direct,
            task: task.clone(),
            k,
            per_subtask: vec![SubtaskTrace {
                subtask: Subtask {
                    index: 1,
                    text: text.to_string(),
                },
                retrieved: apis.clone(),
                reranked: None,
                exchange: None,
            }],
            apis,
            examples: Vec::new(),
            decompose_exchange: None,
            across_exchange: None,
            flags: Flags::default(),
        })
    }

    fn staged(&self, task: &TaskQuery, k: usize, mode: Mode) -> Result<Recommendation> {
        Self::check(task, k)?;
        let mut flags = Flags::default();
        let mut examples = Vec::new();
        let mut decompose_exchange = None;

        let subtasks = if mode == Mode::NoDecomposer {
            vec![Subtask {
                index: 1,
                text: task.text.trim().to_string(),
            }]
        } else {
            let selected = if mode == Mode::NoExamples {
                Vec::new()
            } else {
                self.bank.select(&task.text, self.config.k_e, self.embedder)?
            };
            examples = selected.iter().map(ExampleTrace::from).collect();
            let pairs: Vec<_> = selected.into_iter().map(|s| s.pair).collect();
            let d = decompose(task, &pairs, &self.llm, self.config.max_subtasks)?;
            flags.decompose_fallback = d.fallback;
            flags.decompose_truncated_from = d.truncated_from;
            decompose_exchange = Some(d.exchange);
            d.subtasks
        };
        debug!(mode = %mode, subtasks = subtasks.len(), "decomposed");

        let library = self.library_label(task);
        let rerank = mode != Mode::NoReranker;
        let stage = |st: &Subtask| -> Result<(SubtaskTrace, bool, usize)> {
            let retrieved = self.retrieve(task, &st.text, self.config.k_p)?;
            if !rerank {
                return Ok((
                    SubtaskTrace {
                        subtask: st.clone(),
                        retrieved,
                        reranked: None,
                        exchange: None,
                    },
                    false,
                    0,
                ));
            }
            let out = rerank_within(st, &retrieved, self.corpus, &library, &self.llm)?;
            Ok((
                SubtaskTrace {
                    subtask: st.clone(),
                    retrieved,
                    reranked: Some(out.ranked),
                    exchange: out.exchange,
                },
                out.fallback,
                out.dropped,
            ))
        };
        let staged: Vec<(SubtaskTrace, bool, usize)> = if self.config.jobs > 1 && subtasks.len() > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.jobs)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            pool.install(|| subtasks.par_iter().map(stage).collect::<Result<_>>())?
        } else {
            subtasks.iter().map(stage).collect::<Result<_>>()?
        };

        let mut per_subtask = Vec::with_capacity(staged.len());
        for (t, fallback, dropped) in staged {
            if fallback {
                flags.within_fallback.push(t.subtask.index);
            }
            flags.dropped_ids += dropped;
            per_subtask.push(t);
        }

        let lists: Vec<RankedCandidates> = per_subtask
            .iter()
            .map(|t| RankedCandidates {
                subtask: t.subtask.clone(),
                candidates: t.reranked.clone().unwrap_or_else(|| t.retrieved.clone()),
            })
            .collect();

        let (apis, across_exchange) = if rerank {
            let out = rerank_across(task, &lists, k, self.corpus, &library, &self.llm)?;
            flags.across_fallback = out.fallback;
            flags.across_padded = out.padded;
            flags.dropped_ids += out.dropped;
            (out.ranked, out.exchange)
        } else {
            (fusion_fallback(&lists, k), None)
        };

        Ok(Recommendation {
            mode,
            task: task.clone(),
            k,
            apis,
            examples,
            decompose_exchange,
            per_subtask,
            across_exchange,
            flags,
        })
    }
}

/// Code-generation prompt: the task, then the recommended APIs as
/// `id — description` lines (omitted when `apis` is empty), then the
/// completion cue.
pub fn assemble_codegen_prompt(
    task: &TaskQuery,
    apis: &[ScoredApi],
    corpus: &Corpus,
    templates: &PromptTemplates,
) -> Result<String> {
    let mut section = String::new();
    if !apis.is_empty() {
        section.push_str("You may use these APIs:\n");
        for a in apis {
            let rec = corpus.get(&a.api_id)?;
            section.push_str(&format!("{} — {}\n", rec.id, rec.description));
        }
        section.push('\n');
    }
    templates
        .codegen
        .render(&[("task", task.text.trim()), ("apis", &section)])
}
