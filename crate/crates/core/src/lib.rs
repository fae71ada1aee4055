//! Compositional API recommendation.
//!
//! A task is decomposed into subtasks with few-shot examples mined from
//! library code, each subtask retrieves candidate APIs by embedding
//! similarity, and an LLM reranks within and then across subtasks.

pub mod corpus;
pub mod decompose;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod example_bank;
mod http;
pub mod jsonl;
pub mod llm;
pub mod pipeline;
pub mod prompts;
pub mod rerank;

pub use error::{Error, Result};
pub use http::HttpConfig;
