//! Text embeddings, cosine similarity and the exact top-k API index.

mod cache;
mod index;
mod remote;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_description, ApiRecord};
use crate::error::{Error, Result};

pub use cache::CachedEmbedder;
pub use index::{build_index, ApiIndex, ScoredApi, INDEX_FORMAT_VERSION};
pub use remote::{RemoteEmbedder, RemoteEmbedderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }
}

impl From<Vec<f32>> for EmbeddingVector {
    fn from(values: Vec<f32>) -> Self {
        Self(values)
    }
}

/// `a·b / (‖a‖‖b‖)`, accumulated in f64 and clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("zero vector has no direction".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn dot(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// A text embedding model. Implementations must be deterministic: the same
/// text always maps to the same vector.
pub trait Embedder: Send + Sync {
    /// Stable identifier, used to key caches and validate persisted indexes.
    fn provider_id(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn provider_id(&self) -> &str {
        (**self).provider_id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).embed(text)
    }
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn provider_id(&self) -> &str {
        (**self).provider_id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).embed(text)
    }
}

/// Normalizes `text` and rejects input with nothing left to embed.
pub(crate) fn prepare_text(text: &str) -> Result<String> {
    let text = normalize_description(text);
    if text.is_empty() {
        return Err(Error::InvalidArgument("cannot embed empty text".into()));
    }
    Ok(text)
}

pub const HASHING_DIM: usize = 256;

/// Offline embedder: feature-hashed bag of words over lowercased
/// alphanumeric tokens, L2-normalized. Word order does not matter.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    id: String,
}

impl HashingEmbedder {
    pub fn new() -> Self {
        Self::with_dim(HASHING_DIM)
    }

    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            id: format!("hash-bow-v2-{dim}"),
        }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

// FNV-1a, 64-bit. Fixed so hashed vectors are identical across platforms
// and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// The low bits of FNV-1a depend only on the low bits of each input byte,
// so bucketing by `h % dim` collides on tokens that share a structure
// ("w012x", "w210x"). Mix the high bits down first (murmur3 fmix64).
fn bucket(token: &str, dim: usize) -> usize {
    let mut h = fnv1a(token.as_bytes());
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h % dim as u64) as usize
}

impl Embedder for HashingEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let text = prepare_text(text)?;
        let mut counts = vec![0f64; self.dim];
        let mut any = false;
        for token in tokenize(&text) {
            counts[bucket(&token, self.dim)] += 1.0;
            any = true;
        }
        if !any {
            return Err(Error::InvalidArgument(format!(
                "no alphanumeric tokens in {text:?}"
            )));
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        Ok(EmbeddingVector(
            counts.into_iter().map(|c| (c / norm) as f32).collect(),
        ))
    }
}

/// Which text of an [`ApiRecord`] gets embedded into the index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedText {
    Description,
    /// `"name: description"`
    #[default]
    NameAndDescription,
}

impl EmbedText {
    pub fn render(self, record: &ApiRecord) -> String {
        match self {
            EmbedText::Description => record.description.clone(),
            EmbedText::NameAndDescription => format!("{}: {}", record.name, record.description),
        }
    }
}
