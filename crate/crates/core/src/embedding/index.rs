use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cosine, EmbedText, Embedder, EmbeddingVector};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::jsonl;

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredApi {
    pub api_id: String,
    pub score: f64,
}

impl ScoredApi {
    pub fn new(api_id: impl Into<String>, score: f64) -> Self {
        Self {
            api_id: api_id.into(),
            score,
        }
    }
}

/// Descending score, then ascending id.
pub(crate) fn rank_order(a: &ScoredApi, b: &ScoredApi) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.api_id.cmp(&b.api_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    api_id: String,
    vector: EmbeddingVector,
}

/// Exact-scan vector index over API embeddings, one entry per corpus record
/// in corpus order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiIndex {
    format_version: u32,
    provider_id: String,
    dim: usize,
    embed_text: EmbedText,
    entries: Vec<IndexEntry>,
}

/// Embeds every record of `corpus`. Up to `jobs` embedding calls run at
/// once; entries are written back in corpus order.
pub fn build_index(
    corpus: &Corpus,
    embedder: &dyn Embedder,
    embed_text: EmbedText,
    jobs: usize,
) -> Result<ApiIndex> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot index an empty corpus".into()));
    }
    let embed_one = |r: &crate::corpus::ApiRecord| {
        embedder
            .embed(&embed_text.render(r))
            .map(|vector| IndexEntry {
                api_id: r.id.clone(),
                vector,
            })
            .map_err(|e| Error::EmbedRecord {
                id: r.id.clone(),
                source: Box::new(e),
            })
    };
    let entries: Vec<IndexEntry> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| corpus.records().par_iter().map(embed_one).collect::<Result<_>>())?
    } else {
        corpus.records().iter().map(embed_one).collect::<Result<_>>()?
    };
    let dim = embedder.dim();
    if let Some(bad) = entries.iter().find(|e| e.vector.dim() != dim) {
        return Err(Error::IndexMismatch(format!(
            "{} embedded to dim {} but provider reports {dim}",
            bad.api_id,
            bad.vector.dim()
        )));
    }
    Ok(ApiIndex {
        format_version: INDEX_FORMAT_VERSION,
        provider_id: embedder.provider_id().to_string(),
        dim,
        embed_text,
        entries,
    })
}

impl ApiIndex {
    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_text(&self) -> EmbedText {
        self.embed_text
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.api_id.as_str())
    }

    pub fn vector(&self, api_id: &str) -> Option<&EmbeddingVector> {
        self.entries.iter().find(|e| e.api_id == api_id).map(|e| &e.vector)
    }

    /// The `k` entries most similar to `query`, best first; equal scores are
    /// ordered by ascending api id.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredApi>> {
        self.top_k_where(query, k, |_| true)
    }

    /// [`ApiIndex::top_k`] restricted to entries accepted by `keep`.
    pub fn top_k_where(
        &self,
        query: &EmbeddingVector,
        k: usize,
        keep: impl Fn(&str) -> bool,
    ) -> Result<Vec<ScoredApi>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.entries.is_empty() {
            return Ok(Vec::new());
        }
        if query.dim() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "query dim {} does not match index dim {}",
                query.dim(),
                self.dim
            )));
        }
        let mut scored = Vec::with_capacity(self.entries.len());
        for e in self.entries.iter().filter(|e| keep(&e.api_id)) {
            scored.push(ScoredApi::new(e.api_id.clone(), cosine(query, &e.vector)?));
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(scored)
    }

    /// Checks that the index covers exactly the corpus, in corpus order.
    pub fn validate_against(&self, corpus: &Corpus) -> Result<()> {
        if self.entries.len() != corpus.len() {
            return Err(Error::IndexMismatch(format!(
                "index has {} entries, corpus has {} records",
                self.entries.len(),
                corpus.len()
            )));
        }
        for (e, r) in self.entries.iter().zip(corpus.records()) {
            if e.api_id != r.id {
                return Err(Error::IndexMismatch(format!(
                    "index entry {} where corpus has {}",
                    e.api_id, r.id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let index: ApiIndex = jsonl::read_json(path)?;
        if index.format_version != INDEX_FORMAT_VERSION {
            return Err(Error::IndexMismatch(format!(
                "unsupported index format version {}",
                index.format_version
            )));
        }
        if let Some(bad) = index.entries.iter().find(|e| e.vector.dim() != index.dim) {
            return Err(Error::IndexMismatch(format!(
                "entry {} has dim {}, index declares {}",
                bad.api_id,
                bad.vector.dim(),
                index.dim
            )));
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::corpus::ApiRecord;
    use crate::embedding::HashingEmbedder;

    fn corpus_of(descs: &[(&str, &str)]) -> Corpus {
        Corpus::new(
            vec![],
            descs
                .iter()
                .map(|(id, d)| ApiRecord {
                    id: id.to_string(),
                    library: "lib".into(),
                    name: id.to_string(),
                    description: d.to_string(),
                    signature: None,
                    source_url: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn raw_index(vectors: Vec<(String, Vec<f32>)>) -> ApiIndex {
        let dim = vectors.first().map_or(0, |v| v.1.len());
        ApiIndex {
            format_version: INDEX_FORMAT_VERSION,
            provider_id: "test".into(),
            dim,
            embed_text: EmbedText::Description,
            entries: vectors
                .into_iter()
                .map(|(api_id, v)| IndexEntry {
                    api_id,
                    vector: EmbeddingVector::new(v),
                })
                .collect(),
        }
    }

    #[test]
    fn single_record_index() {
        let c = corpus_of(&[("a", "opens files")]);
        let idx = build_index(&c, &HashingEmbedder::new(), EmbedText::Description, 1).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.dim(), 256);
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = Corpus::default();
        assert!(build_index(&c, &HashingEmbedder::new(), EmbedText::Description, 1).is_err());
    }

    #[test]
    fn order_preserved_and_rebuild_identical() {
        let c = corpus_of(&[("z", "zip files"), ("a", "open files"), ("m", "map items")]);
        let e = HashingEmbedder::new();
        let one = build_index(&c, &e, EmbedText::NameAndDescription, 1).unwrap();
        let par = build_index(&c, &e, EmbedText::NameAndDescription, 4).unwrap();
        assert_eq!(one.ids().collect::<Vec<_>>(), ["z", "a", "m"]);
        assert_eq!(serde_json::to_vec(&one).unwrap(), serde_json::to_vec(&par).unwrap());
        one.validate_against(&c).unwrap();
    }

    #[test]
    fn saturates_when_k_exceeds_size() {
        let idx = raw_index(vec![
            ("b".into(), vec![1.0, 0.0]),
            ("a".into(), vec![0.0, 1.0]),
            ("c".into(), vec![1.0, 1.0]),
        ]);
        let got = idx.top_k(&EmbeddingVector::new(vec![1.0, 0.0]), 10).unwrap();
        let ids: Vec<_> = got.iter().map(|s| s.api_id.as_str()).collect();
        assert_eq!(ids, ["b", "c", "a"]);
    }

    #[test]
    fn ties_broken_by_ascending_id() {
        let idx = raw_index(vec![
            ("zeta".into(), vec![1.0, 0.0]),
            ("alpha".into(), vec![2.0, 0.0]),
        ]);
        let got = idx.top_k(&EmbeddingVector::new(vec![1.0, 0.0]), 2).unwrap();
        assert_eq!(got[0].api_id, "alpha");
        assert_eq!(got[1].api_id, "zeta");
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = raw_index(vec![]);
        assert!(idx.top_k(&EmbeddingVector::new(vec![1.0]), 3).unwrap().is_empty());
    }

    #[test]
    fn rejects_k_zero_and_dim_mismatch() {
        let idx = raw_index(vec![("a".into(), vec![1.0, 0.0])]);
        assert!(idx.top_k(&EmbeddingVector::new(vec![1.0, 0.0]), 0).is_err());
        assert!(idx.top_k(&EmbeddingVector::new(vec![1.0]), 1).is_err());
    }

    // Independent oracle: score every entry, full sort, take k.
    fn oracle(entries: &[(String, Vec<f32>)], q: &[f32], k: usize) -> Vec<String> {
        let qn: f64 = q.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        let mut all: Vec<(f64, String)> = entries
            .iter()
            .map(|(id, v)| {
                let d: f64 = v.iter().zip(q).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                let vn: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
                ((d / (qn * vn)).clamp(-1.0, 1.0), id.clone())
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, id)| id).collect()
    }

    #[test]
    fn random_index_matches_linear_scan() {
        let mut rng = StdRng::seed_from_u64(7);
        let entries: Vec<(String, Vec<f32>)> = (0..50)
            .map(|i| (format!("api{i:02}"), (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let idx = raw_index(entries.clone());
        let got: Vec<_> = idx
            .top_k(&EmbeddingVector::new(q.clone()), 5)
            .unwrap()
            .into_iter()
            .map(|s| s.api_id)
            .collect();
        assert_eq!(got, oracle(&entries, &q, 5));
    }

    #[test]
    fn prefix_and_monotone() {
        let mut rng = StdRng::seed_from_u64(11);
        // few distinct vectors so ties are common
        let protos: Vec<Vec<f32>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let entries: Vec<(String, Vec<f32>)> = (0..30)
            .map(|i| (format!("id{}", (i * 7) % 30), protos[i % 4].clone()))
            .collect();
        let idx = raw_index(entries);
        let q = EmbeddingVector::new(protos[0].clone());
        for k in 1..30 {
            let a = idx.top_k(&q, k).unwrap();
            let b = idx.top_k(&q, k + 1).unwrap();
            assert_eq!(&b[..k], &a[..]);
            assert!(b.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let c = corpus_of(&[("a", "open files"), ("b", "parse csv")]);
        let idx = build_index(&c, &HashingEmbedder::new(), EmbedText::Description, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.json");
        idx.save(&p).unwrap();
        assert_eq!(ApiIndex::load(&p).unwrap(), idx);
    }
}
