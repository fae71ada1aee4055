use serde_json::json;

use super::{prepare_text, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::http::{HttpConfig, JsonClient};

#[derive(Debug, Clone)]
pub struct RemoteEmbedderConfig {
    pub http: HttpConfig,
    pub model: String,
    /// Output dimension of `model` (1536 for text-embedding-ada-002).
    pub dim: usize,
}

impl Default for RemoteEmbedderConfig {
    fn default() -> Self {
        Self {
            http: HttpConfig::default(),
            model: "text-embedding-ada-002".into(),
            dim: 1536,
        }
    }
}

/// Embedding provider speaking the OpenAI-compatible `POST /embeddings`
/// protocol: `{"model", "input"}` in, `{"data": [{"embedding": [...]}]}` out.
pub struct RemoteEmbedder {
    client: JsonClient,
    model: String,
    dim: usize,
    id: String,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Self {
        Self {
            id: format!("remote:{}", config.model),
            client: JsonClient::new(config.http),
            model: config.model,
            dim: config.dim,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let text = prepare_text(text)?;
        let resp = self
            .client
            .post("/embeddings", &json!({ "model": self.model, "input": text }))?;
        let values = resp
            .pointer("/data/0/embedding")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::provider("embedding response missing data[0].embedding", false))?
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| Error::provider("non-numeric embedding value", false))?;
        if values.len() != self.dim {
            return Err(Error::provider(
                format!("expected {}-dim embedding, got {}", self.dim, values.len()),
                false,
            ));
        }
        Ok(EmbeddingVector::new(values))
    }
}
