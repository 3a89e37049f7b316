//! The `Encoder(·)` used throughout the pipeline: a gateway that validates
//! input, consults the cache, delegates to a backend and L2-normalizes
//! everything it returns.

mod cache;
mod reference;
mod remote;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::EmbeddingCache;
pub use reference::{ReferenceEncoder, MIN_REFERENCE_DIM};
pub use remote::RemoteEncoder;

use crate::embedding::{check_dims, Embedding};
use crate::error::{Error, Result};
use crate::transport::{HttpTransport, RetryPolicy, Transport};

pub const EMBED_TOKEN_ENV: &str = "STAR_EMBED_TOKEN";

/// A source of raw (not necessarily normalized) embeddings.
pub trait EncoderBackend: Send + Sync {
    /// Stable identifier used in cache keys and config fingerprints.
    fn id(&self) -> String;
    /// Output dimension, if known before the first call.
    fn dim(&self) -> Option<usize>;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderBackendKind {
    #[default]
    Reference,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: EncoderBackendKind,
    /// Output dimension of the reference backend; for the remote backend an
    /// optional expected dimension.
    pub dim: Option<usize>,
    pub hash_seed: u64,
    pub endpoint: Option<String>,
    #[serde(skip_serializing)]
    pub token: Option<String>,
    pub batch_size: usize,
    pub timeout_secs: f64,
    pub attempts: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    pub cache_path: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: EncoderBackendKind::Reference,
            dim: None,
            hash_seed: 0,
            endpoint: None,
            token: None,
            batch_size: 32,
            timeout_secs: 30.0,
            attempts: 3,
            backoff_base_ms: 250,
            max_in_flight: 4,
            cache_path: None,
        }
    }
}

pub const DEFAULT_REFERENCE_DIM: usize = 512;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("encoder batch_size must be >= 1".into()));
        }
        match self.backend {
            EncoderBackendKind::Reference => {
                let dim = self.dim.unwrap_or(DEFAULT_REFERENCE_DIM);
                if dim < MIN_REFERENCE_DIM {
                    return Err(Error::Config(format!(
                        "reference encoder dim must be >= {MIN_REFERENCE_DIM}"
                    )));
                }
            }
            EncoderBackendKind::Remote => {
                if self.endpoint.is_none() {
                    return Err(Error::Config("remote encoder requires an endpoint".into()));
                }
            }
        }
        Ok(())
    }

    /// Builds the configured backend, using `transport` for the remote one.
    pub fn build_backend(&self, transport: Arc<dyn Transport>) -> Result<Arc<dyn EncoderBackend>> {
        self.validate()?;
        Ok(match self.backend {
            EncoderBackendKind::Reference => Arc::new(ReferenceEncoder::new(
                self.dim.unwrap_or(DEFAULT_REFERENCE_DIM),
                self.hash_seed,
            )?),
            EncoderBackendKind::Remote => {
                let token = self
                    .token
                    .clone()
                    .or_else(|| std::env::var(EMBED_TOKEN_ENV).ok());
                Arc::new(
                    RemoteEncoder::new(self.endpoint.clone().unwrap_or_default(), transport)
                        .with_token(token)
                        .with_batch_size(self.batch_size)?
                        .with_timeout(Duration::from_secs_f64(self.timeout_secs))
                        .with_retry(RetryPolicy {
                            attempts: self.attempts,
                            base_delay: Duration::from_millis(self.backoff_base_ms),
                            factor: 2,
                        })
                        .with_max_in_flight(self.max_in_flight)
                        .with_expected_dim(self.dim),
                )
            }
        })
    }

    /// Gateway over the configured backend with an in-memory cache, mirrored
    /// to `cache_path` when set.
    pub fn build_gateway_with(&self, transport: Arc<dyn Transport>) -> Result<Gateway> {
        let gateway = Gateway::new(self.build_backend(transport)?);
        match &self.cache_path {
            Some(path) => Ok(gateway.with_cache(EmbeddingCache::open(path)?)),
            None => Ok(gateway.with_cache(EmbeddingCache::in_memory())),
        }
    }

    pub fn build_gateway(&self) -> Result<Gateway> {
        self.build_gateway_with(Arc::new(HttpTransport))
    }
}

/// Normalizing, caching front end over an [`EncoderBackend`]. Safe to
/// share across threads.
pub struct Gateway {
    backend: Arc<dyn EncoderBackend>,
    cache: Option<EmbeddingCache>,
    backend_texts: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn EncoderBackend>) -> Self {
        Self {
            backend,
            cache: None,
            backend_texts: AtomicUsize::new(0),
        }
    }

    pub fn reference(dim: usize, seed: u64) -> Result<Self> {
        Ok(Self::new(Arc::new(ReferenceEncoder::new(dim, seed)?)))
    }

    pub fn with_cache(mut self, cache: EmbeddingCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn dim(&self) -> Option<usize> {
        self.backend.dim()
    }

    /// Number of texts that reached the backend (cache misses).
    pub fn backend_texts(&self) -> usize {
        self.backend_texts.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> Option<&EmbeddingCache> {
        self.cache.as_ref()
    }

    pub fn encode(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut out = self.encode_batch(&[text]).map_err(|e| match e {
            Error::Batch { source, .. } => *source,
            other => other,
        })?;
        Ok(out.pop().expect("one embedding per text"))
    }

    /// Order-preserving batch encode. Errors name the failing element.
    pub fn encode_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Embedding>> {
        for (index, t) in texts.iter().enumerate() {
            if t.as_ref().trim().is_empty() {
                return Err(Error::Batch {
                    index,
                    source: Box::new(Error::EmptyInput),
                });
            }
        }
        let backend_id = self.backend.id();
        let key_for = |text: &str, dim: usize| EmbeddingCache::key(&backend_id, dim, text);

        let mut out: Vec<Option<Embedding>> = vec![None; texts.len()];
        if let (Some(cache), Some(dim)) = (&self.cache, self.backend.dim()) {
            for (slot, t) in out.iter_mut().zip(texts) {
                *slot = cache.get(&key_for(t.as_ref(), dim));
            }
        }

        // Unique misses, first occurrence order.
        let mut miss_index: HashMap<&str, usize> = HashMap::new();
        let mut misses: Vec<&str> = Vec::new();
        for (slot, t) in out.iter().zip(texts) {
            if slot.is_none() {
                miss_index.entry(t.as_ref()).or_insert_with(|| {
                    misses.push(t.as_ref());
                    misses.len() - 1
                });
            }
        }
        if misses.is_empty() {
            return Ok(out.into_iter().map(|e| e.expect("all hits")).collect());
        }

        let raw = self.backend.embed_batch(&misses)?;
        self.backend_texts
            .fetch_add(misses.len(), Ordering::Relaxed);
        if raw.len() != misses.len() {
            return Err(Error::Remote {
                status: 200,
                body: format!(
                    "backend returned {} vectors for {} texts",
                    raw.len(),
                    misses.len()
                ),
            });
        }
        let dim = self.backend.dim().unwrap_or_else(|| raw[0].len());
        let mut fresh = Vec::with_capacity(raw.len());
        for (i, v) in raw.into_iter().enumerate() {
            check_dims(dim, v.len())?;
            let e = Embedding::normalize(v).map_err(|e| Error::Batch {
                index: i,
                source: Box::new(e),
            })?;
            if let Some(cache) = &self.cache {
                cache.insert(key_for(misses[i], dim), e.clone())?;
            }
            fresh.push(e);
        }
        Ok(out
            .into_iter()
            .zip(texts)
            .map(|(hit, t)| hit.unwrap_or_else(|| fresh[miss_index[t.as_ref()]].clone()))
            .collect())
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("cached", &self.cache.as_ref().map(EmbeddingCache::len))
            .finish()
    }
}
