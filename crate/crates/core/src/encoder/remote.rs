use std::sync::{Arc, OnceLock};
use std::time::Duration;

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;

use super::EncoderBackend;
use crate::embedding::check_dims;
use crate::error::{Error, Result};
use crate::transport::{HttpRequest, InFlightLimit, RetryPolicy, Transport};

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
    dim: usize,
}

/// Client for `POST {endpoint}/embed`.
pub struct RemoteEncoder {
    endpoint: String,
    token: Option<String>,
    batch_size: usize,
    timeout: Duration,
    retry: RetryPolicy,
    limit: InFlightLimit,
    expected_dim: Option<usize>,
    observed_dim: OnceLock<usize>,
    transport: Arc<dyn Transport>,
}

impl RemoteEncoder {
    pub fn new(endpoint: impl Into<String>, transport: Arc<dyn Transport>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            token: None,
            batch_size: 32,
            timeout: Duration::from_secs(30),
            retry: RetryPolicy::default(),
            limit: InFlightLimit::new(4),
            expected_dim: None,
            observed_dim: OnceLock::new(),
            transport,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.batch_size = batch_size;
        Ok(self)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.limit = InFlightLimit::new(limit);
        self
    }

    pub fn with_expected_dim(mut self, dim: Option<usize>) -> Self {
        self.expected_dim = dim;
        self
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        let expected = match self.expected_dim {
            Some(d) => d,
            None => *self.observed_dim.get_or_init(|| got),
        };
        check_dims(expected, got)
    }

    fn embed_chunk(&self, chunk: &[&str]) -> Result<Vec<Vec<f64>>> {
        let request = HttpRequest {
            url: format!("{}/embed", self.endpoint),
            body: json!({ "texts": chunk }),
            bearer: self.token.clone(),
            timeout: self.timeout,
        };
        let response = self.retry.run(|_| {
            let _permit = self.limit.acquire();
            let resp = self.transport.post_json(&request)?;
            if resp.status != 200 {
                return Err(Error::Remote {
                    status: resp.status,
                    body: resp.body,
                });
            }
            serde_json::from_str::<EmbedResponse>(&resp.body).map_err(|e| Error::Remote {
                status: resp.status,
                body: format!("malformed embed response: {e}"),
            })
        })?;
        if response.embeddings.len() != chunk.len() {
            return Err(Error::Remote {
                status: 200,
                body: format!(
                    "expected {} embeddings, got {}",
                    chunk.len(),
                    response.embeddings.len()
                ),
            });
        }
        self.check_dim(response.dim)?;
        for v in &response.embeddings {
            check_dims(response.dim, v.len())?;
        }
        Ok(response.embeddings)
    }
}

impl EncoderBackend for RemoteEncoder {
    fn id(&self) -> String {
        match self.expected_dim {
            Some(d) => format!("remote:{}:d{d}", self.endpoint),
            None => format!("remote:{}", self.endpoint),
        }
    }

    fn dim(&self) -> Option<usize> {
        self.expected_dim
            .or_else(|| self.observed_dim.get().copied())
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<&[&str]> = texts.chunks(self.batch_size).collect();
        let parts = chunks
            .par_iter()
            .map(|c| self.embed_chunk(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }
}
