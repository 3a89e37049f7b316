//! Cluster-guided synthetic query generation.
//!
//! Each cluster sub-table is rendered into the generation prompt and sent to
//! an LLM endpoint; the first JSON object carrying a non-empty `"query"`
//! string in the reply becomes the cluster's synthetic query. When the
//! remote side fails, a deterministic template generator stands in.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::clustering::{cluster_subtables, ClusterAssignment};
use crate::error::{Error, Result};
use crate::table::{serialize_partial_table, Row, Table};
use crate::transport::{HttpRequest, HttpTransport, InFlightLimit, RetryPolicy, Transport};

pub const LLM_TOKEN_ENV: &str = "STAR_LLM_TOKEN";

/// Generation prompt with `{clustered_table}` and `{lang}` slots.
pub const PROMPT_TEMPLATE: &str = include_str!("prompt.txt");
const TABLE_SLOT: &str = "{clustered_table}";
const LANG_SLOT: &str = "{lang}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryBackend {
    Remote,
    Template,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub text: String,
    pub cluster_index: usize,
    pub table_id: String,
    pub backend: QueryBackend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GenBackendKind {
    Remote,
    #[default]
    Template,
}

/// Wire protocol spoken by the remote generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RemoteApi {
    /// `POST {endpoint}/generate` with `{"prompt", "temperature"}` → `{"text"}`.
    #[default]
    Native,
    /// `POST {endpoint}/chat/completions`, OpenAI style.
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub backend: GenBackendKind,
    pub api: RemoteApi,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: f64,
    pub timeout_secs: f64,
    /// Extra attempts after the first failed one.
    pub retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    /// Cap on sub-table rows placed in a prompt; `None` sends every row.
    pub max_prompt_rows: Option<usize>,
    /// Overrides each table's own language code.
    pub lang: Option<String>,
    /// Fall back to the template generator when the remote side fails.
    pub fallback: bool,
    #[serde(skip_serializing)]
    pub token: Option<String>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            backend: GenBackendKind::Template,
            api: RemoteApi::Native,
            endpoint: None,
            model: None,
            temperature: 0.0,
            timeout_secs: 60.0,
            retries: 2,
            backoff_base_ms: 250,
            max_in_flight: 4,
            max_prompt_rows: None,
            lang: None,
            fallback: true,
            token: None,
        }
    }
}

/// Fills the prompt template. Fails on a sub-table without rows.
pub fn build_prompt(subtable: &Table, lang: &str) -> Result<String> {
    let rows: Vec<&Row> = subtable.rows().iter().collect();
    let table_text = serialize_partial_table(subtable.header(), &rows)?;
    Ok(fill_template(&table_text, lang))
}

fn fill_template(table_text: &str, lang: &str) -> String {
    let t = PROMPT_TEMPLATE
        .find(TABLE_SLOT)
        .expect("template has a table slot");
    let l = PROMPT_TEMPLATE
        .find(LANG_SLOT)
        .expect("template has a lang slot");
    debug_assert!(t < l);
    let mut out = String::with_capacity(PROMPT_TEMPLATE.len() + table_text.len());
    out.push_str(&PROMPT_TEMPLATE[..t]);
    out.push_str(table_text);
    out.push_str(&PROMPT_TEMPLATE[t + TABLE_SLOT.len()..l]);
    out.push_str(lang);
    out.push_str(&PROMPT_TEMPLATE[l + LANG_SLOT.len()..]);
    out
}

/// Table text and language code recovered from a prompt built by
/// [`build_prompt`], or `None` if `prompt` does not follow the template.
pub fn parse_prompt(prompt: &str) -> Option<(&str, &str)> {
    let t = PROMPT_TEMPLATE.find(TABLE_SLOT)?;
    let l = PROMPT_TEMPLATE.find(LANG_SLOT)?;
    let middle = &PROMPT_TEMPLATE[t + TABLE_SLOT.len()..l];
    let suffix = &PROMPT_TEMPLATE[l + LANG_SLOT.len()..];
    let rest = prompt.strip_prefix(&PROMPT_TEMPLATE[..t])?;
    let m = rest.find(middle)?;
    let table = &rest[..m];
    let lang = rest[m + middle.len()..].strip_suffix(suffix)?;
    Some((table, lang))
}

/// First JSON object in `response` with a non-empty string `"query"`,
/// wherever it sits in surrounding prose.
pub fn extract_query(response: &str) -> Option<String> {
    for (i, _) in response.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&response[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(obj))) = stream.next() {
            if let Some(Value::String(q)) = obj.get("query") {
                let q = q.trim();
                if !q.is_empty() {
                    return Some(q.to_string());
                }
            }
        }
    }
    None
}

/// `"Which {header[0]} has {header[c]} equal to {v}?"` where `c` is the
/// column with the most distinct values (ties: lowest index) and `v` is that
/// column's most frequent value (ties: lexicographically smallest).
pub fn template_query(subtable: &Table) -> Result<String> {
    if subtable.num_rows() == 0 {
        return Err(Error::Empty("sub-table has no rows"));
    }
    let header = subtable.header();
    let mut best_col = 0;
    let mut best_counts: Option<BTreeMap<&str, usize>> = None;
    for c in 0..header.len() {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for row in subtable.rows() {
            *counts.entry(row.cells[c].as_str()).or_default() += 1;
        }
        if best_counts.as_ref().is_none_or(|b| counts.len() > b.len()) {
            best_col = c;
            best_counts = Some(counts);
        }
    }
    let counts = best_counts.expect("header is nonempty");
    // BTreeMap iterates values in lexicographic order; keep the first maximum.
    let mut value = "";
    let mut freq = 0;
    for (v, &n) in &counts {
        if n > freq {
            value = v;
            freq = n;
        }
    }
    Ok(format!(
        "Which {} has {} equal to {}?",
        header[0], header[best_col], value
    ))
}

/// Produces one synthetic query per cluster sub-table.
pub struct QueryGenerator {
    config: GenConfig,
    transport: Arc<dyn Transport>,
    limit: InFlightLimit,
    token: Option<String>,
}

impl std::fmt::Debug for QueryGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QueryGenerator")
            .field("config", &self.config)
            .finish()
    }
}

impl QueryGenerator {
    pub fn template() -> Self {
        Self::with_transport(GenConfig::default(), Arc::new(HttpTransport))
            .expect("template config is valid")
    }

    pub fn new(config: GenConfig) -> Result<Self> {
        Self::with_transport(config, Arc::new(HttpTransport))
    }

    pub fn with_transport(config: GenConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        if config.backend == GenBackendKind::Remote && config.endpoint.is_none() {
            return Err(Error::Config(
                "remote generator requires an endpoint".into(),
            ));
        }
        if config.api == RemoteApi::Openai
            && config.backend == GenBackendKind::Remote
            && config.model.is_none()
        {
            return Err(Error::Config(
                "openai-style generation requires a model name".into(),
            ));
        }
        let token = config
            .token
            .clone()
            .or_else(|| std::env::var(LLM_TOKEN_ENV).ok());
        Ok(Self {
            limit: InFlightLimit::new(config.max_in_flight),
            config,
            transport,
            token,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    /// Identifier folded into representation fingerprints.
    pub fn backend_id(&self) -> String {
        match self.config.backend {
            GenBackendKind::Template => "template".to_string(),
            GenBackendKind::Remote => format!(
                "remote:{:?}:{}:{}:t={}:rows={:?}:fallback={}",
                self.config.api,
                self.config.endpoint.as_deref().unwrap_or_default(),
                self.config.model.as_deref().unwrap_or_default(),
                self.config.temperature,
                self.config.max_prompt_rows,
                self.config.fallback,
            ),
        }
    }

    fn prompt_for(&self, subtable: &Table) -> Result<String> {
        let lang = self.config.lang.as_deref().unwrap_or(subtable.lang());
        match self.config.max_prompt_rows {
            Some(n) if n < subtable.num_rows() => {
                let rows: Vec<&Row> = subtable.rows().iter().take(n.max(1)).collect();
                let text = serialize_partial_table(subtable.header(), &rows)?;
                Ok(fill_template(&text, lang))
            }
            _ => build_prompt(subtable, lang),
        }
    }

    fn remote_request(&self, prompt: &str) -> HttpRequest {
        let endpoint = self
            .config
            .endpoint
            .as_deref()
            .unwrap_or_default()
            .trim_end_matches('/');
        let (url, body) = match self.config.api {
            RemoteApi::Native => (
                format!("{endpoint}/generate"),
                json!({ "prompt": prompt, "temperature": self.config.temperature }),
            ),
            RemoteApi::Openai => (
                format!("{endpoint}/chat/completions"),
                json!({
                    "model": self.config.model,
                    "messages": [{ "role": "user", "content": prompt }],
                    "temperature": self.config.temperature,
                }),
            ),
        };
        HttpRequest {
            url,
            body,
            bearer: self.token.clone(),
            timeout: Duration::from_secs_f64(self.config.timeout_secs),
        }
    }

    fn response_text(&self, body: &str) -> Option<String> {
        let v: Value = serde_json::from_str(body).ok()?;
        let text = match self.config.api {
            RemoteApi::Native => v.get("text")?,
            RemoteApi::Openai => v.pointer("/choices/0/message/content")?,
        };
        text.as_str().map(str::to_string)
    }

    fn generate_remote(&self, prompt: &str) -> Result<String> {
        let request = self.remote_request(prompt);
        let policy = RetryPolicy {
            attempts: self.config.retries + 1,
            base_delay: Duration::from_millis(self.config.backoff_base_ms),
            factor: 2,
        };
        policy.run(|_| {
            let _permit = self.limit.acquire();
            let resp = self.transport.post_json(&request)?;
            if resp.status != 200 {
                return Err(Error::Remote {
                    status: resp.status,
                    body: resp.body,
                });
            }
            self.response_text(&resp.body)
                .as_deref()
                .and_then(extract_query)
                .ok_or_else(|| Error::Remote {
                    status: resp.status,
                    body: format!(
                        "no JSON object with a non-empty \"query\" in: {}",
                        resp.body
                    ),
                })
        })
    }

    pub fn generate_query(
        &self,
        table_id: &str,
        cluster_index: usize,
        subtable: &Table,
    ) -> Result<SyntheticQuery> {
        if subtable.num_rows() == 0 {
            return Err(Error::Empty("sub-table has no rows"));
        }
        let make = |text, backend| SyntheticQuery {
            text,
            cluster_index,
            table_id: table_id.to_string(),
            backend,
        };
        if self.config.backend == GenBackendKind::Template {
            return Ok(make(template_query(subtable)?, QueryBackend::Template));
        }
        let prompt = self.prompt_for(subtable)?;
        match self.generate_remote(&prompt) {
            Ok(text) => Ok(make(text, QueryBackend::Remote)),
            Err(e) if self.config.fallback => {
                log::warn!("table {table_id} cluster {cluster_index}: {e}; using template query");
                Ok(make(template_query(subtable)?, QueryBackend::Template))
            }
            Err(e) => Err(e),
        }
    }

    /// Exactly one query per cluster, in cluster order. Clusters are
    /// generated concurrently; a failing cluster does not stop the others.
    pub fn generate_all(
        &self,
        table: &Table,
        assignment: &ClusterAssignment,
    ) -> Result<Vec<SyntheticQuery>> {
        let subtables = cluster_subtables(table, assignment)?;
        let results: Vec<Result<SyntheticQuery>> = subtables
            .par_iter()
            .enumerate()
            .map(|(j, sub)| self.generate_query(table.id(), j, sub))
            .collect();
        let failed: Vec<usize> = results
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_err())
            .map(|(j, _)| j)
            .collect();
        if !failed.is_empty() {
            for (j, r) in results.iter().enumerate() {
                if let Err(e) = r {
                    log::error!("table {} cluster {j}: {e}", table.id());
                }
            }
            return Err(Error::Generation {
                table_id: table.id().to_string(),
                clusters: failed,
            });
        }
        Ok(results.into_iter().map(|r| r.expect("checked")).collect())
    }
}
