//! In-process stand-in for the embedding and generation services. It speaks
//! the same wire protocols as the real endpoints, checks every request's
//! shape, and answers with the offline backends' results so a remote
//! configuration can be exercised end to end without a network.

use std::sync::Mutex;

use serde_json::{json, Map, Value};

use crate::encoder::{EncoderBackend, ReferenceEncoder};
use crate::error::{Error, Result};
use crate::querygen::{parse_prompt, template_query};
use crate::table::{parse_partial_table, Table};
use crate::transport::{HttpRequest, HttpResponse, Transport};

#[derive(Debug)]
pub struct DryRunTransport {
    encoder: ReferenceEncoder,
    expected_bearer: Option<String>,
    requests: Mutex<Vec<HttpRequest>>,
    violations: Mutex<Vec<String>>,
}

impl DryRunTransport {
    /// Embeds with the reference encoder of the given `dim` and `seed`.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder: ReferenceEncoder::new(dim, seed)?,
            expected_bearer: None,
            requests: Mutex::new(Vec::new()),
            violations: Mutex::new(Vec::new()),
        })
    }

    /// Rejects requests that do not carry this bearer token.
    pub fn expect_bearer(mut self, token: impl Into<String>) -> Self {
        self.expected_bearer = Some(token.into());
        self
    }

    pub fn requests(&self) -> Vec<HttpRequest> {
        self.requests.lock().expect("request log").clone()
    }

    /// Protocol violations seen so far, one message each.
    pub fn violations(&self) -> Vec<String> {
        self.violations.lock().expect("violation log").clone()
    }

    fn reject(&self, status: u16, message: String) -> HttpResponse {
        self.violations
            .lock()
            .expect("violation log")
            .push(message.clone());
        HttpResponse {
            status,
            body: json!({ "error": message }).to_string(),
        }
    }

    fn embed(&self, body: &Map<String, Value>) -> std::result::Result<Value, String> {
        only_keys(body, &["texts"])?;
        let texts = body
            .get("texts")
            .and_then(Value::as_array)
            .ok_or("`texts` must be an array")?;
        if texts.is_empty() {
            return Err("`texts` is empty".into());
        }
        let mut embeddings = Vec::with_capacity(texts.len());
        for t in texts {
            let t = t.as_str().ok_or("`texts` must hold strings")?;
            let v = self.encoder.raw_features(t).map_err(|e| e.to_string())?;
            embeddings.push(v);
        }
        Ok(json!({ "embeddings": embeddings, "dim": self.encoder_dim() }))
    }

    fn encoder_dim(&self) -> usize {
        self.encoder
            .dim()
            .expect("reference encoder has a fixed dim")
    }

    fn answer(prompt: &str) -> std::result::Result<String, String> {
        let (table_text, lang) =
            parse_prompt(prompt).ok_or("prompt does not follow the template")?;
        if lang.is_empty() {
            return Err("empty language code".into());
        }
        let (header, rows) = parse_partial_table(table_text).map_err(|e| e.to_string())?;
        let table = Table::new("prompt", header, rows).map_err(|e| e.to_string())?;
        let query = template_query(&table).map_err(|e| e.to_string())?;
        // Models tend to wrap the object in prose; the client must cope.
        Ok(format!(
            "Sure, here is one query.\n{}\nLet me know if you need another.",
            json!({ "query": query })
        ))
    }

    fn generate(&self, body: &Map<String, Value>) -> std::result::Result<Value, String> {
        only_keys(body, &["prompt", "temperature"])?;
        let prompt = body
            .get("prompt")
            .and_then(Value::as_str)
            .ok_or("`prompt` must be a string")?;
        number(body, "temperature")?;
        Ok(json!({ "text": Self::answer(prompt)? }))
    }

    fn chat(&self, body: &Map<String, Value>) -> std::result::Result<Value, String> {
        only_keys(body, &["model", "messages", "temperature"])?;
        body.get("model")
            .and_then(Value::as_str)
            .filter(|m| !m.is_empty())
            .ok_or("`model` must be a non-empty string")?;
        number(body, "temperature")?;
        let messages = body
            .get("messages")
            .and_then(Value::as_array)
            .ok_or("`messages` must be an array")?;
        let [message] = messages.as_slice() else {
            return Err(format!("expected one message, got {}", messages.len()));
        };
        if message.get("role").and_then(Value::as_str) != Some("user") {
            return Err("message role must be `user`".into());
        }
        let content = message
            .get("content")
            .and_then(Value::as_str)
            .ok_or("message content must be a string")?;
        Ok(json!({
            "choices": [{
                "index": 0,
                "message": { "role": "assistant", "content": Self::answer(content)? },
            }]
        }))
    }
}

fn only_keys(body: &Map<String, Value>, allowed: &[&str]) -> std::result::Result<(), String> {
    for key in body.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(format!("unexpected field `{key}`"));
        }
    }
    for key in allowed {
        if !body.contains_key(*key) {
            return Err(format!("missing field `{key}`"));
        }
    }
    Ok(())
}

fn number(body: &Map<String, Value>, key: &str) -> std::result::Result<f64, String> {
    body.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| format!("`{key}` must be a number"))
}

impl Transport for DryRunTransport {
    fn post_json(&self, request: &HttpRequest) -> Result<HttpResponse> {
        self.requests
            .lock()
            .expect("request log")
            .push(request.clone());
        if let Some(expected) = &self.expected_bearer {
            if request.bearer.as_ref() != Some(expected) {
                return Ok(self.reject(
                    401,
                    format!("{}: missing or wrong bearer token", request.url),
                ));
            }
        }
        let Some(body) = request.body.as_object() else {
            return Ok(self.reject(400, format!("{}: body is not a JSON object", request.url)));
        };
        let path = request
            .url
            .split_once("://")
            .map(|(_, rest)| rest.find('/').map_or("", |i| &rest[i..]))
            .unwrap_or(&request.url);
        let outcome = if path.ends_with("/embed") {
            self.embed(body)
        } else if path.ends_with("/generate") {
            self.generate(body)
        } else if path.ends_with("/chat/completions") {
            self.chat(body)
        } else {
            return Ok(self.reject(404, format!("{}: unknown route", request.url)));
        };
        Ok(match outcome {
            Ok(v) => HttpResponse {
                status: 200,
                body: v.to_string(),
            },
            Err(msg) => self.reject(400, format!("{}: {msg}", request.url)),
        })
    }
}

/// Turns a dry-run violation log into an error.
pub fn ensure_clean(transport: &DryRunTransport) -> Result<()> {
    let v = transport.violations();
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Remote {
            status: 400,
            body: v.join("; "),
        })
    }
}
