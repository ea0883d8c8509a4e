//! Chat-completion client for the instruction parser.
//!
//! Speaks the common `POST {model, messages, temperature}` to
//! `{choices: [{message: {content}}]}` shape. Anything that is not a
//! well-formed reply in time is reported as a backend error, which sends the
//! parser to its rule-based fallback.

use std::time::Duration;

use charedit_core::ipm::{BackendError, LlmBackend, LlmRequest};
use serde_json::{json, Value};

use crate::config::LlmConfig;

pub struct HttpLlmBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpLlmBackend {
    /// `None` when no endpoint is configured.
    pub fn from_config(cfg: &LlmConfig) -> Result<Option<Self>, BackendError> {
        let Some(endpoint) = cfg.endpoint.clone() else {
            return Ok(None);
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        Ok(Some(HttpLlmBackend { client, endpoint, model: cfg.model.clone(), api_key: cfg.api_key.clone() }))
    }
}

pub fn request_body(model: &str, request: &LlmRequest) -> Value {
    json!({
        "model": model,
        "temperature": 0,
        "messages": request.messages,
        "metadata": { "prompt_pack_version": request.pack_version },
    })
}

/// Pulls the assistant text out of a chat-completion response.
pub fn response_text(body: &Value) -> Result<String, BackendError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(String::from)
        .ok_or_else(|| BackendError::Protocol("response has no choices[0].message.content".into()))
}

impl LlmBackend for HttpLlmBackend {
    fn complete(&self, request: &LlmRequest) -> Result<String, BackendError> {
        let mut req = self.client.post(&self.endpoint).json(&request_body(&self.model, request));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::Unreachable(format!("HTTP {status}")));
        }
        let body: Value = resp.json().map_err(|e| BackendError::Protocol(e.to_string()))?;
        response_text(&body)
    }
}
