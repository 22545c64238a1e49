//! Blocking client for OpenAI-compatible `/embeddings` and
//! `/chat/completions` endpoints.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "CONFORMAL_CLAIMS_API_KEY";
pub const API_BASE_ENV: &str = "CONFORMAL_CLAIMS_API_BASE";

/// Connection settings shared by every external backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full endpoint URL. When absent, built from `$CONFORMAL_CLAIMS_API_BASE`
    /// plus the backend's default path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_credential_env")]
    pub credential_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_credential_env() -> String {
    API_KEY_ENV.to_string()
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_in_flight() -> usize {
    8
}

impl HttpConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            endpoint: None,
            model: model.into(),
            credential_env: default_credential_env(),
            timeout_secs: default_timeout_secs(),
            max_in_flight: default_max_in_flight(),
        }
    }

    pub fn with_endpoint(mut self, endpoint: impl Into<String>) -> Self {
        self.endpoint = Some(endpoint.into());
        self
    }

    fn resolve_endpoint(&self, default_path: &str) -> Result<String> {
        if let Some(e) = &self.endpoint {
            return Ok(e.clone());
        }
        let base = std::env::var(API_BASE_ENV).map_err(|_| {
            Error::Config(format!(
                "no endpoint configured and ${API_BASE_ENV} is not set"
            ))
        })?;
        Ok(format!("{}/{}", base.trim_end_matches('/'), default_path))
    }
}

struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl HttpClient {
    pub fn embeddings(cfg: &HttpConfig) -> Result<Self> {
        Self::build(cfg, "embeddings")
    }

    pub fn chat_completions(cfg: &HttpConfig) -> Result<Self> {
        Self::build(cfg, "chat/completions")
    }

    fn build(cfg: &HttpConfig, default_path: &str) -> Result<Self> {
        let endpoint = cfg.resolve_endpoint(default_path)?;
        let api_key = std::env::var(&cfg.credential_env).ok().filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            endpoint,
            model: cfg.model.clone(),
            api_key,
            agent,
            in_flight: InFlight::new(cfg.max_in_flight),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn post(&self, body: &serde_json::Value) -> Result<String> {
        let _permit = self.in_flight.acquire();
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(serde_json::to_vec(body)?.as_slice())
            .map_err(|e| Error::Backend(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Backend(format!("{}: {e}", self.endpoint)))?;
        if !status.is_success() {
            return Err(Error::Backend(format!(
                "{} returned HTTP {}: {}",
                self.endpoint,
                status.as_u16(),
                text.chars().take(200).collect::<String>()
            )));
        }
        Ok(text)
    }

    /// Embeds `inputs` in one request; results are reordered by `index`.
    pub fn embed(&self, inputs: &[&str]) -> Result<Vec<Vec<f64>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({ "model": self.model, "input": inputs });
        let text = self.post(&body)?;
        let resp: EmbeddingResponse = serde_json::from_str(&text)
            .map_err(|e| Error::BackendResponse(format!("embedding response: {e}")))?;
        let mut out: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
        for datum in resp.data {
            let slot = out.get_mut(datum.index).ok_or_else(|| {
                Error::BackendResponse(format!("embedding index {} out of range", datum.index))
            })?;
            *slot = Some(datum.embedding);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| Error::BackendResponse(format!("no embedding returned for input {i}")))
            })
            .collect()
    }

    /// One system + user exchange at temperature 0; returns the assistant text.
    pub fn chat(&self, system: &str, user: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
        });
        let text = self.post(&body)?;
        let resp: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Error::BackendResponse(format!("chat response: {e}")))?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::BackendResponse("chat response has no assistant content".into()))
    }
}
