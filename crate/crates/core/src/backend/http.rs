//! Chat-completions client for any OpenAI-compatible gateway.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, WireMessage, API_KEY_ENV};
use crate::error::BackendError;

#[derive(Debug, Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    messages: Vec<WireMessage>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    default_temperature: f64,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self, BackendError> {
        Self::with_timeout(endpoint, model, Duration::from_secs(120))
    }

    pub fn with_timeout(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let endpoint = endpoint.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            default_temperature: 0.7,
        })
    }

    pub fn with_default_temperature(mut self, t: f64) -> Self {
        self.default_temperature = t;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn classify(err: reqwest::Error) -> BackendError {
    if err.is_timeout() {
        BackendError::Timeout(err.to_string())
    } else if err.is_decode() {
        BackendError::MalformedResponse(err.to_string())
    } else {
        BackendError::Unavailable(err.to_string())
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let body = CompletionBody {
            model: &self.model,
            messages: request.wire_messages(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(classify)?;
        let status = response.status();
        if status.as_u16() == 429 {
            return Err(BackendError::RateLimited(response.text().unwrap_or_default()));
        }
        if status.as_u16() == 408 || status.as_u16() == 504 {
            return Err(BackendError::Timeout(format!("gateway status {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Http { status: status.as_u16(), body: response.text().unwrap_or_default() });
        }
        let text = response.text().map_err(classify)?;
        let parsed: CompletionResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(format!("{e}: {}", truncate(&text, 200))))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::MalformedResponse("response has no choice content".into()))?;
        if content.trim().is_empty() {
            return Err(BackendError::MalformedResponse("empty choice content".into()));
        }
        Ok(content)
    }

    fn default_temperature(&self) -> f64 {
        self.default_temperature
    }

    fn describe(&self) -> String {
        format!("http({} @ {})", self.model, self.url)
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
