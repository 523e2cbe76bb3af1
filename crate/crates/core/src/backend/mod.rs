//! Chat-completion backends.
//!
//! Every model role (recommender, user simulator, summarizer) is reached
//! through a [`Client`], which wraps a [`ChatBackend`] with request
//! validation, retry and the shared [`CallLedger`].

mod http;
mod ledger;
mod probe;
mod scripted;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::HttpBackend;
pub use ledger::{CallLedger, LedgerSnapshot};
pub use probe::{ConcurrencyProbe, RecordingBackend};
pub use scripted::{Respond, ScriptRule, ScriptedBackend};

use crate::error::BackendError;
use crate::parallel::Executor;
use crate::types::{Role, Transcript};

/// Telemetry labels attached to requests.
pub mod tags {
    pub const RECOMMENDER: &str = "recommender";
    pub const USER: &str = "user";
    pub const VOTE: &str = "vote";
    pub const INTERNAL_USER: &str = "internal-user";
    pub const INTERNAL_VOTE: &str = "internal-vote";
    pub const SUMMARIZER: &str = "summarizer";
}

/// Environment variable holding the bearer token for HTTP backends.
pub const API_KEY_ENV: &str = "SIMREC_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Rendered prompt, system message first.
    pub messages: Transcript,
    /// Which dialogue role the model speaks as. Messages from that role map
    /// to `assistant` on the wire, the other dialogue role maps to `user`.
    pub assistant_role: Role,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub tag: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Content of the final message, i.e. what the model is replying to.
    pub fn last_content(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }

    pub fn wire_messages(&self) -> Vec<WireMessage> {
        self.messages
            .messages()
            .iter()
            .map(|m| WireMessage {
                role: match m.role {
                    Role::System => "system",
                    r if r == self.assistant_role => "assistant",
                    _ => "user",
                }
                .to_string(),
                content: m.content.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub content: String,
}

/// A chat-completion provider. Implementations must be safe to call from
/// many threads at once.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;

    /// Temperature used for turns that do not request a specific one.
    fn default_temperature(&self) -> f64;

    fn describe(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    HttpEndpoint,
    Scripted,
}

/// Serializable description of a backend binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRef {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub script_path: Option<PathBuf>,
    pub default_temperature: f64,
}

const DEFAULT_BACKEND_TEMPERATURE: f64 = 0.7;

impl BackendRef {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_name: None,
            script_path: Some(path.into()),
            default_temperature: DEFAULT_BACKEND_TEMPERATURE,
        }
    }

    pub fn http(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpEndpoint,
            endpoint: Some(endpoint.into()),
            model_name: Some(model.into()),
            script_path: None,
            default_temperature: DEFAULT_BACKEND_TEMPERATURE,
        }
    }

    /// Parses `scripted:<path>` or `http:<model>@<base-url>`, each optionally
    /// followed by `?temperature=<t>`.
    pub fn parse(reference: &str) -> Result<Self, BackendError> {
        let (body, temperature) = match reference.rsplit_once("?temperature=") {
            Some((body, t)) => {
                let t: f64 = t
                    .parse()
                    .map_err(|_| BackendError::InvalidRequest(format!("bad temperature in `{reference}`")))?;
                (body, Some(t))
            }
            None => (reference, None),
        };
        let mut r = if let Some(path) = body.strip_prefix("scripted:") {
            Self::scripted(path)
        } else if let Some(rest) = body.strip_prefix("http:") {
            let (model, url) = rest.split_once('@').ok_or_else(|| {
                BackendError::InvalidRequest(format!("expected http:<model>@<url>, got `{reference}`"))
            })?;
            Self::http(url, model)
        } else {
            return Err(BackendError::InvalidRequest(format!(
                "unknown backend reference `{reference}` (use scripted:<path> or http:<model>@<url>)"
            )));
        };
        if let Some(t) = temperature {
            r.default_temperature = t;
        }
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::HttpEndpoint if self.endpoint.is_none() || self.model_name.is_none() => Err(
                BackendError::InvalidRequest("http backend needs an endpoint and a model name".into()),
            ),
            BackendKind::Scripted if self.script_path.is_none() => {
                Err(BackendError::InvalidRequest("scripted backend needs a script path".into()))
            }
            _ if !(0.0..=2.0).contains(&self.default_temperature) => Err(BackendError::InvalidRequest(
                "default temperature outside [0, 2]".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn open(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Scripted => {
                let path = self.script_path.as_ref().expect("validated");
                Arc::new(ScriptedBackend::from_path(path)?.with_default_temperature(self.default_temperature))
            }
            BackendKind::HttpEndpoint => Arc::new(
                HttpBackend::new(
                    self.endpoint.clone().expect("validated"),
                    self.model_name.clone().expect("validated"),
                )?
                .with_default_temperature(self.default_temperature),
            ),
        })
    }
}

impl fmt::Display for BackendRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            BackendKind::Scripted => write!(
                f,
                "scripted:{}",
                self.script_path.as_deref().unwrap_or_else(|| "".as_ref()).display()
            ),
            BackendKind::HttpEndpoint => write!(
                f,
                "http:{}@{}",
                self.model_name.as_deref().unwrap_or(""),
                self.endpoint.as_deref().unwrap_or("")
            ),
        }
    }
}

/// Retry schedule for transient failures: delay `base * 2^i` before retry `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self { max_retries, base_delay: Duration::ZERO }
    }

    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << retry.min(16))
    }
}

/// A backend bound to a ledger and retry policy.
#[derive(Clone)]
pub struct Client {
    backend: Arc<dyn ChatBackend>,
    ledger: Arc<CallLedger>,
    scope: Option<Arc<CallLedger>>,
    retry: RetryPolicy,
}

impl fmt::Debug for Client {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Client")
            .field("backend", &self.backend.describe())
            .field("retry", &self.retry)
            .finish()
    }
}

impl Client {
    pub fn new(backend: Arc<dyn ChatBackend>, ledger: Arc<CallLedger>) -> Self {
        Self { backend, ledger, scope: None, retry: RetryPolicy::default() }
    }

    /// A copy that also records into `scope`, for per-invocation accounting
    /// while other work shares the main ledger.
    pub fn scoped(&self, scope: Arc<CallLedger>) -> Self {
        Self { scope: Some(scope), ..self.clone() }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn ledger(&self) -> &Arc<CallLedger> {
        &self.ledger
    }

    pub fn backend(&self) -> &Arc<dyn ChatBackend> {
        &self.backend
    }

    pub fn default_temperature(&self) -> f64 {
        self.backend.default_temperature()
    }

    /// Runs one completion. Timeouts and rate limits are retried per the
    /// policy; the ledger records the call once, whatever the outcome.
    pub fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        request.validate()?;
        let mut attempt = 0;
        let result = loop {
            match self.backend.complete(request) {
                Ok(text) if text.trim().is_empty() => {
                    break Err(BackendError::MalformedResponse("empty completion".into()))
                }
                Ok(text) => break Ok(text),
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    let delay = self.retry.delay(attempt);
                    tracing::warn!(tag = %request.tag, attempt, ?delay, error = %e, "retrying backend call");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
                Err(e) => break Err(e),
            }
        };
        self.ledger.record(&request.tag);
        if let Some(scope) = &self.scope {
            scope.record(&request.tag);
        }
        result
    }
}

/// Per-job outcomes of a bounded batch, aligned with the input order.
#[derive(Debug)]
pub struct BatchOutcome {
    pub results: Vec<Result<String, BackendError>>,
}

impl BatchOutcome {
    pub fn failed_indices(&self) -> Vec<usize> {
        self.results
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.is_err().then_some(i))
            .collect()
    }

    /// All texts, or an aggregate error naming every failed index.
    pub fn into_result(self) -> Result<Vec<String>, BatchError> {
        let failed = self.failed_indices();
        if failed.is_empty() {
            Ok(self.results.into_iter().map(|r| r.expect("checked")).collect())
        } else {
            let messages = failed
                .iter()
                .map(|&i| format!("{i}: {}", self.results[i].as_ref().unwrap_err()))
                .collect();
            Err(BatchError { failed, messages })
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{} of the batch failed: {}", failed.len(), messages.join("; "))]
pub struct BatchError {
    pub failed: Vec<usize>,
    pub messages: Vec<String>,
}

/// Runs `jobs` with at most `limit` requests in flight. A failing job does
/// not cancel its siblings.
pub fn with_concurrency(client: &Client, limit: usize, jobs: Vec<ChatRequest>) -> BatchOutcome {
    let exec = Executor::new(limit);
    BatchOutcome { results: exec.map(jobs, |req| client.complete(&req)) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Message;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn request(text: &str, tag: &str) -> ChatRequest {
        ChatRequest {
            messages: Transcript::from_messages(vec![Message::user(text).unwrap()]).unwrap(),
            assistant_role: Role::Recommender,
            temperature: 0.5,
            max_tokens: 16,
            seed: None,
            tag: tag.into(),
        }
    }

    struct Flaky {
        fail_first: usize,
        error: BackendError,
        calls: AtomicUsize,
    }

    impl ChatBackend for Flaky {
        fn complete(&self, _: &ChatRequest) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(self.error.clone())
            } else {
                Ok("ok".into())
            }
        }
        fn default_temperature(&self) -> f64 {
            0.0
        }
        fn describe(&self) -> String {
            "flaky".into()
        }
    }

    #[test]
    fn retries_transient_errors() {
        let flaky = Arc::new(Flaky {
            fail_first: 2,
            error: BackendError::Timeout("slow".into()),
            calls: AtomicUsize::new(0),
        });
        let client = Client::new(flaky.clone(), Arc::default()).with_retry(RetryPolicy::immediate(3));
        assert_eq!(client.complete(&request("x", "t")).unwrap(), "ok");
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 3);
        assert_eq!(client.ledger().snapshot().total, 1);
    }

    #[test]
    fn surfaces_after_exhausting_retries() {
        let flaky = Arc::new(Flaky {
            fail_first: 100,
            error: BackendError::RateLimited("429".into()),
            calls: AtomicUsize::new(0),
        });
        let client = Client::new(flaky.clone(), Arc::default()).with_retry(RetryPolicy::immediate(3));
        assert!(matches!(client.complete(&request("x", "t")), Err(BackendError::RateLimited(_))));
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 4);
        assert_eq!(client.ledger().snapshot().counts["t"], 1);
    }

    #[test]
    fn malformed_is_not_retried() {
        let flaky = Arc::new(Flaky {
            fail_first: 100,
            error: BackendError::MalformedResponse("junk".into()),
            calls: AtomicUsize::new(0),
        });
        let client = Client::new(flaky.clone(), Arc::default()).with_retry(RetryPolicy::immediate(3));
        assert!(client.complete(&request("x", "t")).is_err());
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(0), Duration::from_secs(1));
        assert_eq!(p.delay(1), Duration::from_secs(2));
        assert_eq!(p.delay(2), Duration::from_secs(4));
    }

    #[test]
    fn request_validation() {
        let mut r = request("x", "t");
        r.temperature = 2.5;
        assert!(r.validate().is_err());
        let empty = ChatRequest { messages: Transcript::new(), ..request("x", "t") };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn wire_roles_follow_speaker() {
        let mut t = Transcript::new();
        t.push_turn(Role::System, "sys").unwrap();
        t.push_turn(Role::Recommender, "rec").unwrap();
        t.push_turn(Role::User, "usr").unwrap();
        let mut r = request("x", "t");
        r.messages = t;
        r.assistant_role = Role::User;
        let roles: Vec<_> = r.wire_messages().into_iter().map(|m| m.role).collect();
        assert_eq!(roles, ["system", "user", "assistant"]);
        r.assistant_role = Role::Recommender;
        let roles: Vec<_> = r.wire_messages().into_iter().map(|m| m.role).collect();
        assert_eq!(roles, ["system", "assistant", "user"]);
    }

    #[test]
    fn backend_ref_parsing() {
        let s = BackendRef::parse("scripted:fixtures/a.jsonl").unwrap();
        assert_eq!(s.kind, BackendKind::Scripted);
        assert_eq!(s.to_string(), "scripted:fixtures/a.jsonl");
        let h = BackendRef::parse("http:llama3@http://localhost:8000/v1?temperature=0.3").unwrap();
        assert_eq!(h.model_name.as_deref(), Some("llama3"));
        assert_eq!(h.endpoint.as_deref(), Some("http://localhost:8000/v1"));
        assert_eq!(h.default_temperature, 0.3);
        assert!(BackendRef::parse("grpc:foo").is_err());
        assert!(BackendRef::parse("http:nomodel").is_err());
    }
}
