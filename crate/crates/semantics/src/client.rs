use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::{Result, SemanticsError};

/// Sent as `Authorization: Bearer <value>` when set.
pub const ENDPOINT_KEY_VAR: &str = "SESA_ENDPOINT_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Captioner,
    Extractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    /// `http://`, `https://` or `mock:<name>`.
    pub base_url: String,
    pub model: String,
    pub timeout_ms: u64,
    /// Extra attempts after the first.
    pub retries: u32,
    pub role: Role,
}

impl ModelEndpoint {
    pub fn new(base_url: &str, model: &str, timeout: Duration, retries: u32, role: Role) -> Result<ModelEndpoint> {
        let e = ModelEndpoint { base_url: base_url.into(), model: model.into(), timeout_ms: timeout.as_millis() as u64, retries, role };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(SemanticsError::InvalidEndpoint(format!("{}: timeout must be positive", self.base_url)));
        }
        if !(self.is_mock() || self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(SemanticsError::InvalidEndpoint(format!("{}: unsupported scheme", self.base_url)));
        }
        Ok(())
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock:")
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Timeout,
    Connect(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportReply {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    fn post(&self, endpoint: &ModelEndpoint, body: &Value) -> std::result::Result<TransportReply, TransportError>;
}

/// Plain HTTP POST of the JSON body to the endpoint URL.
#[derive(Debug, Clone, Default)]
pub struct HttpTransport {
    pub bearer: Option<String>,
}

impl HttpTransport {
    pub fn from_env() -> HttpTransport {
        HttpTransport { bearer: std::env::var(ENDPOINT_KEY_VAR).ok().filter(|k| !k.is_empty()) }
    }
}

impl Transport for HttpTransport {
    fn post(&self, endpoint: &ModelEndpoint, body: &Value) -> std::result::Result<TransportReply, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&endpoint.base_url).header("Content-Type", "application/json");
        if let Some(key) = &self.bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let payload = serde_json::to_string(body).expect("JSON values serialize");
        let classify = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
                TransportError::Timeout
            }
            e => TransportError::Connect(e.to_string()),
        };
        let mut resp = req.send(payload.as_bytes()).map_err(classify)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(classify)?;
        Ok(TransportReply { status, body })
    }
}

/// Hex SHA-256 of the compact JSON request body (object keys sorted).
pub fn request_hash(body: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_string(body).expect("JSON values serialize").as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureResponse {
    /// Returned as the assistant message of a 200 reply.
    Content(String),
    Status { status: u16 },
    Timeout { timeout: bool },
}

/// Canned responses keyed by [`request_hash`]; serves `mock:` endpoints.
/// Unknown requests get a 404.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureTable {
    pub entries: BTreeMap<String, FixtureResponse>,
}

impl FixtureTable {
    pub fn from_json(text: &str) -> Result<FixtureTable> {
        serde_json::from_str(text).map_err(|e| SemanticsError::Fixture(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<FixtureTable> {
        let text = std::fs::read_to_string(path).map_err(|e| SemanticsError::Io(format!("{}: {e}", path.display())))?;
        FixtureTable::from_json(&text).map_err(|e| SemanticsError::Fixture(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixtures serialize")
    }

    pub fn insert(&mut self, body: &Value, response: FixtureResponse) {
        self.entries.insert(request_hash(body), response);
    }
}

impl Transport for FixtureTable {
    fn post(&self, _endpoint: &ModelEndpoint, body: &Value) -> std::result::Result<TransportReply, TransportError> {
        let hash = request_hash(body);
        match self.entries.get(&hash) {
            Some(FixtureResponse::Content(c)) => Ok(TransportReply {
                status: 200,
                body: json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": c}}]}).to_string(),
            }),
            Some(FixtureResponse::Status { status }) => Ok(TransportReply { status: *status, body: "{}".into() }),
            Some(FixtureResponse::Timeout { .. }) => Err(TransportError::Timeout),
            None => Ok(TransportReply { status: 404, body: format!("no fixture for request {hash}") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogEntry {
    pub endpoint: String,
    pub attempt: u32,
    pub request_hash: String,
    pub outcome: String,
}

/// One endpoint plus its transport, retry policy and request log.
pub struct Client {
    pub endpoint: ModelEndpoint,
    transport: Arc<dyn Transport>,
    log: Mutex<Vec<LogEntry>>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("endpoint", &self.endpoint).finish_non_exhaustive()
    }
}

impl Client {
    pub fn with_transport(endpoint: ModelEndpoint, transport: Arc<dyn Transport>) -> Result<Client> {
        endpoint.validate()?;
        Ok(Client { endpoint, transport, log: Mutex::new(Vec::new()) })
    }

    /// `mock:` endpoints use `fixtures`; HTTP endpoints read the bearer key
    /// from the environment.
    pub fn for_endpoint(endpoint: ModelEndpoint, fixtures: Option<Arc<FixtureTable>>) -> Result<Client> {
        if endpoint.is_mock() {
            let table = fixtures.ok_or_else(|| SemanticsError::InvalidEndpoint(format!("{}: no fixture table loaded", endpoint.base_url)))?;
            Client::with_transport(endpoint, table)
        } else {
            Client::with_transport(endpoint, Arc::new(HttpTransport::from_env()))
        }
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.log.lock().expect("log lock").clone()
    }

    fn record(&self, attempt: u32, hash: &str, outcome: String) {
        log::debug!("{} attempt {attempt}: {outcome}", self.endpoint.base_url);
        self.log.lock().expect("log lock").push(LogEntry {
            endpoint: self.endpoint.base_url.clone(),
            attempt,
            request_hash: hash.into(),
            outcome,
        });
    }

    pub fn request_body(&self, messages: &[Value]) -> Value {
        json!({"model": self.endpoint.model, "messages": messages})
    }

    /// Sends a chat request and returns the assistant text. Timeouts,
    /// connection failures, 429/5xx and empty replies are retried up to the
    /// endpoint's budget; other statuses fail at once.
    pub fn complete(&self, messages: &[Value]) -> Result<String> {
        let body = self.request_body(messages);
        let hash = request_hash(&body);
        let endpoint = self.endpoint.base_url.clone();
        let total = self.endpoint.retries + 1;
        let mut last = SemanticsError::EmptyResponse { endpoint: endpoint.clone(), attempts: 0 };
        for attempt in 1..=total {
            match self.transport.post(&self.endpoint, &body) {
                Err(TransportError::Timeout) => {
                    self.record(attempt, &hash, "timeout".into());
                    last = SemanticsError::Timeout { endpoint: endpoint.clone(), attempts: attempt };
                }
                Err(TransportError::Connect(detail)) => {
                    self.record(attempt, &hash, format!("connect error: {detail}"));
                    last = SemanticsError::Network { endpoint: endpoint.clone(), attempts: attempt, status: None, detail };
                }
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let content = serde_json::from_str::<Value>(&reply.body)
                        .ok()
                        .and_then(|v| v.pointer("/choices/0/message/content").and_then(Value::as_str).map(str::to_string));
                    let Some(content) = content else {
                        self.record(attempt, &hash, format!("HTTP {} unparsable body", reply.status));
                        return Err(SemanticsError::Network {
                            endpoint,
                            attempts: attempt,
                            status: Some(reply.status),
                            detail: "response has no choices[0].message.content".into(),
                        });
                    };
                    if content.trim().is_empty() {
                        self.record(attempt, &hash, "empty content".into());
                        last = SemanticsError::EmptyResponse { endpoint: endpoint.clone(), attempts: attempt };
                        continue;
                    }
                    self.record(attempt, &hash, format!("HTTP {}", reply.status));
                    return Ok(content);
                }
                Ok(reply) => {
                    self.record(attempt, &hash, format!("HTTP {}", reply.status));
                    let err = SemanticsError::Network {
                        endpoint: endpoint.clone(),
                        attempts: attempt,
                        status: Some(reply.status),
                        detail: reply.body.chars().take(200).collect(),
                    };
                    if reply.status != 429 && reply.status < 500 {
                        return Err(err);
                    }
                    last = err;
                }
            }
        }
        Err(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock(retries: u32, table: FixtureTable) -> Client {
        let e = ModelEndpoint::new("mock:test", "m", Duration::from_secs(1), retries, Role::Captioner).unwrap();
        Client::with_transport(e, Arc::new(table)).unwrap()
    }

    fn msgs(text: &str) -> Vec<Value> {
        vec![json!({"role": "user", "content": text})]
    }

    #[test]
    fn fixture_echo_and_hash_stability() {
        let probe = mock(0, FixtureTable::default());
        let body = probe.request_body(&msgs("hi"));
        let mut t = FixtureTable::default();
        t.insert(&body, FixtureResponse::Content("hello there".into()));
        let c = mock(0, t);
        assert_eq!(c.complete(&msgs("hi")).unwrap(), "hello there");
        assert_eq!(request_hash(&json!({"b": 1, "a": 2})), request_hash(&json!({"a": 2, "b": 1})));
    }

    #[test]
    fn retry_accounting() {
        let probe = mock(0, FixtureTable::default());
        let body = probe.request_body(&msgs("x"));
        for (resp, want_attempts) in [
            (FixtureResponse::Status { status: 503 }, 3),
            (FixtureResponse::Timeout { timeout: true }, 3),
            (FixtureResponse::Content("  ".into()), 3),
            (FixtureResponse::Status { status: 400 }, 1),
        ] {
            let mut t = FixtureTable::default();
            t.insert(&body, resp.clone());
            let c = mock(2, t);
            let err = c.complete(&msgs("x")).unwrap_err();
            let attempts = match &err {
                SemanticsError::Network { attempts, .. } | SemanticsError::Timeout { attempts, .. } | SemanticsError::EmptyResponse { attempts, .. } => *attempts,
                e => panic!("unexpected {e:?}"),
            };
            assert_eq!(attempts, want_attempts, "{resp:?}");
            assert_eq!(c.log().len(), want_attempts as usize);
            assert!(err.is_network());
        }
        let err = mock(1, FixtureTable::default()).complete(&msgs("unknown")).unwrap_err();
        assert!(matches!(err, SemanticsError::Network { status: Some(404), attempts: 1, .. }));
    }

    #[test]
    fn fixture_file_format() {
        let t = FixtureTable::from_json(r#"{"aa": "text", "bb": {"status": 500}, "cc": {"timeout": true}}"#).unwrap();
        assert_eq!(t.entries["aa"], FixtureResponse::Content("text".into()));
        assert_eq!(t.entries["bb"], FixtureResponse::Status { status: 500 });
        assert_eq!(FixtureTable::from_json(&t.to_json()).unwrap(), t);
        assert!(FixtureTable::from_json("[1]").is_err());
    }

    #[test]
    fn endpoint_validation() {
        assert!(ModelEndpoint::new("ftp://x", "m", Duration::from_secs(1), 0, Role::Extractor).is_err());
        assert!(ModelEndpoint::new("http://x", "m", Duration::ZERO, 0, Role::Extractor).is_err());
        let e = ModelEndpoint::new("mock:a", "m", Duration::from_secs(1), 0, Role::Extractor).unwrap();
        assert!(Client::for_endpoint(e, None).is_err());
    }
}
