//! Human behavior semantics: caption an image, extract a five-field JSON
//! record with a few-shot prompt, and compose the final text prompt.

mod client;
mod compose;
mod pipeline;

use serde::{Deserialize, Serialize};

pub use client::{
    request_hash, Client, FixtureResponse, FixtureTable, HttpTransport, LogEntry, ModelEndpoint, Role, Transport,
    TransportError, TransportReply, ENDPOINT_KEY_VAR,
};
pub use compose::{compose, decompose, normalize_field, PromptComposition, SEPARATOR};
pub use pipeline::{
    build_dataset, caption, caption_messages, extract, extract_messages, extract_with, parse_record, repair_messages, ExtractOptions,
    Extraction, FewShot, ManifestLine,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SemanticsError {
    #[error("{endpoint}: network error after {attempts} attempt(s){}: {detail}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Network { endpoint: String, attempts: u32, status: Option<u16>, detail: String },
    #[error("{endpoint}: timed out after {attempts} attempt(s)")]
    Timeout { endpoint: String, attempts: u32 },
    #[error("{endpoint}: empty response after {attempts} attempt(s)")]
    EmptyResponse { endpoint: String, attempts: u32 },
    #[error("malformed JSON after {repairs} repair attempt(s): {detail}")]
    MalformedJson { detail: String, repairs: u32 },
    #[error("missing field {0:?}")]
    MissingField(String),
    #[error("unexpected field {0:?}")]
    UnexpectedField(String),
    #[error("field {field:?} is {len} bytes, cap is {cap}")]
    FieldTooLong { field: String, len: usize, cap: usize },
    #[error("endpoint {endpoint} has role {actual:?}, expected {expected:?}")]
    WrongRole { endpoint: String, expected: Role, actual: Role },
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("fixtures: {0}")]
    Fixture(String),
    #[error("io: {0}")]
    Io(String),
}

impl SemanticsError {
    /// Transport-level failures, as opposed to content or schema problems.
    pub fn is_network(&self) -> bool {
        matches!(self, SemanticsError::Network { .. } | SemanticsError::Timeout { .. } | SemanticsError::EmptyResponse { .. })
    }
}

pub type Result<T> = std::result::Result<T, SemanticsError>;

pub const FIELDS: [&str; 5] = ["key_entities", "pose", "action", "hand_action", "env"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticsRecord {
    pub key_entities: String,
    pub pose: String,
    pub action: String,
    pub hand_action: String,
    pub env: String,
}

impl SemanticsRecord {
    pub fn field(&self, name: &str) -> Option<&str> {
        Some(match name {
            "key_entities" => &self.key_entities,
            "pose" => &self.pose,
            "action" => &self.action,
            "hand_action" => &self.hand_action,
            "env" => &self.env,
            _ => return None,
        })
    }

    pub fn validate(&self, cap: usize) -> Result<()> {
        for f in FIELDS {
            let len = self.field(f).unwrap().len();
            if len > cap {
                return Err(SemanticsError::FieldTooLong { field: f.into(), len, cap });
            }
        }
        if self.hand_action.trim().is_empty() {
            return Err(SemanticsError::MissingField("hand_action".into()));
        }
        Ok(())
    }
}
