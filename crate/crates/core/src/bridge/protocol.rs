//! Protocol v1 message schema. See `docs/protocol-v1.md`.

use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;
/// Maximum number of requests a client keeps in flight.
pub const PIPELINE_WINDOW: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Logprobs,
    Topk,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRequest {
    pub request_id: u64,
    pub kind: RequestKind,
    pub context: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyResponse {
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk_pairs: Option<Vec<(u32, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampled: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PolicyResponse {
    pub fn error(request_id: u64, message: impl Into<String>) -> Self {
        Self {
            request_id,
            error: Some(message.into()),
            ..Self::default()
        }
    }

    /// Number of payload fields present; valid responses have exactly one.
    pub fn payload_count(&self) -> usize {
        [
            self.log_probs.is_some(),
            self.topk_pairs.is_some(),
            self.sampled.is_some(),
            self.error.is_some(),
        ]
        .iter()
        .filter(|p| **p)
        .count()
    }
}

/// One line on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Hello { version: u32, vocab_size: usize },
    Request(PolicyRequest),
    Response(PolicyResponse),
    Error { message: String },
}

impl Message {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("message serializes");
        s.push('\n');
        s
    }

    pub fn parse(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line.trim_end())
    }
}
