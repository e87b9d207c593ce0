//! Versioned envelope for messages crossing the gateway boundary.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::event::Event;
use crate::model::{ClarificationId, RobotId};

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEnvelope {
    pub version: u32,
    pub kind: String,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitInstruction {
    pub text: String,
    #[serde(default)]
    pub priority: u32,
    #[serde(default)]
    pub explicit_robot: Option<RobotId>,
    #[serde(default)]
    pub tau_override: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerClarification {
    pub clarification_id: ClarificationId,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    SubmitInstruction(SubmitInstruction),
    AnswerClarification(AnswerClarification),
    Event(Event),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("wire version {got} not supported (expected {WIRE_VERSION})")]
    VersionMismatch { got: u32 },
    #[error("unknown message kind `{0}`")]
    UnknownKind(String),
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::SubmitInstruction(_) => "submit_instruction",
            WireMessage::AnswerClarification(_) => "answer_clarification",
            WireMessage::Event(_) => "event",
        }
    }

    pub fn to_envelope(&self) -> WireEnvelope {
        let payload = match self {
            WireMessage::SubmitInstruction(m) => serde_json::to_value(m),
            WireMessage::AnswerClarification(m) => serde_json::to_value(m),
            WireMessage::Event(e) => serde_json::to_value(e),
        }
        .expect("wire payloads serialize");
        WireEnvelope { version: WIRE_VERSION, kind: self.kind().to_owned(), payload }
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(&self.to_envelope()).expect("envelopes serialize")
    }
}

impl WireEnvelope {
    pub fn decode(text: &str) -> Result<WireMessage, WireError> {
        let env: WireEnvelope = serde_json::from_str(text).map_err(|e| WireError::Malformed(e.to_string()))?;
        env.into_message()
    }

    pub fn into_message(self) -> Result<WireMessage, WireError> {
        if self.version != WIRE_VERSION {
            return Err(WireError::VersionMismatch { got: self.version });
        }
        let malformed = |e: serde_json::Error| WireError::Malformed(e.to_string());
        match self.kind.as_str() {
            "submit_instruction" => serde_json::from_value(self.payload).map(WireMessage::SubmitInstruction).map_err(malformed),
            "answer_clarification" => serde_json::from_value(self.payload).map(WireMessage::AnswerClarification).map_err(malformed),
            "event" => serde_json::from_value(self.payload).map(WireMessage::Event).map_err(malformed),
            other => Err(WireError::UnknownKind(other.to_owned())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip() {
        let m = WireMessage::SubmitInstruction(SubmitInstruction {
            text: "find the mug".into(),
            priority: 2,
            explicit_robot: Some(RobotId::new("g1")),
            tau_override: Some(0.9),
        });
        assert_eq!(WireEnvelope::decode(&m.encode()).unwrap(), m);
    }

    #[test]
    fn rejects_version_and_kind() {
        let bad_version = json!({"version": 2, "kind": "event", "payload": {}}).to_string();
        assert_eq!(WireEnvelope::decode(&bad_version), Err(WireError::VersionMismatch { got: 2 }));
        let bad_kind = json!({"version": 1, "kind": "teleport", "payload": {}}).to_string();
        assert_eq!(WireEnvelope::decode(&bad_kind), Err(WireError::UnknownKind("teleport".into())));
        let bad_payload = json!({"version": 1, "kind": "answer_clarification", "payload": {"answer": 3}}).to_string();
        assert!(matches!(WireEnvelope::decode(&bad_payload), Err(WireError::Malformed(_))));
    }
}
