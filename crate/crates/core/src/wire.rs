//! Newline-delimited JSON messages exchanged between sensors and the server.
//!
//! Every message is one JSON object on one line with a `type` discriminator.
//! Unknown fields are ignored; an unknown `type` is reported separately from
//! malformed input so the server can answer it without dropping the session.

use crate::se3::Pose;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub sensor_id: String,
    #[serde(default)]
    pub sensor_type: String,
    #[serde(default)]
    pub targets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Welcome {
    pub server_time_us: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub sensor_id: String,
    pub target: String,
    pub t_us: i64,
    pub pose: Pose,
    pub status: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info_diag: Option<[f64; 6]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateEntry {
    pub target: String,
    pub pose: Pose,
    pub direct: bool,
    pub uncertainty: [f64; 6],
    pub lose_track: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseUpdate {
    pub solve_t_us: i64,
    pub poses: Vec<UpdateEntry>,
    /// Fusion cycle counter, strictly increasing.
    #[serde(default)]
    pub cycle: u64,
    /// Receiving sensor; set when updates are written to a results log.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_id: Option<String>,
}

impl PoseUpdate {
    pub fn entry(&self, target: &str) -> Option<&UpdateEntry> {
        self.poses.iter().find(|e| e.target == target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose>,
    pub direct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<[f64; 6]>,
    #[serde(default)]
    pub path: Vec<String>,
    pub age_us: i64,
    pub lose_track: bool,
    /// Number of fusion cycles completed when the query was answered.
    #[serde(default)]
    pub cycle: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub code: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum WireMessage {
    Hello(Hello),
    Welcome(Welcome),
    Meas(Measurement),
    Update(PoseUpdate),
    Query(Query),
    Result(QueryResult),
    Bye,
    Error(ErrorMessage),
}

pub const MESSAGE_TYPES: [&str; 8] = [
    "hello", "welcome", "meas", "update", "query", "result", "bye", "error",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
}

impl WireError {
    pub fn code(&self) -> &'static str {
        match self {
            WireError::Malformed(_) => "malformed",
            WireError::UnknownType(_) => "unknown_type",
        }
    }
}

impl WireMessage {
    pub fn decode(line: &str) -> Result<Self, WireError> {
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| WireError::Malformed(e.to_string()))?;
        let kind = value
            .get("type")
            .and_then(|t| t.as_str())
            .ok_or_else(|| WireError::Malformed("missing string field \"type\"".into()))?;
        if !MESSAGE_TYPES.contains(&kind) {
            return Err(WireError::UnknownType(kind.to_owned()));
        }
        serde_json::from_value(value).map_err(|e| WireError::Malformed(e.to_string()))
    }

    /// One line of JSON without the trailing newline.
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("wire messages always serialize")
    }

    pub fn error(code: &str, detail: impl Into<String>) -> Self {
        WireMessage::Error(ErrorMessage {
            code: code.to_owned(),
            detail: detail.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_measurement_and_ignore_unknown_fields() {
        let line = r#"{"type":"meas","sensor_id":"ndi","target":"pointer","t_us":12,
            "pose":[0,0,1,1,0,0,0],"status":true,"extra":42}"#
            .replace('\n', "");
        match WireMessage::decode(&line).unwrap() {
            WireMessage::Meas(m) => {
                assert_eq!(m.sensor_id, "ndi");
                assert_eq!(m.info_diag, None);
                assert_eq!(m.pose, Pose::from_translation(0.0, 0.0, 1.0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encode_shapes() {
        assert_eq!(WireMessage::Bye.encode(), r#"{"type":"bye"}"#);
        let hello = WireMessage::Hello(Hello {
            sensor_id: "hmd".into(),
            sensor_type: "hmd".into(),
            targets: vec!["a".into()],
        });
        assert_eq!(
            hello.encode(),
            r#"{"type":"hello","sensor_id":"hmd","sensor_type":"hmd","targets":["a"]}"#
        );
        let q = WireMessage::Result(QueryResult {
            target: "a".into(),
            pose: None,
            direct: false,
            uncertainty: None,
            path: vec![],
            age_us: 0,
            lose_track: true,
            cycle: 3,
        });
        let v: serde_json::Value = serde_json::from_str(&q.encode()).unwrap();
        assert_eq!(v["type"], "result");
        assert!(v.get("pose").is_none());
        assert_eq!(v["lose_track"], true);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(WireMessage::decode("{not json"), Err(WireError::Malformed(_))));
        assert!(matches!(WireMessage::decode("[1,2]"), Err(WireError::Malformed(_))));
        assert!(matches!(
            WireMessage::decode(r#"{"type":"teleport"}"#),
            Err(WireError::UnknownType(t)) if t == "teleport"
        ));
        assert!(matches!(
            WireMessage::decode(r#"{"type":"meas","sensor_id":"x"}"#),
            Err(WireError::Malformed(_))
        ));
    }
}
