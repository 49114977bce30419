//! The topic table and the payload schema of every topic.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// Root of every topic path.
pub const ROOT: &str = "ogs/";
/// Suffix of the acknowledgement topic paired with each command topic.
pub const ACK_SUFFIX: &str = "/ack";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qos {
    AtMostOnce,
    AtLeastOnce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicKind {
    Telemetry,
    State,
    Command,
    Ack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TopicSpec {
    pub path: &'static str,
    pub kind: TopicKind,
    pub retained: bool,
}

impl TopicSpec {
    pub fn qos(&self) -> Qos {
        match self.kind {
            TopicKind::Telemetry => Qos::AtMostOnce,
            _ => Qos::AtLeastOnce,
        }
    }

    pub fn schema(&self) -> Value {
        payload_schema(self.path)
    }
}

pub const CONTROLLER_STATE: &str = "ogs/controller/state";
pub const CONTROLLER_CMD: &str = "ogs/controller/cmd";
pub const TRACK_TELEMETRY: &str = "ogs/track/telemetry";
pub const TRACK_CMD: &str = "ogs/track/cmd";
pub const POL_TELEMETRY: &str = "ogs/pol/telemetry";
pub const POL_CMD: &str = "ogs/pol/cmd";
pub const QKD_TELEMETRY: &str = "ogs/qkd/telemetry";
pub const QKD_CMD: &str = "ogs/qkd/cmd";
pub const BOBA_STATE: &str = "ogs/boba/state";
pub const BOBA_CMD: &str = "ogs/boba/cmd";
pub const EPHEMERIS_PASS: &str = "ogs/ephemeris/pass";

const fn spec(path: &'static str, kind: TopicKind, retained: bool) -> TopicSpec {
    TopicSpec { path, kind, retained }
}

/// Every topic on the bus, including the acknowledgement topics.
pub const TOPICS: [TopicSpec; 16] = [
    spec(CONTROLLER_STATE, TopicKind::State, true),
    spec(CONTROLLER_CMD, TopicKind::Command, false),
    spec("ogs/controller/cmd/ack", TopicKind::Ack, false),
    spec(TRACK_TELEMETRY, TopicKind::Telemetry, false),
    spec(TRACK_CMD, TopicKind::Command, false),
    spec("ogs/track/cmd/ack", TopicKind::Ack, false),
    spec(POL_TELEMETRY, TopicKind::Telemetry, false),
    spec(POL_CMD, TopicKind::Command, false),
    spec("ogs/pol/cmd/ack", TopicKind::Ack, false),
    spec(QKD_TELEMETRY, TopicKind::Telemetry, false),
    spec(QKD_CMD, TopicKind::Command, false),
    spec("ogs/qkd/cmd/ack", TopicKind::Ack, false),
    spec(BOBA_STATE, TopicKind::State, true),
    spec(BOBA_CMD, TopicKind::Command, false),
    spec("ogs/boba/cmd/ack", TopicKind::Ack, false),
    spec(EPHEMERIS_PASS, TopicKind::State, true),
];

pub fn lookup(path: &str) -> Option<&'static TopicSpec> {
    TOPICS.iter().find(|t| t.path == path)
}

pub fn ack_topic(cmd_topic: &str) -> String {
    format!("{cmd_topic}{ACK_SUFFIX}")
}

pub const STATION_STATES: [&str; 8] = [
    "IDLE",
    "SLEW",
    "COARSE_ACQ",
    "FINE_ACQ",
    "TRACK",
    "QKD_ACTIVE",
    "FAULT",
    "PASS_END",
];
pub const CORRECTION_MODES: [&str; 3] = ["open_loop", "closed_loop", "off"];

fn number() -> Value {
    json!({"type": "number"})
}

fn nullable_number() -> Value {
    json!({"type": ["number", "null"]})
}

fn pair() -> Value {
    json!({"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2})
}

fn object(required: &[&str], optional: &[&str], props: Value) -> Value {
    let mut properties = Map::new();
    properties.insert("t".into(), json!({"type": "number", "minimum": 0}));
    properties.insert("seq".into(), json!({"type": "integer", "minimum": 0}));
    if let Value::Object(p) = props {
        properties.extend(p);
    }
    let mut req: Vec<&str> = vec!["t", "seq"];
    req.extend_from_slice(required);
    debug_assert!(optional.iter().all(|k| properties.contains_key(*k)));
    json!({
        "type": "object",
        "additionalProperties": false,
        "required": req,
        "properties": properties,
    })
}

/// JSON Schema of the payload carried on `path`; `null` for unknown topics.
pub fn payload_schema(path: &str) -> Value {
    match path {
        CONTROLLER_STATE => object(
            &["state", "pass_id"],
            &["previous", "event", "cause", "warning"],
            json!({
                "state": {"enum": STATION_STATES},
                "pass_id": {"type": ["string", "null"]},
                "previous": {"enum": STATION_STATES.iter().map(|s| json!(s)).chain([Value::Null]).collect::<Vec<_>>()},
                "event": {"type": ["string", "null"]},
                "cause": {"type": ["string", "null"]},
                "warning": {"type": ["string", "null"]},
            }),
        ),
        CONTROLLER_CMD => object(
            &["action"],
            &["plan", "mode"],
            json!({
                "action": {"enum": ["start_pass", "abort", "set_mode"]},
                "plan": {"type": "object"},
                "mode": {"enum": CORRECTION_MODES},
            }),
        ),
        TRACK_TELEMETRY => object(
            &["raw_error", "fpm_command", "residual", "residual_rms", "lock", "offload_offset", "valid"],
            &["saturated"],
            json!({
                "raw_error": pair(),
                "fpm_command": pair(),
                "residual": pair(),
                "residual_rms": pair(),
                "lock": {"type": "boolean"},
                "offload_offset": pair(),
                "valid": {"type": "boolean"},
                "saturated": {"type": "boolean"},
            }),
        ),
        TRACK_CMD => object(
            &[],
            &["kp", "ki"],
            json!({
                "kp": {"type": "number", "minimum": 0},
                "ki": {"type": "number", "minimum": 0},
            }),
        ),
        POL_TELEMETRY => object(
            &["mode", "q1_deg", "h_deg", "q2_deg", "azimuth_deg", "misalignment_deg", "frame_rotation_deg"],
            &["azimuth_channel"],
            json!({
                "mode": {"enum": CORRECTION_MODES},
                "q1_deg": number(),
                "h_deg": number(),
                "q2_deg": number(),
                "azimuth_deg": nullable_number(),
                "azimuth_channel": {"enum": ["VIS_NIR_BEACON", "SWIR_BEACON"]},
                "misalignment_deg": number(),
                "frame_rotation_deg": number(),
            }),
        ),
        POL_CMD => object(
            &[],
            &["mode", "gain"],
            json!({
                "mode": {"enum": CORRECTION_MODES},
                "gain": {"type": "number", "minimum": 0, "maximum": 1},
            }),
        ),
        QKD_TELEMETRY => object(
            &["counts", "sifted_count", "error_count", "qber", "background_fraction", "filter"],
            &[],
            json!({
                "counts": {
                    "type": "object",
                    "additionalProperties": false,
                    "required": ["h", "v", "d", "a"],
                    "properties": {
                        "h": {"type": "integer", "minimum": 0},
                        "v": {"type": "integer", "minimum": 0},
                        "d": {"type": "integer", "minimum": 0},
                        "a": {"type": "integer", "minimum": 0},
                    },
                },
                "sifted_count": {"type": "integer", "minimum": 0},
                "error_count": {"type": "integer", "minimum": 0},
                "qber": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                "background_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "filter": {"enum": ["F780", "F850", "custom"]},
            }),
        ),
        QKD_CMD => object(
            &[],
            &["filter_lambda_nm", "mode"],
            json!({
                "filter_lambda_nm": number(),
                "mode": {"enum": CORRECTION_MODES},
            }),
        ),
        BOBA_STATE => object(
            &["enabled", "lambda_nm", "power_w", "modulated"],
            &["azimuth_deg", "elevation_deg", "point_ahead_rad", "coalign_offset_rad"],
            json!({
                "enabled": {"type": "boolean"},
                "lambda_nm": number(),
                "power_w": number(),
                "modulated": {"type": "boolean"},
                "azimuth_deg": number(),
                "elevation_deg": number(),
                "point_ahead_rad": {"type": "number", "minimum": 0},
                "coalign_offset_rad": pair(),
            }),
        ),
        BOBA_CMD => object(
            &[],
            &["enable", "lambda_nm", "power_w"],
            json!({
                "enable": {"type": "boolean"},
                "lambda_nm": number(),
                "power_w": number(),
            }),
        ),
        EPHEMERIS_PASS => object(
            &["pass_id", "altitude_km", "max_elevation_deg", "direction", "step_s", "culmination_t", "track"],
            &[],
            json!({
                "pass_id": {"type": "string"},
                "altitude_km": number(),
                "max_elevation_deg": number(),
                "direction": {"enum": ["ascending", "descending"]},
                "step_s": number(),
                "culmination_t": number(),
                "track": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                },
            }),
        ),
        p if p.ends_with(ACK_SUFFIX) && lookup(p).is_some() => object(
            &["ok"],
            &["error", "result"],
            json!({
                "ok": {"type": "boolean"},
                "error": {"type": ["string", "null"]},
                "result": {"type": ["object", "null"]},
            }),
        ),
        _ => Value::Null,
    }
}

/// The full topic table as one JSON document.
pub fn topic_table_schema() -> Value {
    let mut topics = Map::new();
    for t in &TOPICS {
        topics.insert(
            t.path.into(),
            json!({
                "kind": t.kind,
                "qos": t.qos(),
                "retained": t.retained,
                "schema": t.schema(),
            }),
        );
    }
    Value::Object(topics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_complete() {
        for t in &TOPICS {
            assert!(t.path.starts_with(ROOT));
            assert!(!t.schema().is_null(), "{}", t.path);
            if t.kind == TopicKind::Command {
                assert!(lookup(&ack_topic(t.path)).is_some());
            }
        }
        assert_eq!(lookup(TRACK_TELEMETRY).unwrap().qos(), Qos::AtMostOnce);
        assert_eq!(lookup(BOBA_STATE).unwrap().qos(), Qos::AtLeastOnce);
        assert!(lookup(EPHEMERIS_PASS).unwrap().retained);
        assert!(lookup("ogs/unknown").is_none());
    }
}
