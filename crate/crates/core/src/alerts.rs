//! Service-alert normalization.
//!
//! Alerts arrive as small JSON objects, one per line in `.jsonl` files:
//!
//! ```json
//! {"id":"A1","entity_type":"trip","status":"on_hold","trip_id":"LE-101","cause":"mechanical","timestamp":0}
//! ```
//!
//! `entity_type` is `trip` or `station` (`stop` is accepted too). Trip
//! statuses are matched case-insensitively: `on_hold`/`delayed`,
//! `resumed`/`back_to_move`, `canceled`/`cancelled`. Station alerts are
//! always informational. An optional `route_id` lets an alert target a
//! whole line.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AlertError {
    #[error("malformed alert json: {0}")]
    MalformedJson(String),
    #[error("alert is missing field {0}")]
    MissingField(String),
    #[error("inconsistent alert: {0}")]
    InconsistentAlert(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertKind {
    TripAlert,
    StationAlert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertStatus {
    /// "delayed (on hold)"
    OnHold,
    /// "back to move"
    Resumed,
    Canceled,
    Informational,
}

impl AlertStatus {
    pub fn describe(self) -> &'static str {
        match self {
            Self::OnHold => "delayed (on hold)",
            Self::Resumed => "back to move (resumed)",
            Self::Canceled => "canceled",
            Self::Informational => "station notice",
        }
    }

    /// Whether riders of an affected trip need an alternative.
    pub fn needs_next_trip(self) -> bool {
        matches!(self, Self::OnHold | Self::Canceled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub alert_id: String,
    pub kind: AlertKind,
    pub status: AlertStatus,
    pub trip_id: Option<String>,
    pub stop_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route_id: Option<String>,
    pub cause_text: String,
    /// UTC epoch seconds.
    pub timestamp: i64,
}

fn string_field(obj: &Map<String, Value>, name: &str) -> Result<Option<String>, AlertError> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.trim().is_empty() => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.trim().to_string())),
        Some(other) => Err(AlertError::MalformedJson(format!(
            "field {name} should be a string, got {other}"
        ))),
    }
}

fn required(obj: &Map<String, Value>, name: &str) -> Result<String, AlertError> {
    string_field(obj, name)?.ok_or_else(|| AlertError::MissingField(name.to_string()))
}

fn trip_status(raw: &str) -> Option<AlertStatus> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "on_hold" | "on hold" | "delayed" => Some(AlertStatus::OnHold),
        "resumed" | "back_to_move" | "back to move" => Some(AlertStatus::Resumed),
        "canceled" | "cancelled" => Some(AlertStatus::Canceled),
        _ => None,
    }
}

/// Parses one raw alert record.
pub fn parse_alert(raw: &str) -> Result<AlertEvent, AlertError> {
    let value: Value =
        serde_json::from_str(raw).map_err(|e| AlertError::MalformedJson(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(AlertError::MalformedJson("expected a JSON object".into()));
    };

    let alert_id = required(&obj, "id")?;
    let entity_type = required(&obj, "entity_type")?;
    let status_raw = required(&obj, "status")?;
    let timestamp = match obj.get("timestamp") {
        None | Some(Value::Null) => return Err(AlertError::MissingField("timestamp".into())),
        Some(v) => v
            .as_i64()
            .ok_or_else(|| AlertError::MalformedJson("timestamp must be an integer".into()))?,
    };
    let trip_id = string_field(&obj, "trip_id")?;
    let stop_id = string_field(&obj, "stop_id")?;
    let route_id = string_field(&obj, "route_id")?;
    let cause_text = string_field(&obj, "cause")?.unwrap_or_default();

    let (kind, status) = match entity_type.to_ascii_lowercase().as_str() {
        "trip" => {
            if trip_id.is_none() {
                return Err(AlertError::InconsistentAlert(format!(
                    "trip alert {alert_id} has no trip_id"
                )));
            }
            let status = trip_status(&status_raw).ok_or_else(|| {
                AlertError::InconsistentAlert(format!(
                    "trip alert {alert_id} has unknown status {status_raw:?}"
                ))
            })?;
            (AlertKind::TripAlert, status)
        }
        "station" | "stop" => {
            if stop_id.is_none() {
                return Err(AlertError::InconsistentAlert(format!(
                    "station alert {alert_id} has no stop_id"
                )));
            }
            if trip_status(&status_raw).is_some() {
                return Err(AlertError::InconsistentAlert(format!(
                    "status {status_raw:?} only applies to trip alerts"
                )));
            }
            (AlertKind::StationAlert, AlertStatus::Informational)
        }
        other => {
            return Err(AlertError::InconsistentAlert(format!(
                "unknown entity_type {other:?}"
            )))
        }
    };

    Ok(AlertEvent {
        alert_id,
        kind,
        status,
        trip_id,
        stop_id,
        route_id,
        cause_text,
        timestamp,
    })
}

/// Parses a JSON-lines alert file. Blank lines are skipped; each other line
/// yields one result, tagged with its 1-based line number.
pub fn parse_alert_lines(text: &str) -> Vec<(usize, Result<AlertEvent, AlertError>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, parse_alert(l)))
        .collect()
}
