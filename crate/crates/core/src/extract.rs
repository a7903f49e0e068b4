//! JSON-object extraction from model replies, with one guided retry.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::llm::{ChatMessage, CompletionParams, Gateway, GatewayError};
use crate::time::{format_hhmm, parse_time_expr, ServiceSeconds};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractionError {
    /// The reply still failed validation after the retry.
    #[error("extraction invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Finds the first parseable JSON object in `text`, ignoring code fences and
/// surrounding prose.
pub fn find_json_object(text: &str) -> Option<Map<String, Value>> {
    let bytes = text.as_bytes();
    for (start, _) in text.match_indices('{') {
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (offset, &b) in bytes[start..].iter().enumerate() {
            if in_string {
                match (escaped, b) {
                    (true, _) => escaped = false,
                    (false, b'\\') => escaped = true,
                    (false, b'"') => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        let candidate = &text[start..=start + offset];
                        if let Ok(Value::Object(map)) = serde_json::from_str(candidate) {
                            return Some(map);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    None
}

/// Calls the model with `messages`, parses a JSON object from the reply and
/// runs `validate` on it. On failure the model sees its reply and the
/// validator's complaint and gets exactly one more try.
pub fn complete_json<T>(
    gateway: &Gateway,
    mut messages: Vec<ChatMessage>,
    params: &CompletionParams,
    validate: impl Fn(&Map<String, Value>) -> Result<T, String>,
) -> Result<T, ExtractionError> {
    let mut complaint = String::new();
    for attempt in 0..2 {
        if attempt == 1 {
            messages.push(ChatMessage::user(format!(
                "Your previous reply was invalid: {complaint}. Reply again with only the corrected JSON object."
            )));
        }
        let reply = gateway.complete(&messages, params)?.text;
        match find_json_object(&reply) {
            None => complaint = "the reply did not contain a JSON object".to_string(),
            Some(map) => match validate(&map) {
                Ok(v) => return Ok(v),
                Err(why) => complaint = why,
            },
        }
        messages.push(ChatMessage::assistant(reply));
    }
    Err(ExtractionError::Invalid(complaint))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// Free text such as a stop name.
    Text,
    /// A clock time, resolved to seconds past midnight.
    Time,
    /// An opaque id: letters, digits and `-_.:`.
    Identifier,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub description: String,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, kind: FieldKind, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            description: description.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldValue {
    Text(String),
    Time(ServiceSeconds),
    Identifier(String),
}

impl FieldValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Self::Text(s) | Self::Identifier(s) => Some(s),
            Self::Time(_) => None,
        }
    }

    pub fn as_time(&self) -> Option<ServiceSeconds> {
        match self {
            Self::Time(t) => Some(*t),
            _ => None,
        }
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Text(s) | Self::Identifier(s) => f.write_str(s),
            Self::Time(t) => f.write_str(&format_hhmm(*t)),
        }
    }
}

pub type FieldMap = BTreeMap<String, FieldValue>;

fn identifier_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z0-9_.:\-]+$").expect("valid regex"))
}

/// Checks an object against `schema`: exactly the schema's keys, each a
/// string of the right kind.
pub fn validate_fields(map: &Map<String, Value>, schema: &[FieldSpec]) -> Result<FieldMap, String> {
    let mut problems = Vec::new();
    for key in map.keys() {
        if !schema.iter().any(|f| &f.name == key) {
            problems.push(format!("unexpected field {key:?}"));
        }
    }
    let mut out = FieldMap::new();
    for field in schema {
        let Some(value) = map.get(&field.name) else {
            problems.push(format!("missing field {:?}", field.name));
            continue;
        };
        let Some(raw) = value.as_str().map(str::trim).filter(|s| !s.is_empty()) else {
            problems.push(format!("field {:?} must be a non-empty string", field.name));
            continue;
        };
        let parsed = match field.kind {
            FieldKind::Text => Some(FieldValue::Text(raw.to_string())),
            FieldKind::Identifier => identifier_re()
                .is_match(raw)
                .then(|| FieldValue::Identifier(raw.to_string())),
            FieldKind::Time => parse_time_expr(raw).map(FieldValue::Time),
        };
        match parsed {
            Some(v) => {
                out.insert(field.name.clone(), v);
            }
            None => problems.push(format!(
                "field {:?} has an invalid {:?} value {raw:?}",
                field.name, field.kind
            )),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(problems.join("; "))
    }
}

/// Turns a natural-language tool input into typed fields with one
/// low-temperature model call (plus one retry on schema mismatch).
pub fn extract_tool_args(
    instruction: &str,
    schema: &[FieldSpec],
    gateway: &Gateway,
) -> Result<FieldMap, ExtractionError> {
    let fields: Vec<String> = schema
        .iter()
        .map(|f| {
            let kind = match f.kind {
                FieldKind::Text => "string",
                FieldKind::Time => "time as HH:MM (24-hour)",
                FieldKind::Identifier => "identifier string",
            };
            format!("- \"{}\" ({kind}): {}", f.name, f.description)
        })
        .collect();
    let system = format!(
        "You convert a request into a JSON object for a database query.\n\
         Return only a JSON object with exactly these fields:\n{}\n\
         Use only information present in the request.",
        fields.join("\n")
    );
    let messages = vec![
        ChatMessage::system(system),
        ChatMessage::user(format!("Extract the query fields from: {instruction}")),
    ];
    complete_json(gateway, messages, &CompletionParams::strict(), |map| {
        validate_fields(map, schema)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trip_schema() -> Vec<FieldSpec> {
        vec![FieldSpec::new("trip_id", FieldKind::Identifier, "the trip id")]
    }

    #[test]
    fn finds_objects_in_noise() {
        let m = find_json_object("Sure!\n```json\n{\"a\": \"}{\", \"b\": {\"c\": 1}}\n```").unwrap();
        assert_eq!(m["a"], "}{");
        assert!(find_json_object("no json {here").is_none());
        let m = find_json_object("{broken} then {\"ok\":true}").unwrap();
        assert_eq!(m["ok"], true);
    }

    #[test]
    fn extracts_trip_id() {
        let (gw, backend) = Gateway::scripted([r#"{"trip_id":"LE-101"}"#]);
        let out = extract_tool_args("the trip with id LE-101", &trip_schema(), &gw).unwrap();
        assert_eq!(out["trip_id"], FieldValue::Identifier("LE-101".into()));
        assert_eq!(backend.calls()[0].params.temperature, 0.0);
    }

    #[test]
    fn wrong_field_twice_is_invalid() {
        let (gw, backend) = Gateway::scripted([r#"{"trip":"LE-101"}"#, r#"{"trip":"LE-101"}"#]);
        let err = extract_tool_args("the trip with id LE-101", &trip_schema(), &gw).unwrap_err();
        assert!(matches!(err, ExtractionError::Invalid(ref m) if m.contains("missing field \"trip_id\"")));
        let calls = backend.calls();
        assert_eq!(calls.len(), 2);
        let retry = calls[1].messages.last().unwrap();
        assert!(retry.content.contains("unexpected field \"trip\""));
    }

    #[test]
    fn retry_recovers() {
        let (gw, _) = Gateway::scripted(["no idea", r#"{"trip_id":"LE-105"}"#]);
        let out = extract_tool_args("LE-105 please", &trip_schema(), &gw).unwrap();
        assert_eq!(out["trip_id"].as_str(), Some("LE-105"));
    }

    #[test]
    fn typed_fields() {
        let schema = vec![
            FieldSpec::new("origin", FieldKind::Text, "o"),
            FieldSpec::new("after", FieldKind::Time, "t"),
        ];
        let ok: Map<String, Value> =
            serde_json::from_str(r#"{"origin":"Union Station","after":"8am"}"#).unwrap();
        let out = validate_fields(&ok, &schema).unwrap();
        assert_eq!(out["after"], FieldValue::Time(8 * 3600));
        let bad: Map<String, Value> =
            serde_json::from_str(r#"{"origin":"","after":"whenever"}"#).unwrap();
        let err = validate_fields(&bad, &schema).unwrap_err();
        assert!(err.contains("origin") && err.contains("after"));
    }

    #[test]
    fn gateway_errors_propagate() {
        let (gw, _) = Gateway::scripted(Vec::<String>::new());
        assert_eq!(
            extract_tool_args("x", &trip_schema(), &gw),
            Err(ExtractionError::Gateway(GatewayError::ScriptExhausted))
        );
    }
}
