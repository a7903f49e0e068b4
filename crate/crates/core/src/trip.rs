//! Conversational trip planning.
//!
//! A conversation gathers origin, destination, departure time and special
//! needs over several turns, then extracts one structured request, queries
//! the schedule, keeps the alerts that matter to the rider and renders a
//! suggestion from a fact block.
//!
//! Slot values must be traceable to what the rider actually wrote: a stop
//! name (or the full/short name it resolves to) or a time (or a time
//! expression resolving to the same clock time) must occur in the rider's
//! messages. Values that fail this check are never used.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::alerts::AlertEvent;
use crate::extract::{complete_json, ExtractionError};
use crate::gtfs::{Accessibility, GtfsFeed, StopLookupError, TripDetails};
use crate::llm::{ChatMessage, CompletionParams, Gateway, GatewayError, Role};
use crate::textmatch::{contains_phrase, contains_word, normalize};
use crate::time::{format_hhmm, parse_time_expr, time_mentions, ServiceSeconds};

/// Trips shown in one suggestion.
pub const MAX_SUGGESTIONS: usize = 3;

/// Canonical need tags and the rider words that imply them.
pub const NEED_SYNONYMS: &[(&str, &[&str])] = &[
    ("wheelchair", &["wheelchair", "accessible", "accessibility", "mobility", "step free", "elevator"]),
    ("bike", &["bike", "bikes", "bicycle", "bicycles", "cycling"]),
    ("stroller", &["stroller", "strollers", "pram", "buggy"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotState {
    #[default]
    Missing,
    /// The rider wrote the value as is.
    Stated,
    /// The value follows from what the rider wrote ("Union" → Union Station,
    /// "tomorrow morning" → 08:00).
    Inferred,
}

impl SlotState {
    pub fn is_filled(self) -> bool {
        self != Self::Missing
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopRef {
    /// As extracted from the conversation.
    pub mention: String,
    pub stop_id: String,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Completeness {
    pub origin: SlotState,
    pub destination: SlotState,
    pub departure_after: SlotState,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TripRequest {
    pub origin: Option<StopRef>,
    pub destination: Option<StopRef>,
    pub departure_after: Option<ServiceSeconds>,
    /// The time expression the value came from.
    pub departure_text: Option<String>,
    /// Canonical tags, sorted, e.g. `["bike", "wheelchair"]`.
    pub special_needs: Vec<String>,
    pub completeness: Completeness,
}

impl TripRequest {
    pub fn is_queryable(&self) -> bool {
        self.origin.is_some()
            && self.destination.is_some()
            && self.departure_after.is_some()
            && self.completeness.origin.is_filled()
            && self.completeness.destination.is_filled()
            && self.completeness.departure_after.is_filled()
    }

    pub fn needs(&self, tag: &str) -> bool {
        self.special_needs.iter().any(|n| n == tag)
    }

    pub fn missing_slots(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.completeness.origin.is_filled() {
            out.push("origin");
        }
        if !self.completeness.destination.is_filled() {
            out.push("destination");
        }
        if !self.completeness.departure_after.is_filled() {
            out.push("departure time");
        }
        out
    }

    /// Filled slots, one per line, for prompts.
    pub fn known_slots(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(o) = &self.origin {
            out.push(format!("origin = {} ({:?})", o.name, self.completeness.origin));
        }
        if let Some(d) = &self.destination {
            out.push(format!("destination = {} ({:?})", d.name, self.completeness.destination));
        }
        if let Some(t) = self.departure_after {
            out.push(format!(
                "departure time = after {} ({:?})",
                format_hhmm(t),
                self.completeness.departure_after
            ));
        }
        if !self.special_needs.is_empty() {
            out.push(format!("special needs = {}", self.special_needs.join(", ")));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Gathering,
    Querying,
    Suggesting,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConversationState {
    pub session_id: String,
    pub phase: Phase,
    pub history: Vec<ChatMessage>,
    pub partial: TripRequest,
}

impl ConversationState {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TripError {
    #[error("extraction invalid: {0}")]
    ExtractionInvalid(String),
    #[error("no stop named {0:?}")]
    UnknownStopName(String),
    #[error("{name:?} matches several stops: {}", candidates.join(", "))]
    AmbiguousStop { name: String, candidates: Vec<String> },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl TripError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::ExtractionInvalid(_) => "extraction_invalid",
            Self::UnknownStopName(_) => "unknown_stop",
            Self::AmbiguousStop { .. } => "ambiguous_stop",
            Self::Gateway(_) => "gateway_unavailable",
        }
    }
}

impl From<ExtractionError> for TripError {
    fn from(e: ExtractionError) -> Self {
        match e {
            ExtractionError::Invalid(m) => Self::ExtractionInvalid(m),
            ExtractionError::Gateway(g) => Self::Gateway(g),
        }
    }
}

impl From<StopLookupError> for TripError {
    fn from(e: StopLookupError) -> Self {
        match e {
            StopLookupError::Unknown(n) => Self::UnknownStopName(n),
            StopLookupError::Ambiguous { name, candidates } => Self::AmbiguousStop { name, candidates },
        }
    }
}

// ---- traceability ----

/// All rider-written text in `history`, joined.
pub fn rider_text(history: &[ChatMessage]) -> String {
    history
        .iter()
        .filter(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

fn stop_state(mention: &str, stop_name: &str, short: Option<&str>, text: &str) -> SlotState {
    if contains_phrase(text, mention) {
        SlotState::Stated
    } else if contains_phrase(text, stop_name) || short.is_some_and(|s| contains_phrase(text, s)) {
        SlotState::Inferred
    } else {
        SlotState::Missing
    }
}

fn time_state(raw: &str, t: ServiceSeconds, text: &str) -> SlotState {
    if contains_phrase(text, raw) {
        SlotState::Stated
    } else if time_mentions(text).contains(&t) {
        SlotState::Inferred
    } else {
        SlotState::Missing
    }
}

/// Maps a need to its canonical tag if the rider's text supports it.
pub fn traced_need(raw: &str, text: &str) -> Option<&'static str> {
    let wanted = normalize(raw);
    let (tag, words) = NEED_SYNONYMS
        .iter()
        .find(|(tag, words)| *tag == wanted || words.contains(&wanted.as_str()))?;
    words.iter().any(|w| contains_phrase(text, w) || contains_word(text, tag)).then_some(*tag)
}

/// Checks that every filled slot of `request` is supported by the rider's
/// messages in `history`. Returns the offending slots.
pub fn check_no_invention(request: &TripRequest, history: &[ChatMessage], feed: &GtfsFeed) -> Result<(), Vec<String>> {
    let text = rider_text(history);
    let mut bad = Vec::new();
    for (slot, stop) in [("origin", &request.origin), ("destination", &request.destination)] {
        if let Some(s) = stop {
            let short = feed.stop(&s.stop_id).and_then(|st| st.short_name());
            if !stop_state(&s.mention, &s.name, short.as_deref(), &text).is_filled() {
                bad.push(format!("{slot} {:?}", s.name));
            }
        }
    }
    if let Some(t) = request.departure_after {
        let raw = request.departure_text.clone().unwrap_or_else(|| format_hhmm(t));
        if !time_state(&raw, t, &text).is_filled() {
            bad.push(format!("departure time {}", format_hhmm(t)));
        }
    }
    for need in &request.special_needs {
        if traced_need(need, &text).is_none() {
            bad.push(format!("need {need:?}"));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad)
    }
}

// ---- extraction ----

/// Raw slot strings as returned by the model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct RawSlots {
    origin: Option<String>,
    destination: Option<String>,
    departure_after: Option<String>,
    special_needs: Vec<String>,
}

fn optional_string(map: &Map<String, Value>, key: &str, problems: &mut Vec<String>) -> Option<String> {
    match map.get(key) {
        None => {
            problems.push(format!("missing key {key:?}"));
            None
        }
        Some(Value::Null) => None,
        Some(Value::String(s)) if s.trim().is_empty() => None,
        Some(Value::String(s)) => Some(s.trim().to_string()),
        Some(other) => {
            problems.push(format!("{key:?} must be a string or null, got {other}"));
            None
        }
    }
}

fn parse_raw_slots(map: &Map<String, Value>, problems: &mut Vec<String>) -> RawSlots {
    let special_needs = match map.get("special_needs") {
        None => {
            problems.push("missing key \"special_needs\"".into());
            Vec::new()
        }
        Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|v| match v.as_str() {
                Some(s) => Some(s.trim().to_string()),
                None => {
                    problems.push(format!("special_needs entries must be strings, got {v}"));
                    None
                }
            })
            .filter(|s| !s.is_empty())
            .collect(),
        Some(other) => {
            problems.push(format!("\"special_needs\" must be a list, got {other}"));
            Vec::new()
        }
    };
    RawSlots {
        origin: optional_string(map, "origin", problems),
        destination: optional_string(map, "destination", problems),
        departure_after: optional_string(map, "departure_after", problems),
        special_needs,
    }
}

/// Returns a complaint for each slot the rider never supplied.
fn invention_problems(slots: &RawSlots, text: &str, feed: &GtfsFeed) -> Vec<String> {
    let mut out = Vec::new();
    for (key, value) in [("origin", &slots.origin), ("destination", &slots.destination)] {
        if let Some(v) = value {
            let (name, short) = match feed.resolve_stop(v) {
                Ok(stop) => (stop.name.clone(), stop.short_name()),
                Err(_) => (v.clone(), None),
            };
            if !stop_state(v, &name, short.as_deref(), text).is_filled() {
                out.push(format!("{key} {v:?} does not appear in the rider's messages"));
            }
        }
    }
    if let Some(raw) = &slots.departure_after {
        match parse_time_expr(raw) {
            None => out.push(format!("departure_after {raw:?} is not a time (use HH:MM)")),
            Some(t) if !time_state(raw, t, text).is_filled() => {
                out.push(format!("departure_after {raw:?} does not appear in the rider's messages"))
            }
            Some(_) => {}
        }
    }
    for need in &slots.special_needs {
        if traced_need(need, text).is_none() {
            out.push(format!("special need {need:?} does not appear in the rider's messages"));
        }
    }
    out
}

fn transcript(history: &[ChatMessage]) -> String {
    history
        .iter()
        .filter_map(|m| match m.role {
            Role::User => Some(format!("Rider: {}", m.content)),
            Role::Assistant => Some(format!("Assistant: {}", m.content)),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

const EXTRACT_SYSTEM: &str = "You turn a trip-planning conversation into a JSON object with exactly these keys:\n\
\"origin\": the station the rider leaves from,\n\
\"destination\": the station the rider goes to,\n\
\"departure_after\": the earliest departure time as HH:MM (24-hour),\n\
\"special_needs\": a list of needs such as \"wheelchair\" or \"bike\" (empty if none).\n\
Every value must be either stated by the rider or clearly inferred from the rider's messages. Never invent a value. Reply with only the JSON object.";

fn resolve_ref(feed: &GtfsFeed, mention: &str) -> Result<StopRef, TripError> {
    let stop = feed.resolve_stop(mention)?;
    Ok(StopRef {
        mention: mention.to_string(),
        stop_id: stop.stop_id.clone(),
        name: stop.name.clone(),
    })
}

fn canonical_needs(raw: &[String], text: &str) -> Vec<String> {
    let mut tags: Vec<String> = raw
        .iter()
        .filter_map(|n| traced_need(n, text))
        .map(str::to_string)
        .collect();
    tags.sort();
    tags.dedup();
    tags
}

/// One low-temperature extraction over the whole conversation. The
/// validator rejects missing keys, unparseable times and any value the
/// rider never supplied; the model gets one retry with the complaint.
pub fn extract_request(history: &[ChatMessage], feed: &GtfsFeed, gateway: &Gateway) -> Result<TripRequest, TripError> {
    let text = rider_text(history);
    if text.trim().is_empty() {
        return Err(TripError::ExtractionInvalid("no rider messages".into()));
    }
    let messages = vec![
        ChatMessage::system(EXTRACT_SYSTEM),
        ChatMessage::user(format!("Conversation:\n{}", transcript(history))),
    ];
    let slots = complete_json(gateway, messages, &CompletionParams::strict(), |map| {
        let mut problems = Vec::new();
        let slots = parse_raw_slots(map, &mut problems);
        for (key, v) in [
            ("origin", &slots.origin),
            ("destination", &slots.destination),
            ("departure_after", &slots.departure_after),
        ] {
            if v.is_none() && !problems.iter().any(|p| p.contains(key)) {
                problems.push(format!("{key:?} must not be empty"));
            }
        }
        problems.extend(invention_problems(&slots, &text, feed));
        if problems.is_empty() {
            Ok(slots)
        } else {
            Err(problems.join("; "))
        }
    })?;

    let origin = resolve_ref(feed, slots.origin.as_deref().unwrap_or_default())?;
    let destination = resolve_ref(feed, slots.destination.as_deref().unwrap_or_default())?;
    let raw_time = slots.departure_after.unwrap_or_default();
    let t = parse_time_expr(&raw_time).expect("validated");
    let short = |id: &str| feed.stop(id).and_then(|s| s.short_name());
    let completeness = Completeness {
        origin: stop_state(&origin.mention, &origin.name, short(&origin.stop_id).as_deref(), &text),
        destination: stop_state(&destination.mention, &destination.name, short(&destination.stop_id).as_deref(), &text),
        departure_after: time_state(&raw_time, t, &text),
    };
    Ok(TripRequest {
        origin: Some(origin),
        destination: Some(destination),
        departure_after: Some(t),
        departure_text: Some(raw_time),
        special_needs: canonical_needs(&slots.special_needs, &text),
        completeness,
    })
}

// ---- alerts ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevantAlert {
    pub alert: AlertEvent,
    pub rationale: String,
    /// False when the relevance check could not run or be parsed; the
    /// alert is then shown anyway.
    pub verified: bool,
}

/// Alerts naming the trip, its route or any stop it serves.
pub fn prefilter_alerts<'a>(trip: &TripDetails, alerts: &'a [AlertEvent]) -> Vec<&'a AlertEvent> {
    let stops: Vec<&str> = trip.stop_ids().collect();
    alerts
        .iter()
        .filter(|a| {
            a.trip_id.as_deref() == Some(trip.trip_id.as_str())
                || a.route_id.as_deref() == Some(trip.route_id.as_str())
                || a.stop_id.as_deref().is_some_and(|s| stops.contains(&s))
        })
        .collect()
}

/// Reads the last `relevant: ...` / `irrelevant: ...` line of a reply.
pub fn parse_verdict(reply: &str) -> Option<(bool, String)> {
    for line in reply.lines().rev() {
        let mut l = line.trim().trim_start_matches(['*', '-', ' ']);
        for prefix in ["verdict:", "answer:"] {
            if l.len() >= prefix.len() && l[..prefix.len()].eq_ignore_ascii_case(prefix) {
                l = l[prefix.len()..].trim_start();
            }
        }
        let lower = l.to_ascii_lowercase();
        for (word, relevant) in [("irrelevant", false), ("not relevant", false), ("relevant", true)] {
            if let Some(rest) = lower.strip_prefix(word) {
                let rest = &l[l.len() - rest.len()..];
                let rationale = rest.trim_start_matches([':', '-', '—', ' ', '.']).trim();
                return Some((relevant, rationale.to_string()));
            }
        }
    }
    None
}

const RELEVANCE_SYSTEM: &str = "You check whether a service alert matters to a rider's planned trip. \
Think step by step: which trip, route and stations does the alert concern, does the rider's trip use them at the affected time, and does the alert touch the rider's special needs? \
End with one line: \"relevant: <one-line reason>\" or \"irrelevant: <one-line reason>\".";

/// Keeps the alerts that matter for `trip`. Only alerts that survive the
/// deterministic pre-filter cost a model call; a failed or unreadable check
/// keeps the alert, marked unverified.
pub fn filter_relevant_alerts(
    trip: &TripDetails,
    request: &TripRequest,
    alerts: &[AlertEvent],
    gateway: &Gateway,
) -> Vec<RelevantAlert> {
    let needs = if request.special_needs.is_empty() {
        "none".to_string()
    } else {
        request.special_needs.join(", ")
    };
    let mut out = Vec::new();
    for alert in prefilter_alerts(trip, alerts) {
        let target = match (&alert.trip_id, &alert.stop_id) {
            (Some(t), _) => format!("trip {t}"),
            (None, Some(s)) => format!("station {s}"),
            _ => "the line".to_string(),
        };
        let messages = [
            ChatMessage::system(RELEVANCE_SYSTEM),
            ChatMessage::user(format!(
                "Rider's trip: {trip}\nRider's special needs: {needs}\nAlert {} on {target}: {} — {}",
                alert.alert_id,
                alert.status.describe(),
                alert.cause_text
            )),
        ];
        match gateway.complete(&messages, &CompletionParams::strict()) {
            Ok(reply) => match parse_verdict(&reply.text) {
                Some((true, rationale)) => out.push(RelevantAlert {
                    alert: alert.clone(),
                    rationale,
                    verified: true,
                }),
                Some((false, _)) => {}
                None => out.push(RelevantAlert {
                    alert: alert.clone(),
                    rationale: "unverified: relevance answer could not be read".into(),
                    verified: false,
                }),
            },
            Err(e) => out.push(RelevantAlert {
                alert: alert.clone(),
                rationale: format!("unverified: relevance check failed ({e})"),
                verified: false,
            }),
        }
    }
    out
}

// ---- suggestion ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripFact {
    pub trip: TripDetails,
    pub alerts: Vec<RelevantAlert>,
}

/// Everything the suggestion may say, shown to the rider next to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactBlock {
    pub request: TripRequest,
    pub trips: Vec<TripFact>,
}

impl FactBlock {
    pub fn trip_ids(&self) -> Vec<&str> {
        self.trips.iter().map(|t| t.trip.trip_id.as_str()).collect()
    }
}

impl fmt::Display for FactBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.request;
        let name = |s: &Option<StopRef>| s.as_ref().map_or("?", |s| s.name.as_str()).to_string();
        write!(
            f,
            "Request: {} to {} after {}",
            name(&r.origin),
            name(&r.destination),
            r.departure_after.map_or_else(|| "?".into(), format_hhmm)
        )?;
        if !r.special_needs.is_empty() {
            write!(f, "; needs: {}", r.special_needs.join(", "))?;
        }
        if self.trips.is_empty() {
            write!(f, "\nNo direct trips found.")?;
        }
        for (i, t) in self.trips.iter().enumerate() {
            write!(f, "\n{}. {}", i + 1, t.trip)?;
            for a in &t.alerts {
                write!(
                    f,
                    "\n   Alert {} ({}): {} — {}",
                    a.alert.alert_id,
                    a.alert.status.describe(),
                    a.alert.cause_text,
                    a.rationale
                )?;
            }
        }
        Ok(())
    }
}

/// Trips a rider with these needs can take.
pub fn suitable_trips(candidates: &[TripDetails], request: &TripRequest) -> Vec<TripDetails> {
    candidates
        .iter()
        .filter(|t| !request.needs("wheelchair") || t.wheelchair_accessible == Accessibility::Accessible)
        .take(MAX_SUGGESTIONS)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub reply: String,
    pub facts: FactBlock,
}

const SUGGEST_SYSTEM: &str = "You suggest trips to a transit rider. Use only the facts given; never add trips, stations or times that are not listed. \
Recommend the first suitable trip, mention any alert listed for it and what the rider should do, and respect the rider's special needs. Be brief and friendly.";

fn no_trips_reply(request: &TripRequest) -> String {
    let name = |s: &Option<StopRef>| s.as_ref().map_or("?", |s| s.name.as_str()).to_string();
    let mut reply = format!(
        "Sorry, no direct trips found from {} to {} after {}",
        name(&request.origin),
        name(&request.destination),
        request.departure_after.map_or_else(|| "?".into(), format_hhmm)
    );
    if request.needs("wheelchair") {
        reply.push_str(" that are wheelchair accessible");
    }
    reply.push_str(". Would you like to try a different time?");
    reply
}

/// Builds the fact block and asks the model to phrase it. With no suitable
/// trip the reply is fixed text and no call is made.
pub fn render_suggestion(
    candidates: &[TripDetails],
    request: &TripRequest,
    relevant_alerts: &[(String, Vec<RelevantAlert>)],
    gateway: &Gateway,
) -> Result<Suggestion, GatewayError> {
    let trips: Vec<TripFact> = suitable_trips(candidates, request)
        .into_iter()
        .map(|trip| {
            let alerts = relevant_alerts
                .iter()
                .find(|(id, _)| *id == trip.trip_id)
                .map(|(_, a)| a.clone())
                .unwrap_or_default();
            TripFact { trip, alerts }
        })
        .collect();
    let facts = FactBlock {
        request: request.clone(),
        trips,
    };
    if facts.trips.is_empty() {
        return Ok(Suggestion {
            reply: no_trips_reply(request),
            facts,
        });
    }
    let messages = [
        ChatMessage::system(SUGGEST_SYSTEM),
        ChatMessage::user(format!("Facts:\n{facts}")),
    ];
    let text = gateway.complete(&messages, &CompletionParams::strict())?.text;
    let reply = match text.trim() {
        "" => facts.to_string(),
        t => t.to_string(),
    };
    Ok(Suggestion { reply, facts })
}

// ---- conversation ----

pub struct TripDeps<'a> {
    pub feed: &'a GtfsFeed,
    pub alerts: &'a [AlertEvent],
    pub gateway: &'a Gateway,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripTurn {
    pub state: ConversationState,
    pub reply: String,
    pub facts: Option<FactBlock>,
    /// Set when the turn ended in an error reply.
    pub error_code: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Decision {
    Continue,
    Conclude,
}

#[derive(Debug, Clone)]
struct GatherReply {
    slots: RawSlots,
    decision: Decision,
    reply: String,
}

fn gathering_system(partial: &TripRequest) -> String {
    let known = partial.known_slots();
    let missing = partial.missing_slots();
    format!(
        "You are a trip-planning assistant for a commuter rail service. You need the rider's origin station, destination station, departure time and any special needs (wheelchair, bike, stroller).\n\
         Already known (never ask for these again): {}\n\
         Still missing: {}\n\
         Reply with only a JSON object with the keys \"origin\", \"destination\", \"departure_after\", \"special_needs\", \"decision\" and \"reply\".\n\
         Give a slot a value only if the rider said it or it clearly follows from the rider's messages; otherwise use null. \"special_needs\" is a list.\n\
         Set \"decision\" to \"conclude\" when origin, destination and departure time are all known and the rider does not want to add anything; otherwise \"continue\", with your follow-up question in \"reply\".",
        if known.is_empty() { "nothing".to_string() } else { known.join("; ") },
        if missing.is_empty() { "nothing".to_string() } else { missing.join(", ") },
    )
}

fn parse_gather(map: &Map<String, Value>) -> Result<GatherReply, String> {
    let mut problems = Vec::new();
    let slots = parse_raw_slots(map, &mut problems);
    let decision = match map.get("decision").and_then(Value::as_str).map(|s| s.trim().to_ascii_lowercase()) {
        Some(d) if d == "continue" => Some(Decision::Continue),
        Some(d) if d == "conclude" => Some(Decision::Conclude),
        _ => {
            problems.push("\"decision\" must be \"continue\" or \"conclude\"".into());
            None
        }
    };
    let reply = match map.get("reply") {
        Some(Value::String(s)) => s.trim().to_string(),
        None | Some(Value::Null) => String::new(),
        Some(other) => {
            problems.push(format!("\"reply\" must be a string, got {other}"));
            String::new()
        }
    };
    if decision == Some(Decision::Continue) && reply.is_empty() {
        problems.push("\"reply\" must hold the follow-up question".into());
    }
    match (problems.is_empty(), decision) {
        (true, Some(decision)) => Ok(GatherReply { slots, decision, reply }),
        _ => Err(problems.join("; ")),
    }
}

/// Folds traceable values from a gathering reply into `partial`. Untraceable
/// values are dropped so the slot stays as it was. A stop name the rider
/// did write but that matches no stop (or several) is returned as an error
/// so the rider can be asked to clarify.
fn merge_slots(partial: &mut TripRequest, slots: &RawSlots, text: &str, feed: &GtfsFeed) -> Option<TripError> {
    let mut lookup_error = None;
    let mut merge_stop = |value: &Option<String>, slot: &mut Option<StopRef>, state: &mut SlotState| {
        let Some(v) = value else { return };
        let stop = match feed.resolve_stop(v) {
            Ok(stop) => stop,
            Err(e) => {
                if contains_phrase(text, v) && lookup_error.is_none() {
                    lookup_error = Some(TripError::from(e));
                }
                return;
            }
        };
        let s = stop_state(v, &stop.name, stop.short_name().as_deref(), text);
        if s.is_filled() {
            *slot = Some(StopRef {
                mention: v.clone(),
                stop_id: stop.stop_id.clone(),
                name: stop.name.clone(),
            });
            *state = s;
        } else {
            tracing::debug!("dropping untraceable gathering slot");
        }
    };
    merge_stop(&slots.origin, &mut partial.origin, &mut partial.completeness.origin);
    merge_stop(&slots.destination, &mut partial.destination, &mut partial.completeness.destination);
    if let Some(raw) = &slots.departure_after {
        if let Some(t) = parse_time_expr(raw) {
            let s = time_state(raw, t, text);
            if s.is_filled() {
                partial.departure_after = Some(t);
                partial.departure_text = Some(raw.clone());
                partial.completeness.departure_after = s;
            }
        }
    }
    let mut needs = partial.special_needs.clone();
    needs.extend(canonical_needs(&slots.special_needs, text));
    needs.sort();
    needs.dedup();
    partial.special_needs = needs;
    lookup_error
}

fn error_reply(e: &TripError) -> String {
    match e {
        TripError::UnknownStopName(name) => {
            format!("I couldn't find a station called \"{name}\". Which station did you mean?")
        }
        TripError::AmbiguousStop { name, candidates } => {
            format!("\"{name}\" could be {}. Which one do you mean?", candidates.join(" or "))
        }
        TripError::ExtractionInvalid(_) => {
            "Sorry, I couldn't put your trip together. Could you restate where you're going from and to, and when?".into()
        }
        TripError::Gateway(_) => APOLOGY.into(),
    }
}

fn follow_up_question(partial: &TripRequest) -> String {
    match partial.missing_slots().first() {
        Some(&"origin") => "Which station will you be leaving from?".into(),
        Some(&"destination") => "Where would you like to go?".into(),
        _ => "What time would you like to leave?".into(),
    }
}

const APOLOGY: &str = "Sorry, I'm having trouble reaching the trip planner right now. Please try again in a moment.";

fn finish(mut state: ConversationState, user_message: &str, reply: String, facts: Option<FactBlock>, error_code: Option<&str>) -> TripTurn {
    state.history.push(ChatMessage::user(user_message));
    state.history.push(ChatMessage::assistant(reply.clone()));
    TripTurn {
        state,
        reply,
        facts,
        error_code: error_code.map(str::to_string),
    }
}

/// One rider turn. The returned state has the user message and the reply
/// appended to its history. On any failure the phase and slots are those
/// of the input state.
pub fn advance_conversation(state: &ConversationState, user_message: &str, deps: &TripDeps<'_>) -> TripTurn {
    let mut next = state.clone();
    if next.phase != Phase::Gathering {
        // A new message after a suggestion revises the request.
        next.phase = Phase::Gathering;
    }
    let mut history = next.history.clone();
    history.push(ChatMessage::user(user_message));
    let text = rider_text(&history);

    let mut messages = vec![ChatMessage::system(gathering_system(&next.partial))];
    messages.extend(
        history
            .iter()
            .filter(|m| matches!(m.role, Role::User | Role::Assistant))
            .cloned(),
    );
    let gathered = match complete_json(deps.gateway, messages, &CompletionParams::strict(), parse_gather) {
        Ok(g) => g,
        Err(ExtractionError::Gateway(e)) => {
            tracing::warn!(error = %e, "gathering call failed");
            return finish(state.clone(), user_message, APOLOGY.into(), None, Some("gateway_unavailable"));
        }
        Err(ExtractionError::Invalid(_)) => {
            let reply = "Sorry, I didn't quite get that. Where are you leaving from, where are you going, and when?";
            return finish(state.clone(), user_message, reply.into(), None, Some("extraction_invalid"));
        }
    };
    if let Some(e) = merge_slots(&mut next.partial, &gathered.slots, &text, deps.feed) {
        return finish(next, user_message, error_reply(&e), None, Some(e.code()));
    }

    if gathered.decision == Decision::Continue || !next.partial.is_queryable() {
        let reply = if gathered.decision == Decision::Continue {
            gathered.reply
        } else {
            follow_up_question(&next.partial)
        };
        return finish(next, user_message, reply, None, None);
    }

    let request = match extract_request(&history, deps.feed, deps.gateway) {
        Ok(r) => r,
        Err(e) => {
            let keep = if matches!(e, TripError::Gateway(_)) { state.clone() } else { next };
            return finish(keep, user_message, error_reply(&e), None, Some(e.code()));
        }
    };

    next.phase = Phase::Querying;
    let (origin, destination) = (
        request.origin.as_ref().expect("queryable"),
        request.destination.as_ref().expect("queryable"),
    );
    let candidates = if origin.stop_id == destination.stop_id {
        Vec::new()
    } else {
        deps.feed
            .next_departures(
                &origin.stop_id,
                &destination.stop_id,
                request.departure_after.expect("queryable"),
                usize::MAX,
            )
            .unwrap_or_default()
    };
    let shown = suitable_trips(&candidates, &request);
    let relevant: Vec<(String, Vec<RelevantAlert>)> = shown
        .iter()
        .map(|t| (t.trip_id.clone(), filter_relevant_alerts(t, &request, deps.alerts, deps.gateway)))
        .collect();

    next.phase = Phase::Suggesting;
    match render_suggestion(&shown, &request, &relevant, deps.gateway) {
        Ok(s) => {
            next.partial = request;
            next.phase = Phase::Done;
            finish(next, user_message, s.reply, Some(s.facts), None)
        }
        Err(e) => {
            tracing::warn!(error = %e, "suggestion call failed");
            finish(state.clone(), user_message, APOLOGY.into(), None, Some("gateway_unavailable"))
        }
    }
}
