//! Tweet drafting from service alerts, preset-format validation and the
//! human review queue.
//!
//! Drafts are never published from here; a draft only becomes `Approved`
//! through [`ReviewQueue::review`].

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    run_agent, AgentAction, AgentConfig, AgentOutcome, AgentTrace, ToolRegistry, ToolSpec,
    TraceStep, OBSERVATION_LABEL,
};
use crate::alerts::{AlertEvent, AlertKind, AlertStatus};
use crate::extract::{extract_tool_args, FieldKind, FieldSpec};
use crate::gtfs::{GtfsError, GtfsFeed, Stop, TripDetails};
use crate::llm::{ChatMessage, CompletionParams, Gateway, GatewayError};
use crate::textmatch::contains_phrase;
use crate::time::{format_hhmm, time_mentions};

pub const TWEET_MAX_CHARS: usize = 280;
pub const DEFAULT_PROVIDER_HASHTAG: &str = "#GOtransit";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatMode {
    Preset,
    Open,
}

impl FormatMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Preset => "preset",
            Self::Open => "open",
        }
    }
}

impl std::str::FromStr for FormatMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "preset" => Ok(Self::Preset),
            "open" => Ok(Self::Open),
            other => Err(format!("unknown format mode {other:?} (expected preset or open)")),
        }
    }
}

/// How the model is prompted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Step-by-step reasoning with the schedule tools.
    #[default]
    ChainOfThought,
    /// One plain request with no tools and no reasoning instructions. Kept
    /// as the baseline the reasoning loop is compared against.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationRule {
    MissingOrigin,
    MissingDestination,
    MissingTime,
    MissingProviderHashtag,
    MissingRouteTag,
    MissingNextTrip,
    MissingStation,
    OverLength,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresetViolation {
    pub rule: ViolationRule,
    pub detail: String,
}

impl PresetViolation {
    fn new(rule: ViolationRule, detail: impl Into<String>) -> Self {
        Self {
            rule,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for PresetViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.rule, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TweetDraft {
    pub draft_id: String,
    pub alert_id: String,
    pub alert: AlertEvent,
    pub format_mode: FormatMode,
    pub style: PromptStyle,
    pub text: String,
    pub trace: AgentTrace,
    /// Checked when the draft was created; the text never changes.
    pub violations: Vec<PresetViolation>,
    pub review_status: ReviewStatus,
    pub reviewer_note: Option<String>,
    /// The model produced nothing usable; staff must write the text.
    pub needs_manual: bool,
    /// The draft this one revises, if any.
    pub revision_of: Option<String>,
}

impl TweetDraft {
    pub fn char_count(&self) -> usize {
        self.text.chars().count()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TweetError {
    #[error("alert cannot be drafted: {0}")]
    UnsupportedAlert(String),
    #[error(transparent)]
    Feed(#[from] GtfsError),
    /// The agent did not answer. The draft carries the trace and is flagged
    /// for manual authoring.
    #[error("agent failed: {:?}", .0.trace.outcome)]
    AgentFailed(Box<TweetDraft>),
    #[error("draft is {chars} characters after shortening")]
    OverLength { text: String, chars: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone)]
pub struct TweetOptions {
    pub provider_hashtag: String,
    /// Offset used when showing the alert time to the model.
    pub utc_offset_minutes: i32,
    pub style: PromptStyle,
    pub agent_budget: usize,
}

impl Default for TweetOptions {
    fn default() -> Self {
        Self {
            provider_hashtag: DEFAULT_PROVIDER_HASHTAG.to_string(),
            utc_offset_minutes: 0,
            style: PromptStyle::ChainOfThought,
            agent_budget: crate::agent::DEFAULT_STEP_BUDGET,
        }
    }
}

/// Schedule facts a draft is checked against, computed from the feed
/// without the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertFacts {
    pub trip: Option<TripDetails>,
    /// First trip over the same origin and destination departing strictly
    /// after the affected one; only looked up for on-hold and canceled trips.
    pub next_trip: Option<TripDetails>,
    pub station: Option<Stop>,
    pub route_tag: Option<String>,
}

impl AlertFacts {
    pub fn resolve(alert: &AlertEvent, feed: &GtfsFeed) -> Result<Self, TweetError> {
        let route_tag_of = |route_id: &str| feed.route(route_id).map(|r| r.hashtag());
        match alert.kind {
            AlertKind::TripAlert => {
                let trip_id = alert
                    .trip_id
                    .as_deref()
                    .ok_or_else(|| TweetError::UnsupportedAlert("trip alert without trip".into()))?;
                let trip = feed.trip_details(trip_id)?;
                let next_trip = if alert.status.needs_next_trip() {
                    feed.next_departures(
                        &trip.origin.stop_id,
                        &trip.destination.stop_id,
                        trip.departure() + 1,
                        1,
                    )?
                    .into_iter()
                    .next()
                } else {
                    None
                };
                Ok(Self {
                    route_tag: route_tag_of(&trip.route_id),
                    trip: Some(trip),
                    next_trip,
                    station: None,
                })
            }
            AlertKind::StationAlert => {
                let stop_id = alert
                    .stop_id
                    .as_deref()
                    .ok_or_else(|| TweetError::UnsupportedAlert("station alert without stop".into()))?;
                let station = feed
                    .stop(stop_id)
                    .ok_or_else(|| GtfsError::UnknownStop(stop_id.to_string()))?
                    .clone();
                Ok(Self {
                    trip: None,
                    next_trip: None,
                    station: Some(station),
                    route_tag: alert.route_id.as_deref().and_then(route_tag_of),
                })
            }
        }
    }
}

/// Case-insensitive hashtag match that does not accept a longer tag
/// (`#GOtransitNews` does not count as `#GOtransit`).
pub fn has_hashtag(text: &str, tag: &str) -> bool {
    let tag = format!("#{}", tag.trim_start_matches('#')).to_lowercase();
    let lower = text.to_lowercase();
    lower.match_indices(&tag).any(|(at, _)| {
        !lower[at + tag.len()..]
            .chars()
            .next()
            .is_some_and(|c| c.is_alphanumeric() || c == '_')
    })
}

fn mentions_stop(text: &str, name: &str, short: Option<&str>) -> bool {
    contains_phrase(text, name) || short.is_some_and(|s| contains_phrase(text, s))
}

fn length_violation(text: &str) -> Option<PresetViolation> {
    let chars = text.chars().count();
    (chars > TWEET_MAX_CHARS).then(|| {
        PresetViolation::new(
            ViolationRule::OverLength,
            format!("{chars} characters, limit {TWEET_MAX_CHARS}"),
        )
    })
}

fn hashtag_violation(text: &str, provider_hashtag: &str) -> Option<PresetViolation> {
    (!has_hashtag(text, provider_hashtag)).then(|| {
        PresetViolation::new(
            ViolationRule::MissingProviderHashtag,
            format!("no {provider_hashtag} tag"),
        )
    })
}

/// Checks a draft against the preset checklist. An empty result means the
/// draft is compliant.
pub fn validate_preset(
    text: &str,
    alert: &AlertEvent,
    facts: &AlertFacts,
    provider_hashtag: &str,
) -> Vec<PresetViolation> {
    use ViolationRule::*;
    let mut out = Vec::new();
    let mentioned = time_mentions(text);
    if let Some(trip) = &facts.trip {
        let stop_named = |call: &crate::gtfs::StopCall| {
            let short = Stop {
                stop_id: call.stop_id.clone(),
                name: call.stop_name.clone(),
                wheelchair_boarding: Default::default(),
            }
            .short_name();
            mentions_stop(text, &call.stop_name, short.as_deref())
        };
        if !stop_named(&trip.origin) {
            out.push(PresetViolation::new(
                MissingOrigin,
                format!("origin {} not mentioned", trip.origin.stop_name),
            ));
        }
        if !stop_named(&trip.destination) {
            out.push(PresetViolation::new(
                MissingDestination,
                format!("destination {} not mentioned", trip.destination.stop_name),
            ));
        }
        let missing: Vec<String> = [trip.departure(), trip.arrival()]
            .into_iter()
            .filter(|t| !mentioned.contains(t))
            .map(format_hhmm)
            .collect();
        if !missing.is_empty() {
            out.push(PresetViolation::new(
                MissingTime,
                format!("time {} not mentioned", missing.join(" and ")),
            ));
        }
    }
    if let Some(station) = &facts.station {
        if !mentions_stop(text, &station.name, station.short_name().as_deref()) {
            out.push(PresetViolation::new(
                MissingStation,
                format!("station {} not mentioned", station.name),
            ));
        }
    }
    out.extend(hashtag_violation(text, provider_hashtag));
    if let Some(tag) = &facts.route_tag {
        if !has_hashtag(text, tag) {
            out.push(PresetViolation::new(MissingRouteTag, format!("no {tag} tag")));
        }
    }
    if alert.status.needs_next_trip() {
        if let Some(next) = &facts.next_trip {
            if !mentioned.contains(&next.departure()) {
                out.push(PresetViolation::new(
                    MissingNextTrip,
                    format!(
                        "next trip {} at {} not mentioned",
                        next.trip_id,
                        format_hhmm(next.departure())
                    ),
                ));
            }
        }
    }
    out.extend(length_violation(text));
    out
}

/// The reduced checklist for open-format drafts.
pub fn validate_open(text: &str, provider_hashtag: &str) -> Vec<PresetViolation> {
    hashtag_violation(text, provider_hashtag)
        .into_iter()
        .chain(length_violation(text))
        .collect()
}

pub fn validate_draft(
    mode: FormatMode,
    text: &str,
    alert: &AlertEvent,
    facts: &AlertFacts,
    provider_hashtag: &str,
) -> Vec<PresetViolation> {
    match mode {
        FormatMode::Preset => validate_preset(text, alert, facts, provider_hashtag),
        FormatMode::Open => validate_open(text, provider_hashtag),
    }
}

// ---- prompts ----

const COT_SEGMENT: &str = "You help the communications staff of a transit agency write tweets about service alerts.\n\
Work step by step. First look up the affected trip to learn its line, origin, destination and times. \
Then decide whether riders need an alternative; if they do, look up the next available trip between the same origin and destination, departing after the affected trip. \
Only state facts you read in an Observation. When you have every fact, write the tweet as your Final Answer. \
The tweet must be at most 280 characters.";

fn preset_segment(provider_hashtag: &str) -> String {
    format!(
        "Write the tweet in this exact format:\n\
         <STATUS>: <line hashtag> trip <trip id> from <origin> (<departure HH:MM>) to <destination> (<arrival HH:MM>) is <status>[ due to <cause>].\n\
         Next trip: <trip id> departs <origin> at <HH:MM>.   (only when a next trip was looked up)\n\
         {provider_hashtag}\n\
         The line hashtag is # followed by the line name without spaces, e.g. #LakeshoreEast. \
         Use 24-hour times. Add no emojis and no other hashtags."
    )
}

fn open_segment(provider_hashtag: &str) -> String {
    format!(
        "Compose the tweet freely. You may embellish it with emojis and add comforting information for riders. \
         Always include {provider_hashtag}."
    )
}

const STATION_SEGMENT: &str = "For a station notice no trip lookup is needed: name the station, say what is affected, and end with the provider hashtag.";

fn format_timestamp(ts: i64, offset_minutes: i32) -> String {
    let offset = FixedOffset::east_opt(offset_minutes * 60)
        .unwrap_or_else(|| FixedOffset::east_opt(0).expect("zero offset"));
    match DateTime::from_timestamp(ts, 0) {
        Some(dt) => format!("{} (UTC{})", dt.with_timezone(&offset).format("%Y-%m-%d %H:%M"), offset),
        None => format!("epoch {ts}"),
    }
}

/// The user message describing the alert.
pub fn alert_task(alert: &AlertEvent, feed: &GtfsFeed, options: &TweetOptions) -> String {
    let mut lines = vec![format!(
        "Service alert {} issued {}.",
        alert.alert_id,
        format_timestamp(alert.timestamp, options.utc_offset_minutes)
    )];
    if let Some(trip) = &alert.trip_id {
        lines.push(format!("Affected trip: {trip}"));
    }
    if let Some(stop) = &alert.stop_id {
        let name = feed.stop(stop).map_or(stop.as_str(), |s| s.name.as_str());
        lines.push(format!("Affected station: {name} ({stop})"));
    }
    lines.push(format!("Status: {}", alert.status.describe()));
    if !alert.cause_text.is_empty() {
        lines.push(format!("Details: {}", alert.cause_text));
    }
    if alert.status.needs_next_trip() {
        lines.push(
            "Riders need an alternative: look up the next available trip and include it.".into(),
        );
    }
    lines.join("\n")
}

fn trip_id_schema() -> Vec<FieldSpec> {
    vec![FieldSpec::new("trip_id", FieldKind::Identifier, "the trip id, e.g. LE-101")]
}

fn next_trip_schema() -> Vec<FieldSpec> {
    vec![
        FieldSpec::new("origin", FieldKind::Text, "name of the station the rider leaves from"),
        FieldSpec::new("destination", FieldKind::Text, "name of the station the rider goes to"),
        FieldSpec::new("after", FieldKind::Time, "the time after which to depart"),
    ]
}

/// The two schedule tools. Each turns its free-text input into a query with
/// one extraction call on `gateway`.
pub fn schedule_tools(feed: Arc<GtfsFeed>, gateway: Gateway) -> ToolRegistry {
    let mut tools = ToolRegistry::new();
    let (f, g) = (feed.clone(), gateway.clone());
    tools
        .register(
            ToolSpec::new(
                "find_trip_info",
                "Looks up a trip: line, origin, destination, stops and times.",
                "a sentence naming the trip id",
                move |input| {
                    let args = extract_tool_args(input, &trip_id_schema(), &g).map_err(|e| e.to_string())?;
                    let trip_id = args["trip_id"].to_string();
                    f.trip_details(&trip_id).map(|t| t.to_string()).map_err(|e| e.to_string())
                },
            )
            .expect("valid tool"),
        )
        .expect("unique tool");
    tools
        .register(
            ToolSpec::new(
                "find_next_available_trip",
                "Finds the next direct trip between two stations departing after a time.",
                "a sentence with origin station, destination station and time",
                move |input| {
                    let args = extract_tool_args(input, &next_trip_schema(), &gateway)
                        .map_err(|e| e.to_string())?;
                    let origin = feed
                        .resolve_stop(&args["origin"].to_string())
                        .map_err(|e| e.to_string())?;
                    let destination = feed
                        .resolve_stop(&args["destination"].to_string())
                        .map_err(|e| e.to_string())?;
                    let after = args["after"].as_time().expect("time field");
                    let found = feed
                        .next_departures(&origin.stop_id, &destination.stop_id, after + 1, 1)
                        .map_err(|e| e.to_string())?;
                    Ok(match found.first() {
                        Some(t) => t.to_string(),
                        None => format!(
                            "no direct trip from {} to {} after {}",
                            origin.name,
                            destination.name,
                            format_hhmm(after)
                        ),
                    })
                },
            )
            .expect("valid tool"),
        )
        .expect("unique tool");
    tools
}

fn clean_answer(text: &str) -> String {
    let t = text.trim();
    let t = t
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(t);
    t.trim().to_string()
}

fn shorten(text: &str, gateway: &Gateway) -> Result<String, TweetError> {
    let messages = [
        ChatMessage::system("You edit tweets for a transit agency."),
        ChatMessage::user(format!(
            "Shorten this tweet to at most {TWEET_MAX_CHARS} characters. Keep every station, time and hashtag.\n\n{text}"
        )),
    ];
    let reply = gateway.complete(&messages, &CompletionParams::strict())?;
    Ok(clean_answer(&reply.text))
}

fn params_for(mode: FormatMode) -> CompletionParams {
    match mode {
        FormatMode::Preset => CompletionParams::strict(),
        FormatMode::Open => CompletionParams::creative(),
    }
}

fn base_draft_id(alert_id: &str, mode: FormatMode) -> String {
    format!("{alert_id}-{}", mode.as_str())
}

fn direct_trace(text: &str) -> AgentTrace {
    AgentTrace {
        steps: vec![TraceStep {
            thought: String::new(),
            action: AgentAction::FinalAnswer(text.to_string()),
            observation: None,
        }],
        outcome: AgentOutcome::Answered(text.to_string()),
        step_count: 1,
    }
}

/// Drafts a tweet for `alert`. The draft comes back `Pending` with its
/// checklist result attached; nothing is queued here.
pub fn compose_tweet(
    alert: &AlertEvent,
    mode: FormatMode,
    feed: &Arc<GtfsFeed>,
    gateway: &Gateway,
    options: &TweetOptions,
) -> Result<TweetDraft, TweetError> {
    let facts = AlertFacts::resolve(alert, feed)?;
    let task = alert_task(alert, feed, options);

    let trace = match options.style {
        PromptStyle::ChainOfThought => {
            let mut system = format!(
                "{COT_SEGMENT}\n\n{}",
                match mode {
                    FormatMode::Preset => preset_segment(&options.provider_hashtag),
                    FormatMode::Open => open_segment(&options.provider_hashtag),
                }
            );
            if alert.kind == AlertKind::StationAlert {
                system = format!("{system}\n{STATION_SEGMENT}");
            }
            let tools = schedule_tools(feed.clone(), gateway.clone());
            let config = AgentConfig {
                budget: options.agent_budget,
                params: params_for(mode).with_stop(OBSERVATION_LABEL),
            };
            run_agent(&task, &system, &tools, gateway, &config)
        }
        PromptStyle::Direct => {
            let messages = [
                ChatMessage::system("You write tweets for a transit agency."),
                ChatMessage::user(format!("Write a tweet about this alert.\n{task}")),
            ];
            let text = gateway.complete(&messages, &params_for(mode))?.text;
            direct_trace(&clean_answer(&text))
        }
    };

    let mut draft = TweetDraft {
        draft_id: base_draft_id(&alert.alert_id, mode),
        alert_id: alert.alert_id.clone(),
        alert: alert.clone(),
        format_mode: mode,
        style: options.style,
        text: String::new(),
        trace,
        violations: Vec::new(),
        review_status: ReviewStatus::Pending,
        reviewer_note: None,
        needs_manual: false,
        revision_of: None,
    };

    let Some(answer) = draft.trace.answer().map(clean_answer).filter(|a| !a.is_empty()) else {
        tracing::warn!(alert = %alert.alert_id, outcome = ?draft.trace.outcome, "tweet agent failed");
        draft.needs_manual = true;
        draft.violations = validate_draft(mode, "", alert, &facts, &options.provider_hashtag);
        return Err(TweetError::AgentFailed(Box::new(draft)));
    };

    let mut text = answer;
    if text.chars().count() > TWEET_MAX_CHARS {
        text = shorten(&text, gateway)?;
        let chars = text.chars().count();
        if chars > TWEET_MAX_CHARS {
            return Err(TweetError::OverLength { text, chars });
        }
    }
    draft.violations = validate_draft(mode, &text, alert, &facts, &options.provider_hashtag);
    draft.text = text;
    Ok(draft)
}

// ---- review queue ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewDecision {
    Approve,
    Reject,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReviewError {
    #[error("no draft {0}")]
    NotFound(String),
    /// The draft was already decided.
    #[error("draft {draft_id} is already {status:?}")]
    Conflict { draft_id: String, status: ReviewStatus },
    #[error("draft {draft_id} has unresolved violations")]
    Blocked {
        draft_id: String,
        violations: Vec<PresetViolation>,
    },
    #[error("revised text is {0} characters")]
    OverLength(usize),
    #[error("cannot check revision: {0}")]
    Facts(String),
}

#[derive(Debug, Default)]
struct QueueInner {
    order: Vec<String>,
    drafts: HashMap<String, TweetDraft>,
}

impl QueueInner {
    fn insert(&mut self, mut draft: TweetDraft) -> TweetDraft {
        let base = base_draft_id(&draft.alert_id, draft.format_mode);
        let mut id = base.clone();
        let mut n = 1;
        while self.drafts.contains_key(&id) {
            n += 1;
            id = format!("{base}-{n}");
        }
        draft.draft_id = id.clone();
        self.order.push(id.clone());
        self.drafts.insert(id, draft.clone());
        draft
    }
}

/// Drafts awaiting or past human review. Decisions are compare-and-set on
/// `Pending`, so a draft changes state at most once.
#[derive(Debug, Default)]
pub struct ReviewQueue {
    inner: Mutex<QueueInner>,
}

impl ReviewQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_snapshot(drafts: Vec<TweetDraft>) -> Self {
        let mut inner = QueueInner::default();
        for d in drafts {
            inner.order.push(d.draft_id.clone());
            inner.drafts.insert(d.draft_id.clone(), d);
        }
        Self {
            inner: Mutex::new(inner),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, QueueInner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Adds a draft, assigning a unique id. Returns the stored draft.
    pub fn submit(&self, draft: TweetDraft) -> TweetDraft {
        self.lock().insert(draft)
    }

    pub fn get(&self, draft_id: &str) -> Option<TweetDraft> {
        self.lock().drafts.get(draft_id).cloned()
    }

    /// All drafts in submission order.
    pub fn list(&self) -> Vec<TweetDraft> {
        let inner = self.lock();
        inner.order.iter().map(|id| inner.drafts[id].clone()).collect()
    }

    pub fn snapshot(&self) -> Vec<TweetDraft> {
        self.list()
    }

    pub fn len(&self) -> usize {
        self.lock().order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn review(
        &self,
        draft_id: &str,
        decision: ReviewDecision,
        note: Option<String>,
    ) -> Result<TweetDraft, ReviewError> {
        let mut inner = self.lock();
        let draft = inner
            .drafts
            .get_mut(draft_id)
            .ok_or_else(|| ReviewError::NotFound(draft_id.to_string()))?;
        if draft.review_status != ReviewStatus::Pending {
            return Err(ReviewError::Conflict {
                draft_id: draft_id.to_string(),
                status: draft.review_status,
            });
        }
        if decision == ReviewDecision::Approve && (!draft.violations.is_empty() || draft.needs_manual) {
            return Err(ReviewError::Blocked {
                draft_id: draft_id.to_string(),
                violations: draft.violations.clone(),
            });
        }
        draft.review_status = match decision {
            ReviewDecision::Approve => ReviewStatus::Approved,
            ReviewDecision::Reject => ReviewStatus::Rejected,
        };
        draft.reviewer_note = note;
        Ok(draft.clone())
    }

    /// Undoes a [`submit`](Self::submit) whose persistence failed.
    pub(crate) fn withdraw(&self, draft_id: &str) {
        let mut inner = self.lock();
        inner.drafts.remove(draft_id);
        inner.order.retain(|id| id != draft_id);
    }

    /// Puts back a draft's earlier state after a failed write.
    pub(crate) fn restore(&self, draft: TweetDraft) {
        let mut inner = self.lock();
        if let Some(slot) = inner.drafts.get_mut(&draft.draft_id) {
            *slot = draft;
        }
    }

    /// Stores staff-edited text as a new `Pending` draft linked to the
    /// original; the original is left as it was.
    pub fn revise(
        &self,
        draft_id: &str,
        text: &str,
        feed: &GtfsFeed,
        provider_hashtag: &str,
    ) -> Result<TweetDraft, ReviewError> {
        let original = self
            .get(draft_id)
            .ok_or_else(|| ReviewError::NotFound(draft_id.to_string()))?;
        let text = text.trim().to_string();
        let chars = text.chars().count();
        if chars > TWEET_MAX_CHARS {
            return Err(ReviewError::OverLength(chars));
        }
        let facts = AlertFacts::resolve(&original.alert, feed)
            .map_err(|e| ReviewError::Facts(e.to_string()))?;
        let violations = validate_draft(
            original.format_mode,
            &text,
            &original.alert,
            &facts,
            provider_hashtag,
        );
        let revised = TweetDraft {
            text,
            violations,
            review_status: ReviewStatus::Pending,
            reviewer_note: None,
            needs_manual: false,
            revision_of: Some(original.draft_id.clone()),
            ..original
        };
        Ok(self.submit(revised))
    }
}

/// Whether an alert's status is one the drafting pipeline handles.
pub fn is_draftable(alert: &AlertEvent) -> bool {
    match alert.kind {
        AlertKind::TripAlert => alert.status != AlertStatus::Informational,
        AlertKind::StationAlert => true,
    }
}
