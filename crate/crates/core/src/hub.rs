//! The assistant hub: one chat entry point that routes each message to the
//! trip advisor, the policy navigator or (for staff) the tweet writer, with
//! a single history shared by all three.
//!
//! Sessions live in a [`KvStore`]. A turn is computed on a copy of the
//! session and becomes visible only once the new record is written, so a
//! failed write leaves the stored session exactly as it was.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alerts::AlertEvent;
use crate::gtfs::GtfsFeed;
use crate::llm::{ChatMessage, CompletionParams, Gateway, Role};
use crate::policy::{answer_policy_query, Citation, PolicyAnswer, PolicyError, PolicyQueryOptions};
use crate::textmatch::{contains_word, normalize, tokens};
use crate::trip::{advance_conversation, ConversationState, FactBlock, Phase, TripDeps, TripRequest};
use crate::tweet::{
    compose_tweet, FormatMode, ReviewDecision, ReviewError, ReviewQueue, TweetDraft, TweetError,
    TweetOptions,
};
use crate::vector::VectorStore;

/// History messages shown to the router besides the new message.
pub const ROUTER_WINDOW: usize = 6;

const SESSION_PREFIX: &str = "session/";
const NEXT_SESSION_KEY: &str = "meta/next_session";
const QUEUE_KEY: &str = "review_queue";

// ---- persistence ----

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(String),
    #[error("store record is corrupt: {0}")]
    Corrupt(String),
    #[error("injected store fault")]
    Injected,
}

/// Minimal key-value contract. `put_many` is all-or-nothing.
pub trait KvStore: Send + Sync {
    fn get(&self, key: &str) -> Result<Option<String>, StoreError>;
    fn put_many(&self, records: &[(String, String)]) -> Result<(), StoreError>;
    fn keys(&self, prefix: &str) -> Result<Vec<String>, StoreError>;

    fn put(&self, key: &str, value: &str) -> Result<(), StoreError> {
        self.put_many(&[(key.to_string(), value.to_string())])
    }
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    map: Mutex<BTreeMap<String, String>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl KvStore for MemoryStore {
    fn get(&self, key: &str) -> Result<Option<String>, StoreError> {
        Ok(self.map.lock().unwrap_or_else(|p| p.into_inner()).get(key).cloned())
    }

    fn put_many(&self, records: &[(String, String)]) -> Result<(), StoreError> {
        let mut map = self.map.lock().unwrap_or_else(|p| p.into_inner());
        for (k, v) in records {
            map.insert(k.clone(), v.clone());
        }
        Ok(())
    }

    fn keys(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        let map = self.map.lock().unwrap_or_else(|p| p.into_inner());
        Ok(map.keys().filter(|k| k.starts_with(prefix)).cloned().collect())
    }
}

const FILE_HEADER: &str = r#"{"format":"transittalk-kv","version":1}"#;

#[derive(Serialize, Deserialize)]
struct FileRecord {
    key: String,
    value: String,
}

/// Single-file store: a header line, then one JSON line per record, sorted
/// by key. Every write rewrites the file through a temporary sibling and a
/// rename, so a crash leaves either the old or the new file.
#[derive(Debug)]
pub struct FileStore {
    path: PathBuf,
    map: Mutex<BTreeMap<String, String>>,
}

impl FileStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut map = BTreeMap::new();
        match fs::read_to_string(&path) {
            Ok(text) => {
                let mut lines = text.lines();
                match lines.next() {
                    Some(h) if h.trim() == FILE_HEADER => {}
                    None => {}
                    Some(other) => {
                        return Err(StoreError::Corrupt(format!("unexpected header {other:?}")))
                    }
                }
                for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let rec: FileRecord = serde_json::from_str(line)
                        .map_err(|e| StoreError::Corrupt(format!("line {}: {e}", n + 2)))?;
                    map.insert(rec.key, rec.value);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(StoreError::Io(e.to_string())),
        }
        Ok(Self {
            path,
            map: Mutex::new(map),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_file(&self, map: &BTreeMap<String, String>) -> Result<(), StoreError> {
        let io = |e: std::io::Error| StoreError::Io(e.to_string());
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut out = String::from(FILE_HEADER);
        out.push('\n');
        for (key, value) in map {
            let rec = FileRecord {
                key: key.clone(),
                value: value.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).map_err(|e| StoreError::Io(e.to_string()))?);
            out.push('\n');
        }
        let tmp = self.path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(out.as_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, &self.path).map_err(io)
    }
}

impl KvStore for FileStore {
    fn get(&self, key: &str) -> Result<Option<String>, StoreError> {
        Ok(self.map.lock().unwrap_or_else(|p| p.into_inner()).get(key).cloned())
    }

    fn put_many(&self, records: &[(String, String)]) -> Result<(), StoreError> {
        let mut map = self.map.lock().unwrap_or_else(|p| p.into_inner());
        let mut next = map.clone();
        for (k, v) in records {
            next.insert(k.clone(), v.clone());
        }
        self.write_file(&next)?;
        *map = next;
        Ok(())
    }

    fn keys(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        let map = self.map.lock().unwrap_or_else(|p| p.into_inner());
        Ok(map.keys().filter(|k| k.starts_with(prefix)).cloned().collect())
    }
}

/// Test double that fails writes on demand.
pub struct FaultyStore {
    inner: Arc<dyn KvStore>,
    /// Writes still allowed before failing; negative = unlimited.
    budget: AtomicI64,
    failures: AtomicUsize,
}

impl FaultyStore {
    pub fn new(inner: Arc<dyn KvStore>) -> Self {
        Self {
            inner,
            budget: AtomicI64::new(-1),
            failures: AtomicUsize::new(0),
        }
    }

    /// Lets `n` more writes through, then fails every write.
    pub fn fail_after(&self, n: u32) {
        self.budget.store(i64::from(n), Ordering::SeqCst);
    }

    pub fn heal(&self) {
        self.budget.store(-1, Ordering::SeqCst);
    }

    pub fn failures(&self) -> usize {
        self.failures.load(Ordering::SeqCst)
    }
}

impl KvStore for FaultyStore {
    fn get(&self, key: &str) -> Result<Option<String>, StoreError> {
        self.inner.get(key)
    }

    fn put_many(&self, records: &[(String, String)]) -> Result<(), StoreError> {
        let allowed = self
            .budget
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| match b {
                b if b < 0 => Some(b),
                0 => None,
                b => Some(b - 1),
            })
            .is_ok();
        if !allowed {
            self.failures.fetch_add(1, Ordering::SeqCst);
            return Err(StoreError::Injected);
        }
        self.inner.put_many(records)
    }

    fn keys(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        self.inner.keys(prefix)
    }
}

// ---- sessions ----

pub trait Clock: Send + Sync {
    /// Unix seconds.
    fn now(&self) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct FixedClock(AtomicI64);

impl FixedClock {
    pub fn new(t: i64) -> Self {
        Self(AtomicI64::new(t))
    }

    pub fn advance(&self, secs: i64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for FixedClock {
    fn now(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppTarget {
    TripAdvisor,
    PolicyNavigator,
    TweetWriter,
    Unclear,
}

impl AppTarget {
    pub fn label(self) -> &'static str {
        match self {
            Self::TripAdvisor => "trip_advisor",
            Self::PolicyNavigator => "policy_navigator",
            Self::TweetWriter => "tweet_writer",
            Self::Unclear => "unclear",
        }
    }

    /// Name shown to people.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::TripAdvisor => "Trip Advisor",
            Self::PolicyNavigator => "Policy Navigator",
            Self::TweetWriter => "Tweet Writer",
            Self::Unclear => "Assistant",
        }
    }

    /// Accepts the label in any case and spacing ("Trip Advisor",
    /// "trip_advisor", "TripAdvisor.").
    pub fn parse_label(raw: &str) -> Option<Self> {
        let line = raw.lines().map(str::trim).find(|l| !l.is_empty())?;
        let squashed: String = tokens(line).collect();
        let squashed = squashed.strip_prefix("label").unwrap_or(&squashed);
        match squashed {
            "tripadvisor" => Some(Self::TripAdvisor),
            "policynavigator" => Some(Self::PolicyNavigator),
            "tweetwriter" => Some(Self::TweetWriter),
            _ => None,
        }
    }
}

impl fmt::Display for AppTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallerRole {
    #[default]
    Rider,
    Staff,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    /// Every user and assistant message of every application, in order.
    pub history: Vec<ChatMessage>,
    /// Which application answered each turn.
    pub turn_apps: Vec<AppTarget>,
    /// Trip advisor state. Its own history is kept empty; the session
    /// history is handed in on each turn.
    pub trip: Option<ConversationState>,
    pub last_request: Option<TripRequest>,
    pub created_at: i64,
    pub updated_at: i64,
}

impl Session {
    pub fn new(session_id: impl Into<String>, now: i64) -> Self {
        Self {
            session_id: session_id.into(),
            history: Vec::new(),
            turn_apps: Vec::new(),
            trip: None,
            last_request: None,
            created_at: now,
            updated_at: now,
        }
    }

    /// Compact JSON with a fixed field order; stable across round trips.
    pub fn to_bytes(&self) -> String {
        serde_json::to_string(self).expect("session serializes")
    }

    pub fn from_bytes(text: &str) -> Result<Self, StoreError> {
        serde_json::from_str(text).map_err(|e| StoreError::Corrupt(e.to_string()))
    }

    pub fn is_planning_trip(&self) -> bool {
        self.trip.as_ref().is_some_and(|t| t.phase == Phase::Gathering)
    }
}

// ---- routing ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Routing {
    pub target: AppTarget,
    /// The classifier was unreachable and keywords decided.
    pub degraded: bool,
}

const ROUTER_SYSTEM: &str = "You route messages for a transit agency's digital assistant. Pick the application that should answer the newest message:\n\
trip_advisor - planning a journey: stations, departure times, which train to take, special needs for a specific trip.\n\
policy_navigator - rules and policies: fares, refunds, bicycles, pets, luggage, accessibility services, conduct.\n\
tweet_writer - agency staff drafting a social-media post about a service alert.\n\
Reply with only the label.";

const ROUTER_RETRY: &str = "That is not one of the labels. Reply with exactly one of: trip_advisor, policy_navigator, tweet_writer.";

fn transcript_line(m: &ChatMessage) -> Option<String> {
    match m.role {
        Role::User => Some(format!("Rider: {}", m.content)),
        Role::Assistant => Some(format!("Assistant: {}", m.content)),
        _ => None,
    }
}

/// Keyword routing used when the model is unreachable.
pub fn keyword_route(message: &str, planning_trip: bool) -> AppTarget {
    const TWEET: &[&str] = &["tweet", "post", "draft"];
    const POLICY: &[&str] = &[
        "policy", "policies", "allowed", "permitted", "rule", "rules", "fare", "fares", "refund",
        "refunds", "bike", "bikes", "bicycle", "bicycles", "pet", "pets", "dog", "luggage",
        "stroller", "ticket", "tickets", "price", "cost",
    ];
    const TRIP: &[&str] = &[
        "trip", "train", "from", "depart", "departure", "leave", "leaving", "arrive", "next",
        "schedule", "when", "tomorrow", "morning", "evening",
    ];
    let hits = |words: &[&str]| words.iter().filter(|w| contains_word(message, w)).count();
    let (tweet, policy, trip) = (hits(TWEET), hits(POLICY), hits(TRIP));
    if tweet > 0 && contains_word(message, "alert") {
        AppTarget::TweetWriter
    } else if planning_trip || trip > policy {
        AppTarget::TripAdvisor
    } else if policy > 0 {
        AppTarget::PolicyNavigator
    } else {
        AppTarget::Unclear
    }
}

/// Picks the application for `message`. One low-temperature classifier
/// call over the recent shared history, retried once on an invalid label.
/// A rider in the middle of giving trip details stays with the trip
/// advisor unless the classifier clearly says otherwise.
pub fn route_message(session: &Session, message: &str, gateway: &Gateway) -> Routing {
    let planning = session.is_planning_trip();
    let recent: Vec<String> = session.history[session.history.len().saturating_sub(ROUTER_WINDOW)..]
        .iter()
        .filter_map(transcript_line)
        .collect();
    let mut prompt = String::new();
    if !recent.is_empty() {
        prompt.push_str("Conversation so far:\n");
        prompt.push_str(&recent.join("\n"));
        prompt.push_str("\n\n");
    }
    if planning {
        prompt.push_str("The rider is in the middle of giving trip details to trip_advisor.\n\n");
    }
    prompt.push_str(&format!("Newest message: {message}"));
    let mut messages = vec![ChatMessage::system(ROUTER_SYSTEM), ChatMessage::user(prompt)];

    for attempt in 0..2 {
        match gateway.complete(&messages, &CompletionParams::strict()) {
            Ok(reply) => {
                if let Some(target) = AppTarget::parse_label(&reply.text) {
                    return Routing {
                        target,
                        degraded: false,
                    };
                }
                tracing::debug!(attempt, "router returned an invalid label");
                messages.push(ChatMessage::assistant(reply.text));
                messages.push(ChatMessage::user(ROUTER_RETRY));
            }
            Err(e) => {
                tracing::warn!(error = %e, "router unavailable, using keyword routing");
                return Routing {
                    target: keyword_route(message, planning),
                    degraded: true,
                };
            }
        }
    }
    Routing {
        target: if planning { AppTarget::TripAdvisor } else { AppTarget::Unclear },
        degraded: false,
    }
}

// ---- the hub ----

#[derive(Debug, Error)]
pub enum HubError {
    #[error("message is empty")]
    EmptyMessage,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no alert {0}")]
    UnknownAlert(String),
    #[error("staff role required")]
    Forbidden,
    #[error(transparent)]
    Tweet(#[from] TweetError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Shared, read-mostly resources the applications run against.
#[derive(Clone)]
pub struct HubDeps {
    pub feed: Arc<GtfsFeed>,
    pub alerts: Arc<Vec<AlertEvent>>,
    pub policies: Arc<RwLock<VectorStore>>,
    pub gateway: Gateway,
    pub tweet_options: TweetOptions,
    pub policy_options: PolicyQueryOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub session_id: String,
    pub reply: String,
    pub app: AppTarget,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub facts: Option<FactBlock>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub citations: Vec<Citation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draft: Option<TweetDraft>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_code: Option<String>,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubStatus {
    pub sessions: usize,
    pub stops: usize,
    pub trips: usize,
    pub alerts: usize,
    pub policy_chunks: usize,
    pub drafts: usize,
}

/// What a dispatched turn produced, before it is committed.
struct Outcome {
    reply: String,
    facts: Option<FactBlock>,
    citations: Vec<Citation>,
    draft: Option<TweetDraft>,
    error_code: Option<String>,
}

impl Outcome {
    fn text(reply: impl Into<String>, error_code: Option<&str>) -> Self {
        Self {
            reply: reply.into(),
            facts: None,
            citations: Vec::new(),
            draft: None,
            error_code: error_code.map(str::to_string),
        }
    }
}

const UNCLEAR_REPLY: &str = "Sorry, I'm not sure what you're asking. Could you rephrase? I can plan a trip or answer questions about our policies.";
const STAFF_ONLY_REPLY: &str = "Drafting service-alert posts is only available to agency staff. I can help you plan a trip or answer policy questions.";
const GATEWAY_REPLY: &str = "Sorry, I'm having trouble reaching the assistant right now. Please try again in a moment.";

pub struct Hub {
    deps: HubDeps,
    store: Arc<dyn KvStore>,
    clock: Arc<dyn Clock>,
    queue: ReviewQueue,
    session_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    id_lock: Mutex<()>,
    queue_lock: Mutex<()>,
}

impl Hub {
    /// Opens the hub over `store`, reloading the persisted review queue.
    pub fn open(deps: HubDeps, store: Arc<dyn KvStore>, clock: Arc<dyn Clock>) -> Result<Self, HubError> {
        let drafts: Vec<TweetDraft> = match store.get(QUEUE_KEY)? {
            Some(text) => serde_json::from_str(&text).map_err(|e| StoreError::Corrupt(e.to_string()))?,
            None => Vec::new(),
        };
        Ok(Self {
            deps,
            store,
            clock,
            queue: ReviewQueue::from_snapshot(drafts),
            session_locks: Mutex::new(HashMap::new()),
            id_lock: Mutex::new(()),
            queue_lock: Mutex::new(()),
        })
    }

    pub fn deps(&self) -> &HubDeps {
        &self.deps
    }

    pub fn queue(&self) -> &ReviewQueue {
        &self.queue
    }

    pub fn load_session(&self, session_id: &str) -> Result<Option<Session>, HubError> {
        match self.store.get(&format!("{SESSION_PREFIX}{session_id}"))? {
            Some(text) => Ok(Some(Session::from_bytes(&text)?)),
            None => Ok(None),
        }
    }

    fn session_lock(&self, session_id: &str) -> Arc<Mutex<()>> {
        self.session_locks
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .entry(session_id.to_string())
            .or_default()
            .clone()
    }

    fn new_session_id(&self) -> Result<String, HubError> {
        let _guard = self.id_lock.lock().unwrap_or_else(|p| p.into_inner());
        let next: u64 = match self.store.get(NEXT_SESSION_KEY)? {
            Some(v) => v.trim().parse().map_err(|_| StoreError::Corrupt(format!("session counter {v:?}")))?,
            None => 1,
        };
        self.store.put(NEXT_SESSION_KEY, &(next + 1).to_string())?;
        Ok(format!("S{next:06}"))
    }

    fn queue_record(&self) -> (String, String) {
        let drafts = self.queue.snapshot();
        (QUEUE_KEY.to_string(), serde_json::to_string(&drafts).expect("drafts serialize"))
    }

    /// One chat turn. An unknown or missing session id starts a new
    /// session. Turns of one session run one at a time; the session is
    /// written once at the end, or not at all.
    pub fn handle_message(
        &self,
        session_id: Option<&str>,
        message: &str,
        caller: CallerRole,
    ) -> Result<ChatReply, HubError> {
        let message = message.trim();
        if message.is_empty() {
            return Err(HubError::EmptyMessage);
        }
        if let Some(id) = session_id {
            let lock = self.session_lock(id);
            let guard = lock.lock().unwrap_or_else(|p| p.into_inner());
            if let Some(session) = self.load_session(id)? {
                return self.run_turn(session, message, caller, guard);
            }
        }
        let id = self.new_session_id()?;
        let lock = self.session_lock(&id);
        let guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let session = Session::new(id, self.clock.now());
        self.run_turn(session, message, caller, guard)
    }

    fn run_turn(
        &self,
        mut session: Session,
        message: &str,
        caller: CallerRole,
        _guard: std::sync::MutexGuard<'_, ()>,
    ) -> Result<ChatReply, HubError> {
        let routing = route_message(&session, message, &self.deps.gateway);
        let target = routing.target;
        let outcome = match target {
            AppTarget::TripAdvisor => self.trip_turn(&mut session, message),
            AppTarget::PolicyNavigator => {
                let o = self.policy_turn(message);
                push_turn(&mut session, message, &o.reply);
                o
            }
            AppTarget::TweetWriter if caller != CallerRole::Staff => {
                let o = Outcome::text(STAFF_ONLY_REPLY, Some("staff_only"));
                push_turn(&mut session, message, &o.reply);
                o
            }
            AppTarget::TweetWriter => {
                let o = self.tweet_turn(message);
                push_turn(&mut session, message, &o.reply);
                o
            }
            AppTarget::Unclear => {
                let o = Outcome::text(UNCLEAR_REPLY, Some("unclear"));
                push_turn(&mut session, message, &o.reply);
                o
            }
        };
        session.turn_apps.push(target);
        session.updated_at = self.clock.now();

        let mut records = vec![(format!("{SESSION_PREFIX}{}", session.session_id), session.to_bytes())];
        let mut draft = outcome.draft;
        let _queue_guard = self.queue_lock.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(d) = draft.take() {
            draft = Some(self.queue.submit(d));
            records.push(self.queue_record());
        }
        if let Err(e) = self.store.put_many(&records) {
            if let Some(d) = &draft {
                self.queue.withdraw(&d.draft_id);
            }
            tracing::error!(session = %session.session_id, error = %e, "turn not persisted");
            return Err(e.into());
        }
        Ok(ChatReply {
            session_id: session.session_id,
            reply: outcome.reply,
            app: target,
            facts: outcome.facts,
            citations: outcome.citations,
            draft,
            error_code: outcome.error_code,
            degraded: routing.degraded,
        })
    }

    fn trip_turn(&self, session: &mut Session, message: &str) -> Outcome {
        let mut state = session
            .trip
            .clone()
            .unwrap_or_else(|| ConversationState::new(session.session_id.clone()));
        state.history = session.history.clone();
        let deps = TripDeps {
            feed: &self.deps.feed,
            alerts: &self.deps.alerts,
            gateway: &self.deps.gateway,
        };
        let turn = advance_conversation(&state, message, &deps);
        let mut next = turn.state;
        session.history = std::mem::take(&mut next.history);
        session.trip = Some(next);
        if let Some(facts) = &turn.facts {
            session.last_request = Some(facts.request.clone());
        }
        Outcome {
            reply: turn.reply,
            facts: turn.facts,
            citations: Vec::new(),
            draft: None,
            error_code: turn.error_code,
        }
    }

    fn policy_turn(&self, message: &str) -> Outcome {
        match self.ask_policy(message, false) {
            Ok(answer) => Outcome {
                reply: answer.display_text(),
                facts: None,
                citations: answer.citations,
                draft: None,
                error_code: None,
            },
            Err(e) => policy_error_outcome(&e),
        }
    }

    fn tweet_turn(&self, message: &str) -> Outcome {
        let words: Vec<String> = tokens(message).collect();
        let Some(alert) = self
            .deps
            .alerts
            .iter()
            .find(|a| words.iter().any(|w| *w == normalize(&a.alert_id)))
        else {
            let ids: Vec<&str> = self.deps.alerts.iter().map(|a| a.alert_id.as_str()).collect();
            return Outcome::text(
                format!("Which alert should I draft a post for? Known alerts: {}.", ids.join(", ")),
                Some("alert_not_found"),
            );
        };
        let mode = if contains_word(message, "open") { FormatMode::Open } else { FormatMode::Preset };
        match compose_tweet(alert, mode, &self.deps.feed, &self.deps.gateway, &self.deps.tweet_options) {
            Ok(draft) => {
                let mut reply = format!("Draft for alert {} is waiting for review:\n\n{}", alert.alert_id, draft.text);
                if !draft.violations.is_empty() {
                    let list: Vec<String> = draft.violations.iter().map(|v| v.detail.clone()).collect();
                    reply.push_str(&format!("\n\nChecklist problems: {}", list.join("; ")));
                }
                Outcome {
                    draft: Some(draft),
                    ..Outcome::text(reply, None)
                }
            }
            Err(TweetError::AgentFailed(draft)) => Outcome {
                draft: Some(*draft),
                ..Outcome::text(
                    format!("I couldn't draft a post for alert {}; it is in the review queue for manual writing.", alert.alert_id),
                    Some("agent_failed"),
                )
            },
            Err(e) => Outcome::text(format!("I couldn't draft that post: {e}."), Some(tweet_error_code(&e))),
        }
    }

    /// Policy lookup outside any chat session.
    pub fn ask_policy(&self, query: &str, include_sources: bool) -> Result<PolicyAnswer, PolicyError> {
        let store = self.deps.policies.read().unwrap_or_else(|p| p.into_inner());
        let options = PolicyQueryOptions {
            include_sources,
            ..self.deps.policy_options
        };
        answer_policy_query(query, options, &store, &self.deps.gateway)
    }

    /// Drafts a post for a stored alert and queues it for review. A draft
    /// the model could not write is queued too, flagged for manual text.
    pub fn draft_tweet(&self, alert_id: &str, mode: FormatMode) -> Result<TweetDraft, HubError> {
        let alert = self
            .deps
            .alerts
            .iter()
            .find(|a| a.alert_id == alert_id)
            .ok_or_else(|| HubError::UnknownAlert(alert_id.to_string()))?;
        let draft = match compose_tweet(alert, mode, &self.deps.feed, &self.deps.gateway, &self.deps.tweet_options) {
            Ok(d) => d,
            Err(TweetError::AgentFailed(d)) => *d,
            Err(e) => return Err(e.into()),
        };
        let _guard = self.queue_lock.lock().unwrap_or_else(|p| p.into_inner());
        let stored = self.queue.submit(draft);
        if let Err(e) = self.store.put_many(&[self.queue_record()]) {
            self.queue.withdraw(&stored.draft_id);
            return Err(e.into());
        }
        Ok(stored)
    }

    pub fn drafts(&self) -> Vec<TweetDraft> {
        self.queue.list()
    }

    /// Approves or rejects a pending draft; a second decision on the same
    /// draft is a conflict.
    pub fn review(&self, draft_id: &str, decision: ReviewDecision, note: Option<String>) -> Result<TweetDraft, HubError> {
        let _guard = self.queue_lock.lock().unwrap_or_else(|p| p.into_inner());
        let before = self.queue.get(draft_id);
        let decided = self.queue.review(draft_id, decision, note)?;
        if let Err(e) = self.store.put_many(&[self.queue_record()]) {
            if let Some(b) = before {
                self.queue.restore(b);
            }
            return Err(e.into());
        }
        Ok(decided)
    }

    pub fn status(&self) -> Result<HubStatus, HubError> {
        Ok(HubStatus {
            sessions: self.store.keys(SESSION_PREFIX)?.len(),
            stops: self.deps.feed.stops().count(),
            trips: self.deps.feed.trips().count(),
            alerts: self.deps.alerts.len(),
            policy_chunks: self.deps.policies.read().unwrap_or_else(|p| p.into_inner()).len(),
            drafts: self.queue.len(),
        })
    }
}

fn push_turn(session: &mut Session, message: &str, reply: &str) {
    session.history.push(ChatMessage::user(message));
    session.history.push(ChatMessage::assistant(reply));
}

fn policy_error_outcome(e: &PolicyError) -> Outcome {
    match e {
        PolicyError::EmptyStore | PolicyError::EmptyCorpus(_) => {
            Outcome::text("I don't have any policy documents to search yet.", Some("no_policies"))
        }
        PolicyError::Gateway(_) => Outcome::text(GATEWAY_REPLY, Some("gateway_unavailable")),
        other => Outcome::text(format!("Sorry, I couldn't look that up: {other}."), Some("policy_error")),
    }
}

fn tweet_error_code(e: &TweetError) -> &'static str {
    match e {
        TweetError::UnsupportedAlert(_) => "unsupported_alert",
        TweetError::Feed(_) => "feed_error",
        TweetError::AgentFailed(_) => "agent_failed",
        TweetError::OverLength { .. } => "over_length",
        TweetError::Gateway(_) => "gateway_unavailable",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptEntry, ScriptedBackend, ScriptedFailure};

    #[test]
    fn labels_parse_loosely() {
        assert_eq!(AppTarget::parse_label("Trip Advisor"), Some(AppTarget::TripAdvisor));
        assert_eq!(AppTarget::parse_label("policy_navigator."), Some(AppTarget::PolicyNavigator));
        assert_eq!(AppTarget::parse_label("Label: tweet_writer"), Some(AppTarget::TweetWriter));
        assert_eq!(AppTarget::parse_label("WeatherApp"), None);
        assert_eq!(AppTarget::parse_label(""), None);
    }

    #[test]
    fn invalid_label_twice_is_unclear() {
        let (gw, backend) = Gateway::scripted(["WeatherApp", "WeatherApp"]);
        let r = route_message(&Session::new("S1", 0), "is it sunny?", &gw);
        assert_eq!(r.target, AppTarget::Unclear);
        assert_eq!(backend.calls().len(), 2);
        assert!(backend.calls()[1].messages.last().unwrap().content.contains("exactly one of"));
    }

    #[test]
    fn retry_recovers_and_gathering_defaults_to_trip() {
        let (gw, _) = Gateway::scripted(["no idea", "policy_navigator"]);
        assert_eq!(route_message(&Session::new("S1", 0), "bikes?", &gw).target, AppTarget::PolicyNavigator);

        let mut s = Session::new("S1", 0);
        s.trip = Some(ConversationState::new("S1"));
        let (gw, backend) = Gateway::scripted(["??", "WeatherApp"]);
        assert_eq!(route_message(&s, "around 8am please", &gw).target, AppTarget::TripAdvisor);
        assert!(backend.calls()[0].messages[1].content.contains("middle of giving trip details"));
    }

    #[test]
    fn router_sees_only_recent_history() {
        let mut s = Session::new("S1", 0);
        for i in 0..10 {
            s.history.push(ChatMessage::user(format!("question {i}")));
        }
        let (gw, backend) = Gateway::scripted(["trip_advisor"]);
        route_message(&s, "next", &gw);
        let prompt = &backend.calls()[0].messages[1].content;
        assert!(prompt.contains("question 4") && !prompt.contains("question 3"));
    }

    #[test]
    fn gateway_down_uses_keywords() {
        let gw = Gateway::new(ScriptedBackend::new([ScriptEntry::failing(ScriptedFailure::Timeout)]));
        let r = route_message(&Session::new("S1", 0), "Can I bring my bike?", &gw);
        assert_eq!(r, Routing { target: AppTarget::PolicyNavigator, degraded: true });
        assert_eq!(keyword_route("next train from Union tomorrow", false), AppTarget::TripAdvisor);
        assert_eq!(keyword_route("draft a tweet for alert A2", false), AppTarget::TweetWriter);
        assert_eq!(keyword_route("hello", false), AppTarget::Unclear);
        assert_eq!(keyword_route("hello", true), AppTarget::TripAdvisor);
    }

    #[test]
    fn file_store_round_trip_and_atomic_batches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kv.jsonl");
        let s = FileStore::open(&path).unwrap();
        s.put_many(&[("b".into(), "2".into()), ("a".into(), "line\nbreak \"q\"".into())]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let again = FileStore::open(&path).unwrap();
        assert_eq!(again.get("a").unwrap().as_deref(), Some("line\nbreak \"q\""));
        assert_eq!(again.keys("").unwrap(), ["a", "b"]);

        fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(FileStore::open(&path), Err(StoreError::Corrupt(_))));
    }

    #[test]
    fn faulty_store_budget() {
        let f = FaultyStore::new(Arc::new(MemoryStore::new()));
        f.fail_after(1);
        assert!(f.put("a", "1").is_ok());
        assert_eq!(f.put("b", "2"), Err(StoreError::Injected));
        assert_eq!(f.get("b").unwrap(), None);
        f.heal();
        assert!(f.put("b", "2").is_ok());
        assert_eq!(f.failures(), 1);
    }

    #[test]
    fn session_bytes_are_stable() {
        let mut s = Session::new("S000001", 1_700_000_000);
        s.history.push(ChatMessage::user("Ünïcode — \"quoted\"\nline"));
        s.turn_apps.push(AppTarget::PolicyNavigator);
        s.trip = Some(ConversationState::new("S000001"));
        let bytes = s.to_bytes();
        let back = Session::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }
}
