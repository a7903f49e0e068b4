//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use transittalk::alerts::{parse_alert_lines, AlertEvent};
use transittalk::gtfs::GtfsFeed;
use transittalk::llm::{Gateway, ScriptedBackend};
use transittalk::hub::{FixedClock, Hub, HubDeps, KvStore, MemoryStore};
use transittalk::policy::{ingest_policies, PolicyQueryOptions};
use transittalk::trip::{advance_conversation, ConversationState, TripDeps, TripTurn};
use transittalk::tweet::TweetOptions;
use transittalk::vector::{ChunkingConfig, VectorStore};

pub fn testdata() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../testdata")
}

pub fn feed() -> Arc<GtfsFeed> {
    Arc::new(GtfsFeed::load(testdata().join("mini_feed")).expect("mini feed loads"))
}

pub fn alerts() -> Vec<AlertEvent> {
    let text = std::fs::read_to_string(testdata().join("alerts.jsonl")).unwrap();
    parse_alert_lines(&text)
        .into_iter()
        .map(|(_, r)| r.expect("fixture alerts parse"))
        .collect()
}

pub fn alert(id: &str) -> AlertEvent {
    alerts().into_iter().find(|a| a.alert_id == id).unwrap()
}

pub fn scripted(script: &str) -> (Gateway, Arc<ScriptedBackend>) {
    let backend = Arc::new(
        ScriptedBackend::from_file(testdata().join("scripts").join(script))
            .unwrap_or_else(|e| panic!("{script}: {e}")),
    );
    (Gateway::from_arc(backend.clone()), backend)
}

/// A golden trip-planning conversation: the rider's turns and the script
/// that answers them.
pub struct Conversation {
    pub script: &'static str,
    pub turns: &'static [&'static str],
    pub wheelchair: bool,
}

pub const CONVERSATIONS: &[Conversation] = &[
    Conversation {
        script: "trip_oshawa_morning.txt",
        turns: &[
            "I want to go to Oshawa tomorrow morning",
            "From Union Station.",
            "No, that's everything, thanks.",
        ],
        wheelchair: false,
    },
    Conversation {
        script: "trip_early.txt",
        turns: &["Can I get a train from Union to Oshawa at 7am?"],
        wheelchair: false,
    },
    Conversation {
        script: "trip_wheelchair.txt",
        turns: &["Hi, I need to get from Union Station to Oshawa after 8:30. I use a wheelchair."],
        wheelchair: true,
    },
    Conversation {
        script: "trip_wheelchair_early.txt",
        turns: &["Can I get a train from Union to Oshawa at 7am? I'm in a wheelchair."],
        wheelchair: true,
    },
    Conversation {
        script: "trip_atlantis.txt",
        turns: &["Take me from Atlantis to Oshawa at 8"],
        wheelchair: false,
    },
];

pub fn conversation(script: &str) -> &'static Conversation {
    CONVERSATIONS.iter().find(|c| c.script == script).unwrap()
}

/// Replays a conversation; returns every turn and the backend for call
/// inspection.
pub fn run_conversation(c: &Conversation) -> (Vec<TripTurn>, Arc<ScriptedBackend>) {
    let feed = feed();
    let alerts = alerts();
    let (gateway, backend) = scripted(c.script);
    let deps = TripDeps {
        feed: &feed,
        alerts: &alerts,
        gateway: &gateway,
    };
    let mut state = ConversationState::new("S-test");
    let mut turns = Vec::new();
    for message in c.turns {
        let turn = advance_conversation(&state, message, &deps);
        state = turn.state.clone();
        turns.push(turn);
    }
    (turns, backend)
}

/// Three ways of asking the same bike question.
pub const BIKE_PARAPHRASES: [&str; 3] = [
    "Can I bring my bike on the train?",
    "Are bicycles allowed on GO trains?",
    "Is it okay to take my bicycle onboard?",
];

/// Rider turns of the golden hub session (policy question, then a trip).
pub const BIKE_SESSION: [&str; 3] = [
    "Can I bring my bike on the train?",
    "ok plan me a trip from Union to Oshawa with my bike",
    "around 8am please",
];

pub fn policy_store() -> VectorStore {
    let mut store = VectorStore::default();
    ingest_policies(testdata().join("policies"), &mut store, ChunkingConfig::default()).unwrap();
    store
}

pub fn hub_deps(gateway: Gateway) -> HubDeps {
    HubDeps {
        feed: feed(),
        alerts: Arc::new(alerts()),
        policies: Arc::new(RwLock::new(policy_store())),
        gateway,
        tweet_options: TweetOptions::default(),
        policy_options: PolicyQueryOptions::default(),
    }
}

/// Hub over a scripted gateway and the given store, with a frozen clock.
pub fn hub_with_store(script: &str, store: Arc<dyn KvStore>) -> (Hub, Arc<ScriptedBackend>) {
    let (gateway, backend) = scripted(script);
    let hub = Hub::open(hub_deps(gateway), store, Arc::new(FixedClock::new(1_700_000_000))).unwrap();
    (hub, backend)
}

pub fn hub(script: &str) -> (Hub, Arc<ScriptedBackend>) {
    hub_with_store(script, Arc::new(MemoryStore::new()))
}
