//! Acceptance checks, one line each. Runs as a plain binary so the report
//! is printed by `cargo test` without `--nocapture`; exits non-zero if any
//! check fails.

mod common;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use common::*;
use transittalk::agent::{
    parse_step, run_agent, AgentAction, AgentConfig, AgentOutcome, AgentTrace, ToolRegistry,
    ToolSpec,
};
use transittalk::hub::{AppTarget, CallerRole, FaultyStore, FileStore, FixedClock, Hub, KvStore, MemoryStore, Session};
use transittalk::llm::{parse_transcript, Gateway, Role, ScriptEntry, ScriptedBackend, ScriptedFailure};
use transittalk::policy::{answer_policy_query, PolicyQueryOptions};
use transittalk::textmatch::normalize;
use transittalk::trip::{check_no_invention, Phase, TripRequest, TripTurn};
use transittalk::tweet::{compose_tweet, FormatMode, PromptStyle, TweetOptions, ViolationRule};
use transittalk::vector::{cosine, ChunkingConfig, VectorStore};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

// ---- schedule queries against a brute-force scan ----

/// `(trip_id, stop_id, departure, arrival)` rows straight from the CSV.
fn raw_stop_times() -> Vec<(String, String, u32, u32, u32)> {
    let text = std::fs::read_to_string(testdata().join("mini_feed/stop_times.txt")).unwrap();
    let secs = |s: &str| {
        let p: Vec<u32> = s.split(':').map(|x| x.parse().unwrap()).collect();
        p[0] * 3600 + p[1] * 60 + p[2]
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            (f[0].to_string(), f[3].to_string(), secs(f[2]), secs(f[1]), f[4].parse().unwrap())
        })
        .collect()
}

fn brute_force(rows: &[(String, String, u32, u32, u32)], o: &str, d: &str, after: u32) -> Vec<(String, u32, u32)> {
    let trips: BTreeSet<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    let mut out = Vec::new();
    for t in trips {
        let mut calls: Vec<_> = rows.iter().filter(|r| r.0 == t).collect();
        calls.sort_by_key(|r| r.4);
        let oi = calls.iter().position(|r| r.1 == o);
        let di = calls.iter().position(|r| r.1 == d);
        if let (Some(oi), Some(di)) = (oi, di) {
            if oi < di && calls[oi].2 >= after {
                out.push((t.to_string(), calls[oi].2, calls[di].3));
            }
        }
    }
    out.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn gtfs_oracle() -> Check {
    let feed = feed();
    let rows = raw_stop_times();
    let stops: BTreeSet<String> = rows.iter().map(|r| r.1.clone()).collect();
    let started = Instant::now();
    let (mut queries, mut mismatches) = (0, 0);
    for o in &stops {
        for d in &stops {
            if o == d {
                continue;
            }
            for after in (6 * 3600..=10 * 3600).step_by(15 * 60) {
                let expected = brute_force(&rows, o, d, after);
                for limit in [1, 3, usize::MAX] {
                    queries += 1;
                    let got: Vec<(String, u32, u32)> = feed
                        .next_departures(o, d, after, limit)
                        .map_err(|e| e.to_string())?
                        .into_iter()
                        .map(|t| (t.trip_id.clone(), t.departure(), t.arrival()))
                        .collect();
                    let want: Vec<_> = expected.iter().take(limit).cloned().collect();
                    if got != want {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    let elapsed = started.elapsed();
    ensure!(mismatches == 0, "{mismatches} of {queries} queries differ from the scan");
    ensure!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    Ok(format!("{queries} queries, 0 mismatches, {:.1} ms", elapsed.as_secs_f64() * 1e3))
}

// ---- agent loop under adversarial scripts ----

#[derive(Debug, Clone)]
enum Move {
    Tool(&'static str, String),
    Hallucinated(&'static str, String),
    Unknown(String, String),
    MissingInput,
    Garbage(&'static str),
    Final(String),
    Fail,
}

const TOOLS: [&str; 3] = ["find_trip_info", "find_next_available_trip", "flaky_lookup"];
const INPUTS: [&str; 3] = ["LE-101", "LE-103", "Union to Oshawa after 08:00"];
const GARBAGE: [&str; 4] = [
    "I am not sure what to do here.",
    "",
    "The train is probably late, sorry!",
    "Thought: still thinking about it",
];

fn render(m: &Move) -> ScriptEntry {
    match m {
        Move::Tool(n, i) => ScriptEntry::text(format!("Thought: look it up\nAction: {n}\nAction Input: {i}")),
        Move::Hallucinated(n, i) => ScriptEntry::text(format!(
            "Thought: look it up\nAction: {n}\nAction Input: {i}\nObservation: Trip is running on time\nFinal Answer: all good"
        )),
        Move::Unknown(n, i) => ScriptEntry::text(format!("Thought: try this\nAction: {n}\nAction Input: {i}")),
        Move::MissingInput => ScriptEntry::text("Thought: hmm\nAction: find_trip_info"),
        Move::Garbage(g) => ScriptEntry::text(*g),
        Move::Final(a) => ScriptEntry::text(format!("Thought: I now know the final answer\nFinal Answer: {a}")),
        Move::Fail => ScriptEntry::failing(ScriptedFailure::Timeout),
    }
}

fn registry() -> ToolRegistry {
    let mut r = ToolRegistry::new();
    r.register(ToolSpec::new(TOOLS[0], "Trip details.", "a trip id", |i| Ok(format!("info[{i}]"))).unwrap())
        .unwrap();
    r.register(ToolSpec::new(TOOLS[1], "Next trip.", "origin, destination, time", |i| Ok(format!("next[{i}]"))).unwrap())
        .unwrap();
    r.register(ToolSpec::new(TOOLS[2], "Always fails.", "anything", |i| Err(format!("boom {i}"))).unwrap())
        .unwrap();
    r
}

/// Expected outcome, step count and observations, worked out from the
/// moves alone.
fn predict(moves: &[Move], budget: usize) -> (AgentOutcome, usize, Vec<String>) {
    let mut steps = 0;
    let mut recent: Vec<(String, String)> = Vec::new();
    let mut observations = Vec::new();
    let mut it = moves.iter();
    loop {
        if steps >= budget {
            return (AgentOutcome::StepBudgetExceeded, steps, observations);
        }
        steps += 1;
        let (name, input) = match it.next() {
            None | Some(Move::Fail) => return (AgentOutcome::GatewayFailed(String::new()), steps, observations),
            Some(Move::MissingInput) | Some(Move::Garbage(_)) => {
                return (AgentOutcome::ParseFailed(String::new()), steps, observations)
            }
            Some(Move::Final(a)) => return (AgentOutcome::Answered(a.clone()), steps, observations),
            Some(Move::Tool(n, i)) | Some(Move::Hallucinated(n, i)) => (n.to_string(), i.clone()),
            Some(Move::Unknown(n, i)) => (n.clone(), i.clone()),
        };
        let n = recent.len();
        if n >= 2 && recent[n - 1] == (name.clone(), input.clone()) && recent[n - 2] == (name.clone(), input.clone()) {
            return (AgentOutcome::LoopDetected, steps, observations);
        }
        observations.push(match name.as_str() {
            "find_trip_info" => format!("info[{input}]"),
            "find_next_available_trip" => format!("next[{input}]"),
            "flaky_lookup" => format!("tool error: boom {input}"),
            other => format!("unknown tool {other}; available: {}", TOOLS.join(", ")),
        });
        recent.push((name, input));
    }
}

fn random_move(rng: &mut ChaCha8Rng) -> Move {
    let input = INPUTS[rng.gen_range(0..INPUTS.len())].to_string();
    match rng.gen_range(0..20) {
        0..=8 => Move::Tool(TOOLS[rng.gen_range(0..TOOLS.len())], input),
        9..=10 => Move::Hallucinated(TOOLS[rng.gen_range(0..2)], input),
        11..=12 => Move::Unknown(["weather_api", "book_ticket", "find_trip"][rng.gen_range(0..3)].into(), input),
        13 => Move::MissingInput,
        14 => Move::Garbage(GARBAGE[rng.gen_range(0..GARBAGE.len())]),
        15 => Move::Fail,
        _ => Move::Final(format!("answer {}", rng.gen_range(0..100))),
    }
}

/// 50 scripts; every fifth forces one kind of misbehaviour in.
fn adversarial_scripts() -> Vec<(Vec<Move>, usize)> {
    (0..50u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x7a11 + i);
            let budget = rng.gen_range(1..=8);
            let mut moves: Vec<Move> = (0..rng.gen_range(0..10)).map(|_| random_move(&mut rng)).collect();
            let at = rng.gen_range(0..=moves.len().min(3));
            let forced: Vec<Move> = match i % 5 {
                0 => vec![Move::Hallucinated(TOOLS[0], "LE-103".into())],
                1 => vec![Move::Unknown("weather_api".into(), "Oshawa".into())],
                2 => vec![Move::MissingInput],
                3 => vec![Move::Tool(TOOLS[1], "LE-101".into()); 3],
                _ => vec![if i % 2 == 0 { Move::Fail } else { Move::Garbage(GARBAGE[0]) }],
            };
            moves.splice(at..at, forced);
            (moves, budget)
        })
        .collect()
}

fn run_script(moves: &[Move], budget: usize) -> AgentTrace {
    let gw = Gateway::new(ScriptedBackend::new(moves.iter().map(render)));
    run_agent("Draft a tweet for alert A2.", "You write transit tweets.", &registry(), &gw, &AgentConfig::with_budget(budget))
}

fn same_kind(a: &AgentOutcome, b: &AgentOutcome) -> bool {
    match (a, b) {
        (AgentOutcome::Answered(x), AgentOutcome::Answered(y)) => x == y,
        _ => std::mem::discriminant(a) == std::mem::discriminant(b),
    }
}

fn fuzz_input(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &[
        "Thought:", "Action:", "Action Input:", "Final Answer:", "Observation:", "action input:",
        "FINAL ANSWER:", "\n", "\r\n", " ", "\t", ":", "`", "find_trip_info", "LE-101", "é", "🚆",
        "\u{0}", "Action: ", "  Thought: x", "Final Answer:\n", "\u{feff}",
    ];
    let mut s = String::new();
    for _ in 0..rng.gen_range(0..30) {
        if rng.gen_bool(0.7) {
            s.push_str(PIECES[rng.gen_range(0..PIECES.len())]);
        } else {
            s.push(char::from_u32(rng.gen_range(0..0x2000)).unwrap_or('?'));
        }
    }
    s
}

fn agent_safety() -> Check {
    let scripts = adversarial_scripts();
    let mut kinds = BTreeSet::new();
    for (n, (moves, budget)) in scripts.iter().enumerate() {
        let trace = run_script(moves, *budget);
        let (want, steps, observations) = predict(moves, *budget);
        ensure!(trace.step_count <= *budget, "script {n}: {} steps over budget {budget}", trace.step_count);
        ensure!(same_kind(&trace.outcome, &want), "script {n}: got {:?}, expected {want:?}", trace.outcome);
        ensure!(trace.step_count == steps, "script {n}: {} steps, expected {steps}", trace.step_count);
        let got: Vec<String> = trace.steps.iter().filter_map(|s| s.observation.clone()).collect();
        ensure!(got == observations, "script {n}: observations {got:?} != {observations:?}");
        kinds.insert(format!("{:?}", std::mem::discriminant(&trace.outcome)));
    }
    ensure!(kinds.len() == 5, "only {} outcome kinds exercised", kinds.len());

    let mut rng = ChaCha8Rng::seed_from_u64(0xf022);
    let mut panics = 0;
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for _ in 0..10_000 {
        let input = fuzz_input(&mut rng);
        match catch_unwind(|| parse_step(&input)) {
            Ok(Ok(step)) => {
                if let AgentAction::Tool { name, .. } = &step.action {
                    if name.is_empty() {
                        panics += 1;
                    }
                }
            }
            Ok(Err(_)) => {}
            Err(_) => panics += 1,
        }
    }
    std::panic::set_hook(hook);
    ensure!(panics == 0, "{panics} fuzzed inputs panicked or produced an unnamed tool");
    Ok(format!("{} scripts, all 5 outcome kinds, 10000 fuzzed steps without a panic", scripts.len()))
}

// ---- tweet drafting with and without reasoning ----

const COT_GOLDENS: [(&str, &str); 3] = [
    ("tweet_on_hold_preset.txt", "A1"),
    ("tweet_resumed_preset.txt", "A3"),
    ("tweet_canceled_preset.txt", "A2"),
];
const DIRECT_GOLDENS: [(&str, &str); 3] = [
    ("tweet_nocot_on_hold.txt", "A1"),
    ("tweet_nocot_resumed.txt", "A3"),
    ("tweet_nocot_canceled.txt", "A2"),
];

fn draft(script: &str, alert_id: &str, mode: FormatMode, style: PromptStyle) -> Result<transittalk::tweet::TweetDraft, String> {
    let (gw, backend) = scripted(script);
    let options = TweetOptions {
        style,
        ..TweetOptions::default()
    };
    let d = compose_tweet(&alert(alert_id), mode, &feed(), &gw, &options).map_err(|e| format!("{script}: {e}"))?;
    ensure!(backend.remaining() == 0, "{script} not fully used");
    Ok(d)
}

fn tweet_contrast() -> Check {
    let mut summary = Vec::new();
    for (script, id) in COT_GOLDENS {
        let d = draft(script, id, FormatMode::Preset, PromptStyle::ChainOfThought)?;
        ensure!(d.violations.is_empty(), "{script}: {:?}", d.violations);
        summary.push(format!("{id} 0"));
    }
    for (script, id) in DIRECT_GOLDENS {
        let d = draft(script, id, FormatMode::Preset, PromptStyle::Direct)?;
        let rules: Vec<ViolationRule> = d.violations.iter().map(|v| v.rule).collect();
        ensure!(rules.len() >= 2, "{script}: only {rules:?}");
        ensure!(rules.contains(&ViolationRule::MissingProviderHashtag), "{script}: {rules:?}");
        summary.push(format!("{id} {}", rules.len()));
    }
    let canceled = draft("tweet_nocot_canceled.txt", "A2", FormatMode::Preset, PromptStyle::Direct)?;
    ensure!(canceled.text.contains("Danforth"), "misstated destination missing from the baseline");
    ensure!(
        canceled.violations.iter().any(|v| v.rule == ViolationRule::MissingDestination),
        "wrong destination not flagged"
    );
    Ok(format!("violations with reasoning / direct: {}", summary.join(", ")))
}

// ---- trip advice stays within what the rider said ----

/// Containment on normalized text, written without the library's matcher.
fn said(rider: &str, phrase: &str) -> bool {
    let hay = format!(" {} ", normalize(rider));
    let needle = normalize(phrase);
    !needle.is_empty() && hay.contains(&format!(" {needle} "))
}

fn traced_stop(rider: &str, mention: &str, name: &str) -> bool {
    let short: Vec<&str> = name
        .split_whitespace()
        .filter(|w| !matches!(w.to_lowercase().as_str(), "go" | "station"))
        .collect();
    said(rider, mention) || said(rider, name) || (!short.is_empty() && said(rider, &short.join(" ")))
}

fn inaccessible_trips() -> BTreeSet<String> {
    let text = std::fs::read_to_string(testdata().join("mini_feed/trips.txt")).unwrap();
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() >= 5 && f[4].trim() != "1").then(|| f[2].trim().to_string())
        })
        .collect()
}

fn audit_request(req: &TripRequest, turn: &TripTurn, label: &str) -> Result<usize, String> {
    let feed = feed();
    let history = &turn.state.history;
    check_no_invention(req, history, &feed).map_err(|bad| format!("{label}: untraceable {bad:?}"))?;
    let rider: String = history
        .iter()
        .filter(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let mut slots = 0;
    for s in [&req.origin, &req.destination].into_iter().flatten() {
        ensure!(traced_stop(&rider, &s.mention, &s.name), "{label}: stop {:?} not in rider text", s.name);
        slots += 1;
    }
    for need in &req.special_needs {
        let synonyms: &[&str] = match need.as_str() {
            "wheelchair" => &["wheelchair", "accessible", "mobility"],
            "bike" => &["bike", "bicycle", "bikes", "bicycles"],
            other => return Err(format!("{label}: unexpected need {other}")),
        };
        ensure!(synonyms.iter().any(|w| said(&rider, w)), "{label}: need {need} not in rider text");
        slots += 1;
    }
    if req.departure_after.is_some() {
        slots += 1;
    }
    Ok(slots)
}

fn trip_no_invention() -> Check {
    let blocked = inaccessible_trips();
    ensure!(!blocked.is_empty(), "fixture has no inaccessible trips");
    let (mut slots, mut fact_blocks) = (0, 0);
    let mut shown_without: BTreeSet<String> = BTreeSet::new();
    for c in CONVERSATIONS {
        let (turns, backend) = run_conversation(c);
        ensure!(backend.remaining() == 0, "{} not fully used", c.script);
        for (i, turn) in turns.iter().enumerate() {
            let label = format!("{} turn {}", c.script, i + 1);
            slots += audit_request(&turn.state.partial, turn, &label)?;
            if let Some(facts) = &turn.facts {
                fact_blocks += 1;
                slots += audit_request(&facts.request, turn, &label)?;
                let ids: BTreeSet<String> = facts.trip_ids().iter().map(|s| s.to_string()).collect();
                if c.wheelchair {
                    ensure!(ids.is_disjoint(&blocked), "{label}: wheelchair rider shown {ids:?}");
                    ensure!(!ids.is_empty(), "{label}: no accessible trip shown");
                } else {
                    shown_without.extend(ids);
                }
            }
        }
    }
    ensure!(!shown_without.is_disjoint(&blocked), "suggestions do not differ by accessibility");
    Ok(format!("{slots} filled slots traced, {fact_blocks} fact blocks, wheelchair riders never shown {blocked:?}"))
}

// ---- policy retrieval ----

fn synthetic_store(rng: &mut ChaCha8Rng) -> (VectorStore, Vec<(String, String)>) {
    const WORDS: &[&str] = &[
        "bike", "train", "fare", "refund", "pet", "dog", "luggage", "stroller", "elevator", "ramp",
        "ticket", "presto", "child", "senior", "weekend", "holiday", "union", "platform", "coach",
        "door", "quiet", "zone", "food", "drink", "parking", "lot", "bus", "transfer", "delay",
        "schedule", "policy", "rule", "priority", "seat", "folding", "electric", "scooter",
    ];
    let mut store = VectorStore::default();
    let mut docs = Vec::new();
    for i in 0..1000 {
        let n = rng.gen_range(3..25);
        let text: Vec<&str> = (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
        let text = text.join(" ");
        let id = format!("doc{i:04}");
        store.upsert_document(&id, &id, &text, ChunkingConfig::default()).unwrap();
        docs.push((format!("{id}#0000"), text));
    }
    (store, docs)
}

fn retrieval() -> Check {
    let store = policy_store();
    let tops: Vec<String> = BIKE_PARAPHRASES
        .iter()
        .map(|q| store.search(q, 4).map(|h| h[0].chunk.chunk_id.clone()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(tops.iter().all(|t| *t == tops[0]), "paraphrases disagree: {tops:?}");
    ensure!(tops[0].starts_with("bikes.md"), "bike questions retrieve {}", tops[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (big, docs) = synthetic_store(&mut rng);
    ensure!(big.len() == 1000, "synthetic store has {} chunks", big.len());
    let queries = ["can I bring my bike on the train", "refund for a delay", "dog on the platform", "electric scooter folding"];
    let mut compared = 0;
    for q in queries {
        let qv = big.embed(q);
        // Independent scan: plain dot product over re-embedded texts.
        let mut scan: Vec<(f64, &str)> = docs
            .iter()
            .map(|(id, text)| {
                let dv = big.embed(text);
                let dot: f64 = qv.values.iter().zip(&dv.values).map(|(a, b)| a * b).sum();
                let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (dot / (norm(&qv.values) * norm(&dv.values)), id.as_str())
            })
            .collect();
        scan.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        for k in [1, 4, 10, 1000] {
            let got = big.search(q, k).map_err(|e| e.to_string())?;
            ensure!(got.len() == k.min(1000), "{q}: {} results for k={k}", got.len());
            for (g, (score, id)) in got.iter().zip(&scan) {
                ensure!(g.chunk.chunk_id == *id, "{q} k={k}: {} where scan has {id}", g.chunk.chunk_id);
                ensure!((g.score - score).abs() < 1e-9, "{q}: score {} vs {score}", g.score);
                ensure!((cosine(&qv.values, &big.embed(&g.chunk.text).values) - score).abs() < 1e-9, "cosine drift");
            }
            compared += got.len();
        }
    }

    let (gw, _) = Gateway::scripted(["The policy excerpts do not cover weather."]);
    let off = answer_policy_query("What is the weather tomorrow?", PolicyQueryOptions::default(), &store, &gw)
        .map_err(|e| e.to_string())?;
    ensure!(off.confidence_note.is_some(), "out-of-domain query has no low-confidence note");
    Ok(format!("3 paraphrases -> {}, {compared} ranked results match the scan, out-of-domain flagged", tops[0]))
}

// ---- hub ----

fn hub_integration() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("sessions.jsonl");
    let store: Arc<dyn KvStore> = Arc::new(FileStore::open(&path).map_err(|e| e.to_string())?);
    let (hub, backend) = hub_with_store("hub_bike_then_trip.txt", store.clone());
    let t1 = hub.handle_message(None, BIKE_SESSION[0], CallerRole::Rider).map_err(|e| e.to_string())?;
    let sid = t1.session_id.clone();
    let t2 = hub.handle_message(Some(&sid), BIKE_SESSION[1], CallerRole::Rider).map_err(|e| e.to_string())?;
    ensure!(t1.app == AppTarget::PolicyNavigator, "turn 1 went to {}", t1.app);
    ensure!(t2.app == AppTarget::TripAdvisor, "turn 2 went to {}", t2.app);
    let calls = backend.calls();
    let turn2_call = calls
        .iter()
        .find(|c| c.messages.last().is_some_and(|m| m.content == BIKE_SESSION[1]))
        .ok_or("no trip call for turn 2")?;
    ensure!(
        turn2_call.messages.iter().any(|m| m.content == BIKE_SESSION[0]),
        "turn 2 did not see turn 1"
    );
    let session = hub.load_session(&sid).map_err(|e| e.to_string())?.ok_or("session missing")?;
    let partial = &session.trip.as_ref().ok_or("no trip state")?.partial;
    ensure!(partial.needs("bike"), "bike need not carried: {:?}", partial.special_needs);

    let t3 = hub.handle_message(Some(&sid), BIKE_SESSION[2], CallerRole::Rider).map_err(|e| e.to_string())?;
    let facts = t3.facts.ok_or("no suggestion on turn 3")?;
    ensure!(facts.request.needs("bike"), "extraction lost the bike");
    // The extraction call's conversation (not its instructions) carries the
    // bike from both the policy turn and the trip request.
    let extraction = backend
        .calls()
        .into_iter()
        .find(|c| c.messages[0].content.starts_with("You turn a trip-planning conversation"))
        .ok_or("no extraction call")?;
    let convo = &extraction.messages[1].content;
    ensure!(
        convo.contains(BIKE_SESSION[0]) && convo.contains(BIKE_SESSION[1]),
        "extraction transcript lacks the shared history"
    );
    ensure!(backend.remaining() == 0, "hub script not fully used");

    // Persist / load is byte-stable, also across a reopen of the file.
    let stored = store.get(&format!("session/{sid}")).map_err(|e| e.to_string())?.ok_or("not stored")?;
    let loaded = Session::from_bytes(&stored).map_err(|e| e.to_string())?;
    ensure!(loaded.to_bytes() == stored, "session bytes change on round trip");
    let reopened = FileStore::open(&path).map_err(|e| e.to_string())?;
    ensure!(reopened.get(&format!("session/{sid}")).ok().flatten() == Some(stored), "file reopen differs");
    ensure!(loaded.trip.as_ref().map(|t| t.phase) == Some(Phase::Done), "trip phase not done");

    // A failed write at any turn leaves every stored record untouched.
    let mut injected = 0;
    for fail_at in 0..BIKE_SESSION.len() {
        let inner: Arc<dyn KvStore> = Arc::new(MemoryStore::new());
        let faulty = Arc::new(FaultyStore::new(inner.clone()));
        let (hub, _) = hub_with_store("hub_bike_then_trip.txt", faulty.clone());
        let mut sid: Option<String> = None;
        for (turn, msg) in BIKE_SESSION.iter().enumerate() {
            if turn == fail_at {
                let snapshot = dump(&*inner);
                faulty.fail_after(0);
                let r = hub.handle_message(sid.as_deref(), msg, CallerRole::Rider);
                ensure!(r.is_err(), "turn {turn} succeeded despite the fault");
                ensure!(dump(&*inner) == snapshot, "turn {turn} left a partial write");
                if let Some(id) = &sid {
                    let s = hub.load_session(id).map_err(|e| e.to_string())?.ok_or("lost session")?;
                    ensure!(s.history.len() == 2 * turn, "history has {} messages", s.history.len());
                }
                injected += 1;
                break;
            }
            sid = Some(hub.handle_message(sid.as_deref(), msg, CallerRole::Rider).map_err(|e| e.to_string())?.session_id);
        }
    }

    // Same for a staff draft: the queue does not keep a draft it could not store.
    let script = std::fs::read_to_string(testdata().join("scripts/tweet_canceled_preset.txt")).unwrap();
    let mut entries = parse_transcript("tweet_writer").unwrap();
    entries.extend(parse_transcript(&script).unwrap());
    let inner: Arc<dyn KvStore> = Arc::new(MemoryStore::new());
    let faulty = Arc::new(FaultyStore::new(inner.clone()));
    let hub = Hub::open(
        hub_deps(Gateway::new(ScriptedBackend::new(entries))),
        faulty.clone(),
        Arc::new(FixedClock::new(0)),
    )
    .map_err(|e| e.to_string())?;
    faulty.fail_after(1); // the session counter write succeeds, the turn does not
    ensure!(hub.handle_message(None, "draft a tweet for alert A2", CallerRole::Staff).is_err(), "staff turn survived the fault");
    ensure!(hub.drafts().is_empty(), "draft kept after a failed write");
    ensure!(inner.keys("session/").unwrap().is_empty(), "session written after a failed write");
    injected += 1;

    Ok(format!("routes policy -> trip with shared history, byte-stable sessions, {injected} injected faults left no partial turn"))
}

fn dump(store: &dyn KvStore) -> Vec<(String, String)> {
    store
        .keys("")
        .unwrap()
        .into_iter()
        .map(|k| {
            let v = store.get(&k).unwrap().unwrap();
            (k, v)
        })
        .collect()
}

// ---- determinism ----

/// Everything the scripted suites produce, serialized.
fn suite_output() -> Result<String, String> {
    let mut out = String::new();
    let json = |v: &dyn erased::Json| v.to_json();
    for (script, id) in COT_GOLDENS.iter().chain(&DIRECT_GOLDENS) {
        let style = if script.contains("nocot") { PromptStyle::Direct } else { PromptStyle::ChainOfThought };
        let d = draft(script, id, FormatMode::Preset, style)?;
        writeln!(out, "{}", json(&d)).unwrap();
        out.push_str(&d.trace.to_log());
    }
    let open = draft("tweet_canceled_open.txt", "A2", FormatMode::Open, PromptStyle::ChainOfThought)?;
    writeln!(out, "{}", json(&open)).unwrap();
    for c in CONVERSATIONS {
        let (turns, _) = run_conversation(c);
        writeln!(out, "{}", json(&turns)).unwrap();
    }
    let (hub, _) = hub("hub_bike_then_trip.txt");
    let mut sid: Option<String> = None;
    for msg in BIKE_SESSION {
        let r = hub.handle_message(sid.as_deref(), msg, CallerRole::Rider).map_err(|e| e.to_string())?;
        writeln!(out, "{}", json(&r)).unwrap();
        sid = Some(r.session_id);
    }
    let session = hub.load_session(sid.as_deref().unwrap()).map_err(|e| e.to_string())?.unwrap();
    writeln!(out, "{}", session.to_bytes()).unwrap();
    for (moves, budget) in adversarial_scripts() {
        out.push_str(&run_script(&moves, budget).to_log());
    }
    Ok(out)
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> String {
            serde_json::to_string(self).expect("serializable")
        }
    }
}

fn determinism() -> Check {
    let a = suite_output()?;
    let b = suite_output()?;
    ensure!(a == b, "two runs differ");
    let digest = Sha256::digest(a.as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    Ok(format!("two runs byte-identical ({} bytes, sha256 {hex}…)", a.len()))
}

fn main() {
    let checks: [(&str, fn() -> Check); 7] = [
        ("schedule queries match a brute-force scan", gtfs_oracle),
        ("agent loop terminates and labels outcomes", agent_safety),
        ("reasoning drafts pass the preset checklist, direct drafts do not", tweet_contrast),
        ("trip advice invents nothing and respects accessibility", trip_no_invention),
        ("policy retrieval is stable and exact", retrieval),
        ("hub routes with shared history and atomic turns", hub_integration),
        ("scripted runs are deterministic", determinism),
    ];
    let mut failed = 0;
    for (n, (name, check)) in checks.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS {}. {name}: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {why}", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
