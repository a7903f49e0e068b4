//! Transcript replay backend.
//!
//! A transcript is plain text. Entries are separated by lines consisting of
//! `---`. An entry may start with header lines:
//!
//! * `@trigger: <text>` — the last user or tool message must contain `<text>`,
//!   otherwise the call fails with [`GatewayError::TriggerMismatch`].
//! * `@fail: timeout|rate_limited|transport` — the call fails with that error.
//! * `@note: <text>` — ignored.
//!
//! The rest of the entry, trimmed, is the completion text. Entries are
//! consumed strictly in order by a single cursor.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use super::{
    ChatBackend, ChatMessage, CompletionParams, CompletionResult, GatewayError, Role,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptedFailure {
    Timeout,
    RateLimited,
    Transport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    pub trigger: Option<String>,
    pub fail: Option<ScriptedFailure>,
    pub text: String,
}

impl ScriptEntry {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            trigger: None,
            fail: None,
            text: text.into(),
        }
    }

    pub fn with_trigger(mut self, trigger: impl Into<String>) -> Self {
        self.trigger = Some(trigger.into());
        self
    }

    pub fn failing(kind: ScriptedFailure) -> Self {
        Self {
            trigger: None,
            fail: Some(kind),
            text: String::new(),
        }
    }
}

/// Parses transcript text into entries. Blocks with neither text nor a
/// failure header are dropped.
pub fn parse_transcript(text: &str) -> Result<Vec<ScriptEntry>, String> {
    let mut entries = Vec::new();
    let mut block: Vec<&str> = Vec::new();
    let mut flush = |block: &mut Vec<&str>| -> Result<(), String> {
        let mut trigger = None;
        let mut fail = None;
        let mut body_start = 0;
        for (i, line) in block.iter().enumerate() {
            let trimmed = line.trim_start();
            if let Some(rest) = trimmed.strip_prefix("@trigger:") {
                trigger = Some(rest.trim().to_string());
            } else if let Some(rest) = trimmed.strip_prefix("@fail:") {
                fail = Some(match rest.trim() {
                    "timeout" => ScriptedFailure::Timeout,
                    "rate_limited" => ScriptedFailure::RateLimited,
                    "transport" => ScriptedFailure::Transport,
                    other => return Err(format!("unknown @fail kind {other:?}")),
                });
            } else if trimmed.starts_with("@note:") {
            } else if trimmed.is_empty() && body_start == i {
                // Blank lines before the body.
            } else {
                break;
            }
            body_start = i + 1;
        }
        let body = block[body_start..].join("\n").trim().to_string();
        if !body.is_empty() || fail.is_some() {
            entries.push(ScriptEntry {
                trigger,
                fail,
                text: body,
            });
        } else if trigger.is_some() {
            return Err("entry has a trigger but no text".into());
        }
        block.clear();
        Ok(())
    };
    for line in text.lines() {
        if line.trim_end() == "---" {
            flush(&mut block)?;
        } else {
            block.push(line);
        }
    }
    flush(&mut block)?;
    Ok(entries)
}

#[derive(Debug, Clone)]
pub struct RecordedCall {
    pub messages: Vec<ChatMessage>,
    pub params: CompletionParams,
}

#[derive(Debug, Default)]
struct ScriptState {
    entries: VecDeque<ScriptEntry>,
    calls: Vec<RecordedCall>,
}

/// Replays scripted completions in order and records every call it sees.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        Self {
            state: Mutex::new(ScriptState {
                entries: entries.into_iter().collect(),
                calls: Vec::new(),
            }),
        }
    }

    pub fn from_responses<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(responses.into_iter().map(ScriptEntry::text))
    }

    pub fn from_transcript(text: &str) -> Result<Self, String> {
        parse_transcript(text).map(Self::new)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        Self::from_transcript(&text)
    }

    /// Appends entries behind the ones not yet consumed.
    pub fn push(&self, entries: impl IntoIterator<Item = ScriptEntry>) {
        self.state.lock().expect("script lock").entries.extend(entries);
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().expect("script lock").entries.len()
    }

    /// Every call received so far, including failed ones.
    pub fn calls(&self) -> Vec<RecordedCall> {
        self.state.lock().expect("script lock").calls.clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<CompletionResult, GatewayError> {
        let mut state = self.state.lock().expect("script lock");
        state.calls.push(RecordedCall {
            messages: messages.to_vec(),
            params: params.clone(),
        });
        let entry = state.entries.front().ok_or(GatewayError::ScriptExhausted)?;
        if let Some(trigger) = &entry.trigger {
            let last = messages
                .iter()
                .rev()
                .find(|m| matches!(m.role, Role::User | Role::Tool));
            if !last.is_some_and(|m| m.content.contains(trigger.as_str())) {
                return Err(GatewayError::TriggerMismatch {
                    trigger: trigger.clone(),
                });
            }
        }
        let entry = state.entries.pop_front().expect("front exists");
        match entry.fail {
            Some(ScriptedFailure::Timeout) => Err(GatewayError::Timeout),
            Some(ScriptedFailure::RateLimited) => Err(GatewayError::RateLimited),
            Some(ScriptedFailure::Transport) => {
                Err(GatewayError::Transport("scripted transport failure".into()))
            }
            None => Ok(CompletionResult::stop(entry.text)),
        }
    }
}
