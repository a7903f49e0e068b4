//! Chat-completion boundary.
//!
//! Every model call in the crate goes through [`Gateway::complete`]. Two
//! backends implement [`ChatBackend`]: [`RemoteBackend`] speaks the
//! OpenAI-style `/chat/completions` protocol, and [`ScriptedBackend`] replays
//! a transcript file so pipelines run deterministically without a network.
//!
//! Prompt and completion text is never logged; only sizes and outcomes.

mod remote;
mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{parse_transcript, RecordedCall, ScriptEntry, ScriptedBackend, ScriptedFailure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    /// Tool output fed back to the model.
    Tool,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self {
            role: Role::Tool,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f32,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
}

impl CompletionParams {
    /// Extraction, classification and validation calls.
    pub fn strict() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
            stop_sequences: Vec::new(),
        }
    }

    /// Free-form writing (open-format tweets).
    pub fn creative() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 512,
            stop_sequences: Vec::new(),
        }
    }

    pub fn with_stop(mut self, stop: impl Into<String>) -> Self {
        self.stop_sequences.push(stop.into());
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be a finite value >= 0".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.stop_sequences.len() > 4 {
            return Err(GatewayError::InvalidRequest(
                "at most 4 stop sequences are allowed".into(),
            ));
        }
        Ok(())
    }
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self::strict()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

/// A finished completion. A `Stop` result with empty `text` is the explicit
/// empty-completion marker; see [`CompletionResult::is_empty_completion`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

impl CompletionResult {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            usage: Usage::default(),
        }
    }

    pub fn is_empty_completion(&self) -> bool {
        self.finish_reason == FinishReason::Stop && self.text.trim().is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("completion request timed out")]
    Timeout,
    #[error("rate limited by the model provider")]
    RateLimited,
    #[error("scripted backend has no remaining responses")]
    ScriptExhausted,
    #[error("scripted response expects {trigger:?} but the last message does not contain it")]
    TriggerMismatch { trigger: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected provider response: {0}")]
    BadResponse(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<CompletionResult, GatewayError>;
}

/// Cloneable handle over a shared backend.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Self {
            backend: Arc::new(backend),
        }
    }

    pub fn from_arc(backend: Arc<dyn ChatBackend>) -> Self {
        Self { backend }
    }

    /// Scripted gateway over the given responses, no triggers.
    pub fn scripted<I, S>(responses: I) -> (Self, Arc<ScriptedBackend>)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let backend = Arc::new(ScriptedBackend::from_responses(responses));
        (Self::from_arc(backend.clone()), backend)
    }

    pub fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<CompletionResult, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if messages[1..].iter().any(|m| m.role == Role::System) {
            return Err(GatewayError::InvalidRequest(
                "only the first message may be a system message".into(),
            ));
        }
        params.validate()?;
        tracing::debug!(
            messages = messages.len(),
            chars = messages.iter().map(|m| m.content.len()).sum::<usize>(),
            temperature = params.temperature,
            "chat completion"
        );
        let result = self.backend.complete(messages, params);
        match &result {
            Ok(r) => tracing::debug!(chars = r.text.len(), finish = ?r.finish_reason, "completion ok"),
            Err(e) => tracing::warn!(error = %e, "completion failed"),
        }
        result
    }
}
