//! OpenAI-compatible `/chat/completions` client with bounded retries.

use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;

use super::{
    ChatBackend, ChatMessage, CompletionParams, CompletionResult, FinishReason, GatewayError,
    Role, Usage,
};

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// e.g. `https://api.openai.com/v1`
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Extra attempts after the first on transient failures.
    pub retries: u32,
    /// First backoff delay; doubles per retry.
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(500),
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    // Built lazily: a blocking client must not be created on an async worker.
    client: OnceLock<Result<Client, String>>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

enum Attempt {
    Done(CompletionResult),
    Retry(GatewayError),
    Fatal(GatewayError),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            config,
            client: OnceLock::new(),
        }
    }

    fn client(&self) -> Result<&Client, GatewayError> {
        self.client
            .get_or_init(|| {
                Client::builder()
                    .timeout(self.config.timeout)
                    .build()
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| GatewayError::Transport(e.clone()))
    }

    fn body(&self, messages: &[ChatMessage], params: &CompletionParams) -> serde_json::Value {
        let wire_messages: Vec<_> = messages
            .iter()
            .map(|m| {
                // Tool output is sent as user text; tool use is textual here.
                let role = match m.role {
                    Role::System => "system",
                    Role::User | Role::Tool => "user",
                    Role::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": wire_messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if !params.stop_sequences.is_empty() {
            body["stop"] = json!(params.stop_sequences);
        }
        body
    }

    fn attempt(&self, client: &Client, body: &serde_json::Value) -> Attempt {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut request = client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = match request.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(GatewayError::Timeout),
            Err(e) => return Attempt::Retry(GatewayError::Transport(e.to_string())),
        };
        let status = response.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            return Attempt::Retry(GatewayError::RateLimited);
        }
        if status.is_server_error() {
            return Attempt::Retry(GatewayError::Transport(format!("server returned {status}")));
        }
        if !status.is_success() {
            return Attempt::Fatal(GatewayError::BadResponse(format!("status {status}")));
        }
        let wire: WireResponse = match response.json() {
            Ok(w) => w,
            Err(e) if e.is_timeout() => return Attempt::Retry(GatewayError::Timeout),
            Err(e) => return Attempt::Fatal(GatewayError::BadResponse(e.to_string())),
        };
        let Some(choice) = wire.choices.into_iter().next() else {
            return Attempt::Fatal(GatewayError::BadResponse("no choices".into()));
        };
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        let usage = wire.usage.map_or_else(Usage::default, |u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        });
        Attempt::Done(CompletionResult {
            text: choice.message.content.unwrap_or_default(),
            finish_reason,
            usage,
        })
    }
}

impl ChatBackend for RemoteBackend {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<CompletionResult, GatewayError> {
        let client = self.client()?;
        let body = self.body(messages, params);
        let mut delay = self.config.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(client, &body) {
                Attempt::Done(result) => return Ok(result),
                Attempt::Fatal(err) => return Err(err),
                Attempt::Retry(err) => {
                    if attempt >= self.config.retries {
                        return Err(err);
                    }
                    tracing::info!(attempt, error = %err, "retrying chat completion");
                    attempt += 1;
                    thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                }
            }
        }
    }
}
