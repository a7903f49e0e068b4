//! Service configuration (TOML).
//!
//! ```toml
//! [gateway]
//! backend = "remote"            # or "scripted"
//! script = "scripts/demo.txt"   # scripted backend transcript
//! base_url = "https://api.openai.com/v1"
//! model = "gpt-4o-mini"
//! timeout_secs = 30
//! retries = 2
//! api_key_env = "OPENAI_API_KEY"
//!
//! [paths]
//! gtfs = "data/gtfs"
//! policies = "data/policies"
//! alerts = "data/alerts.jsonl"
//! vector_index = "state/policies.idx"
//! store = "state/sessions.jsonl"
//!
//! [retrieval]
//! k = 4
//! low_confidence = 0.12
//! max_chunk_chars = 1200
//! overlap_chars = 150
//! dim = 256
//!
//! [tweets]
//! provider_hashtag = "#GOtransit"
//! utc_offset_minutes = -300
//!
//! [server]
//! bind = "127.0.0.1:8080"
//! staff_token = "change-me"
//! ```
//!
//! Every key is optional. Relative paths are resolved against the config
//! file's directory. Secrets can come from the environment:
//! `TRANSITTALK_API_KEY` overrides the model API key and
//! `TRANSITTALK_STAFF_TOKEN` the staff token.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{Gateway, RemoteBackend, RemoteConfig, ScriptedBackend};
use crate::policy::{PolicyQueryOptions, DEFAULT_LOW_CONFIDENCE};
use crate::tweet::{TweetOptions, DEFAULT_PROVIDER_HASHTAG};
use crate::vector::{
    ChunkingConfig, DEFAULT_DIM, DEFAULT_MAX_CHUNK_CHARS, DEFAULT_OVERLAP_CHARS, DEFAULT_TOP_K,
};

pub const API_KEY_ENV: &str = "TRANSITTALK_API_KEY";
pub const STAFF_TOKEN_ENV: &str = "TRANSITTALK_STAFF_TOKEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("invalid config {0}: {1}")]
    Parse(PathBuf, String),
    #[error("invalid setting {0}: {1}")]
    Invalid(&'static str, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Remote,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub backend: BackendKind,
    pub script: Option<PathBuf>,
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub retries: u32,
    /// Environment variable holding the API key, read after
    /// `TRANSITTALK_API_KEY`.
    pub api_key_env: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            backend: BackendKind::Remote,
            script: None,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            timeout_secs: 30,
            retries: 2,
            api_key_env: Some("OPENAI_API_KEY".into()),
            api_key: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub gtfs: PathBuf,
    pub policies: PathBuf,
    pub alerts: PathBuf,
    pub vector_index: PathBuf,
    pub store: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            gtfs: "data/gtfs".into(),
            policies: "data/policies".into(),
            alerts: "data/alerts.jsonl".into(),
            vector_index: "state/policies.idx".into(),
            store: "state/sessions.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    pub low_confidence: f64,
    pub max_chunk_chars: usize,
    pub overlap_chars: usize,
    pub dim: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_TOP_K,
            low_confidence: DEFAULT_LOW_CONFIDENCE,
            max_chunk_chars: DEFAULT_MAX_CHUNK_CHARS,
            overlap_chars: DEFAULT_OVERLAP_CHARS,
            dim: DEFAULT_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TweetsSection {
    pub provider_hashtag: String,
    pub utc_offset_minutes: i32,
}

impl Default for TweetsSection {
    fn default() -> Self {
        Self {
            provider_hashtag: DEFAULT_PROVIDER_HASHTAG.into(),
            utc_offset_minutes: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
    /// Bearer token for staff endpoints. No token means staff endpoints
    /// are closed.
    pub staff_token: Option<String>,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            staff_token: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gateway: GatewaySection,
    pub paths: PathsSection,
    pub retrieval: RetrievalSection,
    pub tweets: TweetsSection,
    pub server: ServerSection,
}

impl Config {
    /// Parses TOML text. Paths stay as written; see [`Config::load`].
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Config =
            toml::from_str(text).map_err(|e| ConfigError::Parse(PathBuf::from("<text>"), e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads the file, resolves relative paths against its directory and
    /// applies environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(_, msg) => ConfigError::Parse(path.to_path_buf(), msg),
            other => other,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.apply_env(|k| std::env::var(k).ok());
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.gtfs);
        fix(&mut self.paths.policies);
        fix(&mut self.paths.alerts);
        fix(&mut self.paths.vector_index);
        fix(&mut self.paths.store);
        if let Some(script) = &mut self.gateway.script {
            fix(script);
        }
    }

    /// Fills secrets from the environment through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let configured = self.gateway.api_key_env.as_deref().and_then(&lookup);
        if let Some(key) = lookup(API_KEY_ENV).or(configured).filter(|k| !k.is_empty()) {
            self.gateway.api_key = Some(key);
        }
        if let Some(token) = lookup(STAFF_TOKEN_ENV).filter(|t| !t.is_empty()) {
            self.server.staff_token = Some(token);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.retrieval;
        if r.k == 0 {
            return Err(ConfigError::Invalid("retrieval.k", "must be positive".into()));
        }
        if r.dim == 0 {
            return Err(ConfigError::Invalid("retrieval.dim", "must be positive".into()));
        }
        if r.max_chunk_chars == 0 || r.overlap_chars >= r.max_chunk_chars {
            return Err(ConfigError::Invalid(
                "retrieval.overlap_chars",
                "must be smaller than max_chunk_chars".into(),
            ));
        }
        if !(-1.0..=1.0).contains(&r.low_confidence) {
            return Err(ConfigError::Invalid("retrieval.low_confidence", "must be within [-1, 1]".into()));
        }
        if !self.tweets.provider_hashtag.starts_with('#') {
            return Err(ConfigError::Invalid("tweets.provider_hashtag", "must start with '#'".into()));
        }
        if self.tweets.utc_offset_minutes.abs() > 14 * 60 {
            return Err(ConfigError::Invalid("tweets.utc_offset_minutes", "out of range".into()));
        }
        if self.gateway.backend == BackendKind::Scripted && self.gateway.script.is_none() {
            return Err(ConfigError::Invalid("gateway.script", "required for the scripted backend".into()));
        }
        Ok(())
    }

    pub fn chunking(&self) -> ChunkingConfig {
        ChunkingConfig {
            max_chunk_chars: self.retrieval.max_chunk_chars,
            overlap_chars: self.retrieval.overlap_chars,
        }
    }

    pub fn policy_options(&self) -> PolicyQueryOptions {
        PolicyQueryOptions {
            k: self.retrieval.k,
            include_sources: false,
            low_confidence: self.retrieval.low_confidence,
        }
    }

    pub fn tweet_options(&self) -> TweetOptions {
        TweetOptions {
            provider_hashtag: self.tweets.provider_hashtag.clone(),
            utc_offset_minutes: self.tweets.utc_offset_minutes,
            ..TweetOptions::default()
        }
    }

    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        let g = &self.gateway;
        match g.backend {
            BackendKind::Scripted => {
                let script = g.script.as_ref().expect("validated");
                let backend = ScriptedBackend::from_file(script)
                    .map_err(|e| ConfigError::Invalid("gateway.script", e))?;
                Ok(Gateway::new(backend))
            }
            BackendKind::Remote => {
                let mut remote = RemoteConfig::new(&g.base_url, &g.model);
                remote.api_key = g.api_key.clone();
                remote.timeout = Duration::from_secs(g.timeout_secs.max(1));
                remote.retries = g.retries;
                Ok(Gateway::new(RemoteBackend::new(remote)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.retrieval.dim, 256);
        assert_eq!(c.retrieval.k, 4);
    }

    #[test]
    fn sections_and_validation() {
        let c = Config::parse(
            "[tweets]\nprovider_hashtag = \"#UPexpress\"\nutc_offset_minutes = -300\n[retrieval]\nk = 2\n",
        )
        .unwrap();
        assert_eq!(c.tweet_options().provider_hashtag, "#UPexpress");
        assert_eq!(c.policy_options().k, 2);
        assert!(matches!(Config::parse("[retrieval]\nk = 0"), Err(ConfigError::Invalid("retrieval.k", _))));
        assert!(matches!(Config::parse("[gateway]\nbackend = \"scripted\""), Err(ConfigError::Invalid(..))));
        assert!(matches!(Config::parse("[paths]\ngfts = \"x\""), Err(ConfigError::Parse(..))));
    }

    #[test]
    fn env_overrides_secrets() {
        let mut c = Config::parse("[server]\nstaff_token = \"file\"").unwrap();
        c.apply_env(|k| match k {
            STAFF_TOKEN_ENV => Some("env".into()),
            "OPENAI_API_KEY" => Some("sk-configured".into()),
            _ => None,
        });
        assert_eq!(c.server.staff_token.as_deref(), Some("env"));
        assert_eq!(c.gateway.api_key.as_deref(), Some("sk-configured"));
        c.apply_env(|k| (k == API_KEY_ENV).then(|| "sk-override".to_string()));
        assert_eq!(c.gateway.api_key.as_deref(), Some("sk-override"));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tt.toml");
        std::fs::write(&path, "[paths]\ngtfs = \"feed\"\nstore = \"/abs/s.jsonl\"\n").unwrap();
        let c = Config::load(&path).unwrap();
        assert_eq!(c.paths.gtfs, dir.path().join("feed"));
        assert_eq!(c.paths.store, PathBuf::from("/abs/s.jsonl"));
    }
}
