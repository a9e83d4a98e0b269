use std::path::{Path, PathBuf};

use raven_core::engine::Mode;
use raven_core::pipeline::{BackendKind, LiveConfig, DEFAULT_PROMPT_BUDGET};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("environment variable {name}: {reason}")]
    Env { name: &'static str, reason: String },
}

/// Server settings, read from a TOML file and then overridden by
/// `RAVEN_PORT`, `RAVEN_TOKEN`, `RAVEN_BACKEND`, and `RAVEN_MODE`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub bind: String,
    pub port: u16,
    /// Bearer token required on every `/v1` request. No token disables auth.
    #[serde(skip_serializing)]
    pub token: Option<String>,
    pub backend: BackendKind,
    pub mode: Mode,
    /// NDJSON audit log; in memory when unset.
    pub audit_log: Option<PathBuf>,
    pub personas_dir: Option<PathBuf>,
    pub rules_file: Option<PathBuf>,
    /// Records buffered per stream subscriber before it is dropped.
    pub stream_buffer: usize,
    pub prompt_budget: usize,
    pub live: LiveConfig,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            bind: "127.0.0.1".into(),
            port: 8787,
            token: None,
            backend: BackendKind::Rule,
            mode: Mode::Push,
            audit_log: None,
            personas_dir: None,
            rules_file: None,
            stream_buffer: 256,
            prompt_budget: DEFAULT_PROMPT_BUDGET,
            live: LiveConfig::default(),
        }
    }
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<GatewayConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), reason: e.to_string() })
    }

    /// Applies environment overrides through `lookup`, which is
    /// `std::env::var` in production.
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<GatewayConfig, ConfigError> {
        if let Some(v) = lookup("RAVEN_PORT") {
            self.port = v.parse().map_err(|e| ConfigError::Env { name: "RAVEN_PORT", reason: format!("{e}") })?;
        }
        if let Some(v) = lookup("RAVEN_TOKEN") {
            self.token = Some(v).filter(|t| !t.is_empty());
        }
        if let Some(v) = lookup("RAVEN_BACKEND") {
            self.backend = v.parse().map_err(|reason| ConfigError::Env { name: "RAVEN_BACKEND", reason })?;
        }
        if let Some(v) = lookup("RAVEN_MODE") {
            self.mode = v.parse().map_err(|reason| ConfigError::Env { name: "RAVEN_MODE", reason })?;
        }
        self.live = self.live.from_env();
        Ok(self)
    }

    pub fn address(&self) -> String {
        format!("{}:{}", self.bind, self.port)
    }
}
