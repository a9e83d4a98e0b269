//! HTTP and server-sent-event edge for the advisory engine.
//!
//! | Method | Path              | Purpose                                    |
//! |--------|-------------------|--------------------------------------------|
//! | GET    | `/v1/state`       | current snapshot                           |
//! | PATCH  | `/v1/state`       | apply a world-state patch (202)            |
//! | GET    | `/v1/stream`      | SSE: `briefing`, `advisory`, `conflict`    |
//! | POST   | `/v1/actions`     | operator action (202)                      |
//! | GET    | `/v1/personas`    | registry and the latest selection          |
//! | GET    | `/v1/advisories`  | stored advisories, `?persona=` filter      |
//! | GET    | `/v1/log`         | audit records `?from=&to=` (end exclusive) |

mod api;
mod config;
mod stream;

use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use raven_core::audit::{AuditError, AuditLog, AuditRecord};
use raven_core::engine::{Engine, EngineError, Mode};
use raven_core::eventmon::{EventMonError, RuleRegistry, RuleTableFile};
use raven_core::personas::{PersonaError, PersonaRegistry};
use raven_core::pipeline::{
    BackendError, BackendKind, GenerationBackend, HttpBackend, MockBackend, Pipeline, PipelineConfig, RuleBackend,
};
use raven_core::worldstate::{apply_update, Patch, Value, WorldState, WorldStateError};
use thiserror::Error;
use tokio::sync::broadcast;

pub use api::router;
pub use config::{ConfigError, GatewayConfig};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Persona(#[from] PersonaError),
    #[error(transparent)]
    Rules(#[from] EventMonError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    State(#[from] WorldStateError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

/// Shared handler state.
#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub records: broadcast::Sender<AuditRecord>,
    pub token: Option<Arc<str>>,
}

impl AppState {
    /// Runs queued batches on the blocking pool. Batches stay ordered
    /// because the engine processes one at a time.
    pub fn schedule_processing(&self) {
        let engine = self.engine.clone();
        tokio::task::spawn_blocking(move || {
            if let Err(e) = engine.process_pending(Utc::now()) {
                tracing::error!(error = %e, "batch processing failed");
            }
        });
    }
}

pub fn backend_for(kind: BackendKind, config: &GatewayConfig) -> Result<Arc<dyn GenerationBackend>, GatewayError> {
    Ok(match kind {
        BackendKind::Rule => Arc::new(RuleBackend::new()),
        BackendKind::Mock => Arc::new(MockBackend::new()),
        BackendKind::Live => Arc::new(HttpBackend::new(config.live.clone())?),
    })
}

/// The nominal snapshot moved to `now`, with eight hours of authorization.
pub fn live_baseline(now: DateTime<Utc>) -> Result<WorldState, WorldStateError> {
    let patch = Patch::new()
        .set("regulatory.authorizationExpires", Value::Instant(now + chrono::Duration::hours(8)))?
        .at(now);
    apply_update(&WorldState::nominal(), &patch)
}

/// Builds the engine and its record fan-out channel from configuration.
pub fn build(config: &GatewayConfig, now: DateTime<Utc>) -> Result<AppState, GatewayError> {
    let registry = match &config.personas_dir {
        Some(dir) => PersonaRegistry::load(dir)?,
        None => PersonaRegistry::shipped(),
    };
    let rules = match &config.rules_file {
        Some(path) => RuleRegistry::from_table(&RuleTableFile::load(path)?)?,
        None => RuleRegistry::with_defaults(),
    };
    let audit = match &config.audit_log {
        Some(path) => AuditLog::open(path)?,
        None => AuditLog::in_memory(),
    };
    let pipeline = Pipeline::new(Arc::new(registry), backend_for(config.backend, config)?)
        .with_config(PipelineConfig { prompt_budget: config.prompt_budget, fallback: true });
    let (tx, _) = broadcast::channel(config.stream_buffer.max(1));
    let sender = tx.clone();
    let engine = Engine::builder(pipeline)
        .rules(rules)
        .mode(config.mode)
        .audit(audit)
        .initial_state(live_baseline(now)?)
        .on_record(move |record| {
            let _ = sender.send(record.clone());
        })
        .start(now)?;
    let state = AppState { engine: Arc::new(engine), records: tx, token: config.token.clone().map(Arc::from) };
    if state.engine.pending_len() > 0 {
        state.engine.process_pending(now)?;
    }
    Ok(state)
}

/// Serves until interrupted.
pub async fn serve(config: GatewayConfig) -> Result<(), GatewayError> {
    let state = build(&config, Utc::now())?;
    let listener = tokio::net::TcpListener::bind(config.address()).await?;
    tracing::info!(
        address = %listener.local_addr()?,
        backend = %config.backend,
        mode = %config.mode,
        "gateway listening"
    );
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Loads `path` if given, then applies environment overrides.
pub fn load_config(path: Option<&Path>) -> Result<GatewayConfig, GatewayError> {
    let base = match path {
        Some(p) => GatewayConfig::load(p)?,
        None => GatewayConfig::default(),
    };
    Ok(base.with_env(|name| std::env::var(name).ok())?)
}

/// Per-subscriber delivery filter.
pub fn delivers(mode: Mode, record: &AuditRecord) -> bool {
    if !record.record_kind.is_delivery() {
        return false;
    }
    let requested = record.payload["origin"] == "request";
    match mode {
        Mode::Push => true,
        Mode::Hybrid => requested || record.payload["batchSeverity"] == "critical",
        Mode::Pull => requested,
    }
}
