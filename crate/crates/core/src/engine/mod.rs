//! The single logical writer behind the harness and the gateway.
//!
//! State updates, event detection, and audit appends are serialized through
//! one writer lock. Pipeline runs happen outside it, one batch at a time and
//! in snapshot order, so readers and new updates never wait on a slow
//! backend. A queued batch whose rules no longer hold in the newest snapshot
//! is logged as stale and not delivered.

mod action;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

pub use action::{ActionCommand, OperatorAction};

use crate::alignment::{classify_scope, detect_conflicts, ConflictPair, Lexicon, ScopeReport};
use crate::audit::{AuditError, AuditLog, AuditRecord, RecordKind};
use crate::eventmon::{EventBatch, EventMonitor, RuleRegistry, Severity, StateEvent};
use crate::personas::{PersonaError, PersonaRegistry};
use crate::pipeline::{Advisory, BatchRef, OperatorBriefing, Pipeline, PipelineError, SelectionResult};
use crate::worldstate::{apply_update, diff, format_instant, FieldValue, Patch, WorldState, WorldStateError};

/// Rule id of the synthetic event behind an operator's request for advice.
pub const OPERATOR_REQUEST: &str = "operator_request";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    State(#[from] WorldStateError),
    #[error("source `{source_id}` sent sequence {sequence}, but {last} was already accepted")]
    OutOfOrder { source_id: String, sequence: u64, last: u64 },
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("unknown advisory `{0}`")]
    UnknownAdvisory(String),
    #[error(transparent)]
    Persona(#[from] PersonaError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

/// Server-wide delivery mode. In pull mode events are logged but advice is
/// only generated on request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Push,
    Pull,
    Hybrid,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Mode, String> {
        match s.to_ascii_lowercase().as_str() {
            "push" => Ok(Mode::Push),
            "pull" => Ok(Mode::Pull),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(format!("unknown mode `{other}` (expected push, pull, or hybrid)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Push => "push",
            Mode::Pull => "pull",
            Mode::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Event,
    Request,
}

/// Provenance attached to a state update.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestMeta {
    pub source: Option<(String, u64)>,
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct IngestAck {
    pub snapshot_id: u64,
    pub events: Vec<StateEvent>,
    /// The update repeated an earlier idempotency key and was not applied.
    pub duplicate: bool,
    pub queued: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ActionAck {
    pub action_id: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_id: Option<u64>,
    pub events: Vec<StateEvent>,
    pub queued: bool,
}

/// A stored advisory with its delivery context.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AdvisoryEntry {
    #[serde(flatten)]
    pub advisory: Advisory,
    pub batch_id: String,
    pub origin: Origin,
    pub acknowledged: bool,
    pub scope_report: ScopeReport,
}

/// Everything one processed batch produced.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub batch: BatchRef,
    pub origin: Origin,
    pub stale: bool,
    pub selection: Option<SelectionResult>,
    pub advisories: Vec<Advisory>,
    pub briefing: Option<OperatorBriefing>,
    pub scope_reports: Vec<ScopeReport>,
    pub conflicts: Vec<ConflictPair>,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
struct Pending {
    batch: EventBatch,
    snapshot: WorldState,
    origin: Origin,
    forced: Option<String>,
}

struct Writer {
    monitor: EventMonitor,
    sources: HashMap<String, u64>,
    idempotency: HashMap<String, u64>,
    resume_speed: f64,
    next_action: u64,
}

struct Shared {
    state: WorldState,
    audit: AuditLog,
    advisories: Vec<AdvisoryEntry>,
}

pub type RecordHook = Box<dyn Fn(&AuditRecord) + Send + Sync>;

pub struct Engine {
    writer: Mutex<Writer>,
    shared: RwLock<Shared>,
    pending: Mutex<VecDeque<Pending>>,
    processing: Mutex<()>,
    rules: RuleRegistry,
    pipeline: Pipeline,
    lexicon: Lexicon,
    mode: Mode,
    hook: Option<RecordHook>,
}

pub struct EngineBuilder {
    rules: RuleRegistry,
    pipeline: Pipeline,
    lexicon: Lexicon,
    mode: Mode,
    audit: AuditLog,
    initial: WorldState,
    hook: Option<RecordHook>,
}

impl EngineBuilder {
    pub fn rules(mut self, rules: RuleRegistry) -> Self {
        self.rules = rules;
        self
    }

    pub fn lexicon(mut self, lexicon: Lexicon) -> Self {
        self.lexicon = lexicon;
        self
    }

    pub fn mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn audit(mut self, audit: AuditLog) -> Self {
        self.audit = audit;
        self
    }

    pub fn initial_state(mut self, state: WorldState) -> Self {
        self.initial = state;
        self
    }

    /// Called for every appended audit record, in sequence order, while
    /// the log is locked. Keep it cheap.
    pub fn on_record(mut self, hook: impl Fn(&AuditRecord) + Send + Sync + 'static) -> Self {
        self.hook = Some(Box::new(hook));
        self
    }

    /// Logs the initial snapshot and evaluates it. Any events it raises are
    /// queued for the next [`Engine::process_pending`].
    pub fn start(self, clock: DateTime<Utc>) -> Result<Engine, EngineError> {
        let mut monitor = EventMonitor::new(self.rules.clone());
        let resume_speed = self
            .initial
            .lookup("system.platform.telemetry.groundSpeedMph")
            .and_then(|(_, v)| v.as_f64())
            .unwrap_or(0.0);
        let engine = Engine {
            writer: Mutex::new(Writer {
                monitor: EventMonitor::new(RuleRegistry::new()),
                sources: HashMap::new(),
                idempotency: HashMap::new(),
                resume_speed,
                next_action: 1,
            }),
            shared: RwLock::new(Shared { state: self.initial.clone(), audit: self.audit, advisories: Vec::new() }),
            pending: Mutex::new(VecDeque::new()),
            processing: Mutex::new(()),
            rules: self.rules,
            pipeline: self.pipeline,
            lexicon: self.lexicon,
            mode: self.mode,
            hook: self.hook,
        };
        let events = monitor.evaluate_initial(&self.initial, self.initial.timestamp());
        {
            let mut shared = engine.shared.write().expect("engine lock");
            let payload = json!({
                "snapshotId": self.initial.snapshot_id(),
                "timestamp": format_instant(self.initial.timestamp()),
                "state": self.initial.to_json(),
            });
            engine.append(&mut shared, RecordKind::StateUpdate, clock, payload)?;
            for e in &events {
                engine.append(&mut shared, RecordKind::Event, clock, to_json(e))?;
            }
        }
        engine.writer.lock().expect("engine lock").monitor = monitor;
        if !events.is_empty() && engine.mode != Mode::Pull {
            engine.enqueue(Pending {
                batch: EventBatch { snapshot_id: self.initial.snapshot_id(), events },
                snapshot: self.initial,
                origin: Origin::Event,
                forced: None,
            });
        }
        Ok(engine)
    }
}

impl Engine {
    pub fn builder(pipeline: Pipeline) -> EngineBuilder {
        EngineBuilder {
            rules: RuleRegistry::with_defaults(),
            pipeline,
            lexicon: Lexicon::shipped(),
            mode: Mode::Push,
            audit: AuditLog::in_memory(),
            initial: WorldState::nominal(),
            hook: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn registry(&self) -> &PersonaRegistry {
        self.pipeline.registry()
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn state(&self) -> WorldState {
        self.shared.read().expect("engine lock").state.clone()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.lock().expect("engine lock").len()
    }

    /// Applies a state update, logs it with its events, and queues the
    /// resulting batch unless the server is in pull mode.
    pub fn ingest(&self, patch: Patch, meta: IngestMeta, clock: DateTime<Utc>) -> Result<IngestAck, EngineError> {
        let mut writer = self.writer.lock().expect("engine lock");
        if let Some(snapshot_id) = meta.idempotency_key.as_ref().and_then(|k| writer.idempotency.get(k)) {
            return Ok(IngestAck { snapshot_id: *snapshot_id, events: Vec::new(), duplicate: true, queued: false });
        }
        if let Some((source_id, sequence)) = &meta.source {
            if let Some(&last) = writer.sources.get(source_id) {
                if *sequence <= last {
                    return Err(EngineError::OutOfOrder { source_id: source_id.clone(), sequence: *sequence, last });
                }
            }
        }
        let (snapshot_id, events, queued) = self.apply(&mut writer, patch, meta.source.as_ref().map(|s| s.0.as_str()), clock)?;
        if let Some((source_id, sequence)) = meta.source {
            writer.sources.insert(source_id, sequence);
        }
        if let Some(key) = meta.idempotency_key {
            writer.idempotency.insert(key, snapshot_id);
        }
        Ok(IngestAck { snapshot_id, events, duplicate: false, queued })
    }

    fn apply(
        &self,
        writer: &mut Writer,
        patch: Patch,
        source: Option<&str>,
        clock: DateTime<Utc>,
    ) -> Result<(u64, Vec<StateEvent>, bool), EngineError> {
        let patch = if patch.timestamp().is_some() { patch } else { patch.at(clock) };
        let mut shared = self.shared.write().expect("engine lock");
        let next = apply_update(&shared.state, &patch)?;
        let changes = diff(&shared.state, &next);
        let events = writer.monitor.evaluate(&changes, &next, next.timestamp());
        let mut payload = json!({
            "snapshotId": next.snapshot_id(),
            "timestamp": format_instant(next.timestamp()),
            "patch": patch.to_json(),
            "changes": changes,
        });
        if let Some(source) = source {
            payload["sourceId"] = json!(source);
        }
        self.append(&mut shared, RecordKind::StateUpdate, clock, payload)?;
        for e in &events {
            self.append(&mut shared, RecordKind::Event, clock, to_json(e))?;
        }
        shared.state = next.clone();
        drop(shared);
        let snapshot_id = next.snapshot_id();
        let queued = !events.is_empty() && self.mode != Mode::Pull;
        if queued {
            self.enqueue(Pending {
                batch: EventBatch { snapshot_id, events: events.clone() },
                snapshot: next,
                origin: Origin::Event,
                forced: None,
            });
        }
        Ok((snapshot_id, events, queued))
    }

    /// Validates, logs, and applies an operator action.
    pub fn submit_action(&self, action: OperatorAction, clock: DateTime<Utc>) -> Result<ActionAck, EngineError> {
        let mut writer = self.writer.lock().expect("engine lock");
        let state = self.state();
        match &action.command {
            ActionCommand::AcknowledgeAdvisory { advisory_id } => {
                let shared = self.shared.read().expect("engine lock");
                if !shared.advisories.iter().any(|a| &a.advisory.advisory_id == advisory_id) {
                    return Err(EngineError::UnknownAdvisory(advisory_id.clone()));
                }
            }
            ActionCommand::RequestAdvice { persona_id } => {
                self.registry().persona_for(persona_id)?;
            }
            _ => {}
        }
        let patch = action.command.to_patch(&state, writer.resume_speed)?;
        let action_id = action.action_id.clone().unwrap_or_else(|| format!("act-{:06}", writer.next_action));
        writer.next_action += 1;
        let mut payload = to_json(&action);
        payload["actionId"] = json!(action_id);
        {
            let mut shared = self.shared.write().expect("engine lock");
            self.append(&mut shared, RecordKind::OperatorAction, clock, payload)?;
        }
        let mut ack = ActionAck {
            action_id,
            kind: action.command.kind().into(),
            snapshot_id: None,
            events: Vec::new(),
            queued: false,
        };
        if let ActionCommand::PauseMission = action.command {
            if let Some(speed) = state.lookup("system.platform.telemetry.groundSpeedMph").and_then(|(_, v)| v.as_f64()) {
                if speed > 0.0 {
                    writer.resume_speed = speed;
                }
            }
        }
        if let Some(patch) = patch {
            let (snapshot_id, events, queued) = self.apply(&mut writer, patch, Some("operator"), clock)?;
            ack.snapshot_id = Some(snapshot_id);
            ack.events = events;
            ack.queued = queued;
        }
        match action.command {
            ActionCommand::AcknowledgeAdvisory { advisory_id } => {
                let mut shared = self.shared.write().expect("engine lock");
                for entry in shared.advisories.iter_mut().filter(|a| a.advisory.advisory_id == advisory_id) {
                    entry.acknowledged = true;
                }
            }
            ActionCommand::RequestAdvice { persona_id } => {
                let persona = self.registry().persona_for(&persona_id)?.clone();
                let path = *persona.watch_paths().first().ok_or_else(|| {
                    EngineError::InvalidParameters(format!("persona `{persona_id}` watches no path"))
                })?;
                let event = StateEvent {
                    event_id: writer.monitor.allocate_event_id(),
                    rule_id: OPERATOR_REQUEST.into(),
                    snapshot_id: state.snapshot_id(),
                    triggered_by: None,
                    observed: FieldValue { path, value: state.get(path).clone() },
                    severity: Severity::Info,
                    concerns: persona.domain_tags().to_vec(),
                    detected_at: clock,
                    description: format!("Operator requested advice from {}.", persona.display_name),
                };
                {
                    let mut shared = self.shared.write().expect("engine lock");
                    self.append(&mut shared, RecordKind::Event, clock, to_json(&event))?;
                }
                ack.snapshot_id = Some(state.snapshot_id());
                ack.events = vec![event.clone()];
                ack.queued = true;
                self.enqueue(Pending {
                    batch: EventBatch { snapshot_id: state.snapshot_id(), events: vec![event] },
                    snapshot: state,
                    origin: Origin::Request,
                    forced: Some(persona_id),
                });
            }
            _ => {}
        }
        Ok(ack)
    }

    fn enqueue(&self, pending: Pending) {
        self.pending.lock().expect("engine lock").push_back(pending);
    }

    /// Runs every queued batch in order. Batches are processed one at a time
    /// even when called from several threads.
    pub fn process_pending(&self, clock: DateTime<Utc>) -> Result<Vec<BatchReport>, EngineError> {
        let _turn = self.processing.lock().expect("engine lock");
        let mut reports = Vec::new();
        loop {
            let Some(next) = self.pending.lock().expect("engine lock").pop_front() else { break };
            reports.push(self.process(next, clock)?);
        }
        Ok(reports)
    }

    fn is_stale(&self, pending: &Pending) -> bool {
        if pending.origin == Origin::Request {
            return false;
        }
        let current = self.state();
        if current.snapshot_id() == pending.batch.snapshot_id {
            return false;
        }
        !pending.batch.events.iter().any(|e| {
            self.rules.get(&e.rule_id).is_some_and(|rule| rule.is_satisfied(&current, current.timestamp()))
        })
    }

    fn process(&self, pending: Pending, clock: DateTime<Utc>) -> Result<BatchReport, EngineError> {
        let started = Instant::now();
        let batch_ref = BatchRef::of(&pending.batch);
        if self.is_stale(&pending) {
            let mut shared = self.shared.write().expect("engine lock");
            let payload = json!({
                "status": "stale",
                "batchId": batch_ref.batch_id,
                "snapshotId": batch_ref.snapshot_id,
                "eventIds": batch_ref.event_ids,
                "supersededBy": shared.state.snapshot_id(),
            });
            self.append(&mut shared, RecordKind::Event, clock, payload)?;
            return Ok(BatchReport {
                batch: batch_ref,
                origin: pending.origin,
                stale: true,
                selection: None,
                advisories: Vec::new(),
                briefing: None,
                scope_reports: Vec::new(),
                conflicts: Vec::new(),
                elapsed: started.elapsed(),
            });
        }
        let run = match &pending.forced {
            Some(persona) => self.pipeline.run_for(&pending.batch, &pending.snapshot, std::slice::from_ref(persona)),
            None => self.pipeline.run(&pending.batch, &pending.snapshot),
        };
        let outcome = match run {
            Ok(outcome) => outcome,
            Err(e) => {
                let mut shared = self.shared.write().expect("engine lock");
                let payload = json!({
                    "status": "failed",
                    "batchId": batch_ref.batch_id,
                    "snapshotId": batch_ref.snapshot_id,
                    "eventIds": batch_ref.event_ids,
                    "error": e.to_string(),
                });
                self.append(&mut shared, RecordKind::Event, clock, payload)?;
                return Err(e.into());
            }
        };
        let scope_reports: Vec<ScopeReport> = outcome
            .advisories
            .iter()
            .map(|a| {
                let persona = self.registry().persona_for(&a.persona_id).expect("advisory persona is registered");
                classify_scope(a, persona, &self.lexicon)
            })
            .collect();
        let conflicts = detect_conflicts(&outcome.advisories);
        let severity = pending.batch.max_severity().unwrap_or(Severity::Info);
        let envelope = |value: Json| -> Json {
            let mut value = value;
            value["batchId"] = json!(outcome.batch.batch_id);
            value["batchSeverity"] = json!(severity);
            value["origin"] = json!(pending.origin);
            value
        };
        {
            let mut shared = self.shared.write().expect("engine lock");
            for entry in &outcome.trace {
                self.append(&mut shared, entry.kind, clock, entry.payload.clone())?;
            }
            if let Some(briefing) = &outcome.briefing {
                self.append(&mut shared, RecordKind::Briefing, clock, envelope(to_json(briefing)))?;
            }
            for (advisory, scope) in outcome.advisories.iter().zip(&scope_reports) {
                let mut payload = envelope(to_json(advisory));
                payload["scopeReport"] = to_json(scope);
                self.append(&mut shared, RecordKind::Advisory, clock, payload)?;
                shared.advisories.push(AdvisoryEntry {
                    advisory: advisory.clone(),
                    batch_id: outcome.batch.batch_id.clone(),
                    origin: pending.origin,
                    acknowledged: false,
                    scope_report: scope.clone(),
                });
            }
            for conflict in &conflicts {
                self.append(&mut shared, RecordKind::Conflict, clock, envelope(to_json(conflict)))?;
            }
            for scope in &scope_reports {
                self.append(&mut shared, RecordKind::ScopeReport, clock, envelope(to_json(scope)))?;
            }
        }
        Ok(BatchReport {
            batch: outcome.batch,
            origin: pending.origin,
            stale: false,
            selection: Some(outcome.selection),
            advisories: outcome.advisories,
            briefing: outcome.briefing,
            scope_reports,
            conflicts,
            elapsed: started.elapsed(),
        })
    }

    fn append(&self, shared: &mut Shared, kind: RecordKind, clock: DateTime<Utc>, payload: Json) -> Result<(), EngineError> {
        let record = shared.audit.append(kind, clock, payload)?;
        if let Some(hook) = &self.hook {
            hook(record);
        }
        Ok(())
    }

    /// Stored advisories, oldest first, optionally for one persona.
    pub fn advisories(&self, persona: Option<&str>) -> Vec<AdvisoryEntry> {
        let shared = self.shared.read().expect("engine lock");
        shared
            .advisories
            .iter()
            .filter(|a| persona.is_none_or(|p| a.advisory.persona_id == p))
            .cloned()
            .collect()
    }

    pub fn log_len(&self) -> u64 {
        self.shared.read().expect("engine lock").audit.len()
    }

    /// Records `[from, to)`.
    pub fn log_range(&self, from: u64, to: u64) -> Result<Vec<AuditRecord>, EngineError> {
        Ok(self.shared.read().expect("engine lock").audit.range(from, to)?.to_vec())
    }

    /// Records after `sequence`, or all of them.
    pub fn log_since(&self, sequence: Option<u64>) -> Vec<AuditRecord> {
        self.shared.read().expect("engine lock").audit.since(sequence).to_vec()
    }

    pub fn verify_log(&self) -> Result<(), EngineError> {
        Ok(self.shared.read().expect("engine lock").audit.verify()?)
    }

    /// Runs `f` against the log while holding the read lock.
    pub fn with_log<T>(&self, f: impl FnOnce(&AuditLog) -> T) -> T {
        f(&self.shared.read().expect("engine lock").audit)
    }

    /// Per-persona selection rationale from the most recent selection record.
    pub fn last_selection(&self) -> Option<Json> {
        self.with_log(|log| {
            log.records().iter().rev().find(|r| r.record_kind == RecordKind::Selection).map(|r| r.payload.clone())
        })
    }

    pub fn fingerprint(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("backend", self.pipeline.backend().identity()),
            ("personas", self.registry().fingerprint().to_string()),
            ("mode", self.mode.to_string()),
        ])
    }
}

fn to_json<T: Serialize>(value: &T) -> Json {
    serde_json::to_value(value).expect("engine values serialize")
}

/// Shared handle used by servers.
pub type SharedEngine = Arc<Engine>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::RuleBackend;
    use crate::worldstate::Value;

    fn engine(mode: Mode) -> Engine {
        let pipeline = Pipeline::new(Arc::new(PersonaRegistry::shipped()), Arc::new(RuleBackend::new()));
        let start = WorldState::nominal().timestamp();
        Engine::builder(pipeline).mode(mode).start(start).unwrap()
    }

    fn windy() -> Patch {
        Patch::new()
            .set("environment.weather.windSpeedMph", Value::Number(22.0))
            .unwrap()
            .set("environment.weather.forecastTrend", Value::Text("WORSENING".into()))
            .unwrap()
    }

    fn clock(minutes: i64) -> DateTime<Utc> {
        WorldState::nominal().timestamp() + chrono::Duration::minutes(minutes)
    }

    #[test]
    fn wind_update_yields_a_safety_advisory() {
        let e = engine(Mode::Push);
        let ack = e.ingest(windy(), IngestMeta::default(), clock(1)).unwrap();
        assert_eq!(ack.events.len(), 2);
        assert!(ack.queued);
        let reports = e.process_pending(clock(1)).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].selection.as_ref().unwrap().selected_advocates, ["safety_controller"]);
        assert_eq!(e.advisories(Some("safety_controller")).len(), 1);
        assert!(e.advisories(Some("ethical_governor")).is_empty());
        e.verify_log().unwrap();
    }

    #[test]
    fn idempotency_and_source_order() {
        let e = engine(Mode::Push);
        let meta = |seq: u64, key: &str| IngestMeta { source: Some(("uav-1".into(), seq)), idempotency_key: Some(key.into()) };
        let first = e.ingest(windy(), meta(1, "k1"), clock(1)).unwrap();
        let again = e.ingest(windy(), meta(1, "k1"), clock(1)).unwrap();
        assert!(again.duplicate);
        assert_eq!(first.snapshot_id, again.snapshot_id);
        let err = e.ingest(Patch::new(), meta(1, "k2"), clock(2)).unwrap_err();
        assert!(matches!(err, EngineError::OutOfOrder { last: 1, .. }));
        assert!(e.ingest(Patch::new(), meta(2, "k3"), clock(2)).is_ok());
    }

    #[test]
    fn superseded_batch_is_stale() {
        let e = engine(Mode::Push);
        e.ingest(windy(), IngestMeta::default(), clock(1)).unwrap();
        let calm = Patch::new()
            .set("environment.weather.windSpeedMph", Value::Number(5.0))
            .unwrap()
            .set("environment.weather.forecastTrend", Value::Text("STABLE".into()))
            .unwrap();
        e.ingest(calm, IngestMeta::default(), clock(2)).unwrap();
        let reports = e.process_pending(clock(2)).unwrap();
        assert!(reports[0].stale);
        assert!(e.advisories(None).is_empty());
    }

    #[test]
    fn pull_mode_waits_for_a_request() {
        let e = engine(Mode::Pull);
        let ack = e.ingest(windy(), IngestMeta::default(), clock(1)).unwrap();
        assert!(!ack.queued);
        assert!(e.process_pending(clock(1)).unwrap().is_empty());
        let request = OperatorAction::new(ActionCommand::RequestAdvice { persona_id: "safety_controller".into() });
        let ack = e.submit_action(request, clock(2)).unwrap();
        assert!(ack.queued);
        let reports = e.process_pending(clock(2)).unwrap();
        assert_eq!(reports[0].origin, Origin::Request);
        assert_eq!(reports[0].advisories.len(), 1);
    }

    #[test]
    fn actions_patch_state_and_acknowledge() {
        let e = engine(Mode::Push);
        e.ingest(windy(), IngestMeta::default(), clock(1)).unwrap();
        e.process_pending(clock(1)).unwrap();
        let ack = e
            .submit_action(OperatorAction::new(ActionCommand::ReduceSpeed { target_mph: 15.0 }), clock(2))
            .unwrap();
        assert!(ack.snapshot_id.is_some());
        assert_eq!(e.state().get(crate::worldstate::FieldPath::resolve("system.telemetry.groundSpeedMph").unwrap()), &Value::Number(15.0));
        let id = e.advisories(None)[0].advisory.advisory_id.clone();
        e.submit_action(OperatorAction::new(ActionCommand::AcknowledgeAdvisory { advisory_id: id }), clock(3))
            .unwrap();
        assert!(e.advisories(None)[0].acknowledged);
        let err = e
            .submit_action(OperatorAction::new(ActionCommand::AcknowledgeAdvisory { advisory_id: "adv-x".into() }), clock(3))
            .unwrap_err();
        assert!(matches!(err, EngineError::UnknownAdvisory(_)));
    }

    #[test]
    fn pause_then_resume_restores_speed() {
        let e = engine(Mode::Push);
        let speed = crate::worldstate::FieldPath::resolve("system.telemetry.groundSpeedMph").unwrap();
        e.submit_action(OperatorAction::new(ActionCommand::PauseMission), clock(1)).unwrap();
        assert_eq!(e.state().get(speed), &Value::Number(0.0));
        e.submit_action(OperatorAction::new(ActionCommand::ResumeMission { ground_speed_mph: None }), clock(2))
            .unwrap();
        assert_eq!(e.state().get(speed), &Value::Number(20.0));
    }
}
