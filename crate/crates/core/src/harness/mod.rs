//! Scenario files, scenario runs, and suite scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::alignment::{ConflictPair, Lexicon};
use crate::audit::AuditLog;
use crate::engine::{Engine, EngineError, IngestMeta, Mode};
use crate::eventmon::RuleRegistry;
use crate::personas::PersonaRegistry;
use crate::pipeline::{Advisory, GenerationBackend, Pipeline, PipelineConfig, RuleBackend};
use crate::worldstate::{apply_update, format_duration, parse_duration, ParseMode, Patch, WorldState, WorldStateError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{scenario}: {reason}")]
    Parse { scenario: String, reason: String },
    #[error("{scenario}: {source}")]
    State { scenario: String, source: WorldStateError },
    #[error("{scenario}: unknown persona `{persona}` in expectedActivation")]
    UnknownPersona { scenario: String, persona: String },
    #[error("{0}: no scenario files found")]
    EmptySuite(PathBuf),
    #[error("{scenario}: {source}")]
    Run { scenario: String, source: EngineError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Baseline,
    Safety,
    Ethics,
    Regulatory,
    CrossDomain,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ScenarioFile {
    scenario_id: String,
    name: String,
    category: Category,
    #[serde(default)]
    initial: Option<Json>,
    #[serde(default)]
    timeline: Vec<StepFile>,
    expected_activation: Vec<String>,
    #[serde(default)]
    expected_conflicts: usize,
    #[serde(default)]
    notes: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepFile {
    offset: String,
    patch: Json,
    #[serde(default)]
    note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Seconds after the initial snapshot.
    pub offset: u64,
    pub patch: Patch,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub scenario_id: String,
    pub name: String,
    pub category: Category,
    /// The nominal baseline with the scenario's `initial` patch applied.
    pub initial: WorldState,
    pub timeline: Vec<Step>,
    pub expected_activation: BTreeSet<String>,
    pub expected_conflicts: usize,
    pub notes: String,
}

pub fn load_scenario(path: &Path, registry: &PersonaRegistry) -> Result<Scenario, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    parse_scenario(&text, registry, &path.display().to_string())
}

/// `label` names the scenario in errors raised before its id is known.
pub fn parse_scenario(text: &str, registry: &PersonaRegistry, label: &str) -> Result<Scenario, HarnessError> {
    let file: ScenarioFile = serde_json::from_str(text)
        .map_err(|e| HarnessError::Parse { scenario: label.to_string(), reason: e.to_string() })?;
    let id = file.scenario_id.clone();
    let state_err = |source| HarnessError::State { scenario: id.clone(), source };
    let parse_err = |reason: String| HarnessError::Parse { scenario: id.clone(), reason };

    let mut initial = WorldState::nominal();
    if let Some(json) = &file.initial {
        let patch = Patch::from_json(json, ParseMode::Strict).map_err(state_err)?;
        initial = apply_update(&initial, &patch).map_err(state_err)?;
    }
    let mut timeline = Vec::new();
    let mut last = None;
    for (i, step) in file.timeline.into_iter().enumerate() {
        let offset = parse_duration(&step.offset)
            .ok_or_else(|| parse_err(format!("step {}: offset `{}` is not hh:mm:ss", i + 1, step.offset)))?;
        if last.is_some_and(|l| offset < l) {
            return Err(parse_err(format!("step {}: offsets must not decrease", i + 1)));
        }
        last = Some(offset);
        let patch = Patch::from_json(&step.patch, ParseMode::Strict).map_err(state_err)?;
        if patch.timestamp().is_some() {
            return Err(parse_err(format!("step {}: patches take their time from the offset", i + 1)));
        }
        timeline.push(Step { offset, patch, note: step.note });
    }
    if timeline.is_empty() && file.category != Category::Baseline {
        return Err(parse_err("timeline is empty".into()));
    }
    let mut expected = BTreeSet::new();
    for persona in file.expected_activation {
        if registry.persona_for(&persona).is_err() {
            return Err(HarnessError::UnknownPersona { scenario: id, persona });
        }
        expected.insert(persona);
    }
    Ok(Scenario {
        scenario_id: file.scenario_id,
        name: file.name,
        category: file.category,
        initial,
        timeline,
        expected_activation: expected,
        expected_conflicts: file.expected_conflicts,
        notes: file.notes,
    })
}

/// Everything a run needs besides the scenario.
#[derive(Clone)]
pub struct SystemConfig {
    pub registry: Arc<PersonaRegistry>,
    pub backend: Arc<dyn GenerationBackend>,
    pub fallback: RuleBackend,
    pub rules: RuleRegistry,
    pub lexicon: Lexicon,
    pub pipeline: PipelineConfig,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            registry: Arc::new(PersonaRegistry::shipped()),
            backend: Arc::new(RuleBackend::new()),
            fallback: RuleBackend::new(),
            rules: RuleRegistry::with_defaults(),
            lexicon: Lexicon::shipped(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl SystemConfig {
    pub fn with_backend(mut self, backend: Arc<dyn GenerationBackend>) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_rules(mut self, rules: RuleRegistry) -> Self {
        self.rules = rules;
        self
    }

    pub fn with_registry(mut self, registry: Arc<PersonaRegistry>) -> Self {
        self.registry = registry;
        self
    }

    pub fn with_fallback(mut self, fallback: RuleBackend) -> Self {
        self.fallback = fallback;
        self
    }

    pub fn pipeline(&self) -> Pipeline {
        Pipeline::new(self.registry.clone(), self.backend.clone())
            .with_fallback(self.fallback.clone())
            .with_config(self.pipeline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StepReport {
    pub offset: String,
    pub snapshot_id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub events: Vec<String>,
    pub selected: Vec<String>,
    pub advisories: Vec<String>,
    pub elapsed_micros: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioReport {
    pub scenario_id: String,
    pub name: String,
    pub category: Category,
    pub expected_activation: BTreeSet<String>,
    pub observed_activation: BTreeSet<String>,
    pub activation_match: bool,
    pub advisories_emitted: usize,
    pub leakage_count: usize,
    pub expected_conflicts: usize,
    pub conflicts: Vec<ConflictPair>,
    pub conflict_match: bool,
    /// Cited paths whose quoted value differs from the triggering snapshot.
    pub citation_failures: Vec<String>,
    pub passed: bool,
    pub steps: Vec<StepReport>,
    #[serde(skip)]
    pub advisories: Vec<Advisory>,
}

/// A finished run with the engine that produced it, for log inspection.
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub engine: Engine,
}

pub fn run_scenario(scenario: &Scenario, config: &SystemConfig) -> Result<ScenarioReport, HarnessError> {
    execute(scenario, config, AuditLog::in_memory()).map(|run| run.report)
}

pub fn execute(scenario: &Scenario, config: &SystemConfig, audit: AuditLog) -> Result<ScenarioRun, HarnessError> {
    let run_err = |source| HarnessError::Run { scenario: scenario.scenario_id.clone(), source };
    let start = scenario.initial.timestamp();
    let engine = Engine::builder(config.pipeline())
        .rules(config.rules.clone())
        .lexicon(config.lexicon.clone())
        .mode(Mode::Push)
        .audit(audit)
        .initial_state(scenario.initial.clone())
        .start(start)
        .map_err(run_err)?;
    let mut snapshots = BTreeMap::from([(scenario.initial.snapshot_id(), scenario.initial.clone())]);
    let mut steps = Vec::new();
    let mut batches = Vec::new();

    let timer = std::time::Instant::now();
    let initial_reports = engine.process_pending(start).map_err(run_err)?;
    steps.push(step_report("initial", scenario.initial.snapshot_id(), None, &initial_reports, timer));
    batches.extend(initial_reports);

    for step in &scenario.timeline {
        let timer = std::time::Instant::now();
        let clock: DateTime<Utc> = start + chrono::Duration::seconds(step.offset as i64);
        let ack = engine.ingest(step.patch.clone(), IngestMeta::default(), clock).map_err(run_err)?;
        snapshots.insert(ack.snapshot_id, engine.state());
        let reports = engine.process_pending(clock).map_err(run_err)?;
        steps.push(step_report(&format_duration(step.offset), ack.snapshot_id, step.note.clone(), &reports, timer));
        batches.extend(reports);
    }

    let mut observed = BTreeSet::new();
    let mut advisories = Vec::new();
    let mut conflicts = Vec::new();
    let mut leakage = 0;
    for batch in batches.iter().filter(|b| !b.stale) {
        if let Some(selection) = &batch.selection {
            observed.extend(selection.selected_advocates.iter().cloned());
        }
        advisories.extend(batch.advisories.iter().cloned());
        conflicts.extend(batch.conflicts.iter().cloned());
        leakage += batch.scope_reports.iter().filter(|r| r.leakage).count();
    }
    let citation_failures = check_citations(&advisories, &snapshots);
    let activation_match = observed == scenario.expected_activation;
    let conflict_match = conflicts.len() == scenario.expected_conflicts;
    let report = ScenarioReport {
        scenario_id: scenario.scenario_id.clone(),
        name: scenario.name.clone(),
        category: scenario.category,
        expected_activation: scenario.expected_activation.clone(),
        activation_match,
        observed_activation: observed,
        advisories_emitted: advisories.len(),
        leakage_count: leakage,
        expected_conflicts: scenario.expected_conflicts,
        conflicts,
        conflict_match,
        passed: activation_match && conflict_match && leakage == 0 && citation_failures.is_empty(),
        citation_failures,
        steps,
        advisories,
    };
    Ok(ScenarioRun { report, engine })
}

fn step_report(
    offset: &str,
    snapshot_id: u64,
    note: Option<String>,
    reports: &[crate::engine::BatchReport],
    timer: std::time::Instant,
) -> StepReport {
    let live = || reports.iter().filter(|b| !b.stale);
    StepReport {
        offset: offset.to_string(),
        snapshot_id,
        note,
        events: reports.iter().flat_map(|b| b.batch.event_ids.iter().map(|id| format!("evt-{id:06}"))).collect(),
        selected: live().flat_map(|b| b.selection.iter().flat_map(|s| s.selected_advocates.clone())).collect(),
        advisories: live().flat_map(|b| b.advisories.iter().map(|a| a.advisory_id.clone())).collect(),
        elapsed_micros: timer.elapsed().as_micros() as u64,
    }
}

/// Every cited path must be quoted with its value in the advisory's own
/// snapshot, if it is quoted at all.
fn check_citations(advisories: &[Advisory], snapshots: &BTreeMap<u64, WorldState>) -> Vec<String> {
    let mut failures = Vec::new();
    for advisory in advisories {
        let Some(snapshot) = snapshots.get(&advisory.snapshot_id) else {
            failures.push(format!("{}: snapshot {} unknown", advisory.advisory_id, advisory.snapshot_id));
            continue;
        };
        for rec in &advisory.recommendations {
            if rec.cited_paths.is_empty() {
                failures.push(format!("{}: recommendation cites nothing", advisory.advisory_id));
            }
            for path in &rec.cited_paths {
                let marker = format!("{}=", path.as_str());
                if let Some(at) = rec.text.find(&marker) {
                    let rest = &rec.text[at + marker.len()..];
                    let quoted = rest.split('`').next().unwrap_or_default();
                    let actual = snapshot.get(*path).to_string();
                    if quoted != actual {
                        failures.push(format!("{}: {} quoted as {quoted}, snapshot has {actual}", advisory.advisory_id, path.as_str()));
                    }
                }
            }
        }
    }
    failures
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SuiteReport {
    pub backend: String,
    pub personas: Vec<String>,
    pub passed: bool,
    pub scenarios: Vec<ScenarioReport>,
}

impl SuiteReport {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }

    /// The same report with wall-clock timings zeroed.
    pub fn normalized(&self) -> SuiteReport {
        let mut out = self.clone();
        for s in &mut out.scenarios {
            for step in &mut s.steps {
                step.elapsed_micros = 0;
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Personas across, scenarios down. `X` marks an activated persona; a
    /// mismatch names the expected set.
    pub fn matrix(&self, registry: &PersonaRegistry) -> String {
        let personas: Vec<(&str, &str)> =
            registry.iter().map(|p| (p.persona_id.as_str(), p.display_name.as_str())).collect();
        let id_width = self.scenarios.iter().map(|s| s.scenario_id.len()).max().unwrap_or(8).max(8);
        let mut out = String::new();
        let _ = write!(out, "{:<id_width$}", "scenario");
        for (_, name) in &personas {
            let _ = write!(out, "  {name:^w$}", w = name.len().max(3));
        }
        out.push_str("  result\n");
        for s in &self.scenarios {
            let _ = write!(out, "{:<id_width$}", s.scenario_id);
            for (id, name) in &personas {
                let mark = if s.observed_activation.contains(*id) { "X" } else { "." };
                let _ = write!(out, "  {mark:^w$}", w = name.len().max(3));
            }
            out.push_str(if s.passed { "  pass" } else { "  FAIL" });
            let mut why = Vec::new();
            if !s.activation_match {
                why.push(format!(
                    "expected {{{}}}",
                    s.expected_activation.iter().cloned().collect::<Vec<_>>().join(", ")
                ));
            }
            if !s.conflict_match {
                why.push(format!("{} conflicts, expected {}", s.conflicts.len(), s.expected_conflicts));
            }
            if s.leakage_count > 0 {
                why.push(format!("{} leaking advisories", s.leakage_count));
            }
            if !s.citation_failures.is_empty() {
                why.push(format!("{} citation failures", s.citation_failures.len()));
            }
            if !why.is_empty() {
                let _ = write!(out, " ({})", why.join("; "));
            }
            out.push('\n');
        }
        let passed = self.scenarios.iter().filter(|s| s.passed).count();
        let _ = writeln!(out, "{passed}/{} scenarios passed", self.scenarios.len());
        out
    }
}

/// `*.json` files directly under `dir`, sorted by name.
pub fn scenario_files(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let io = |source| HarnessError::Io { path: dir.to_path_buf(), source };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(HarnessError::EmptySuite(dir.to_path_buf()));
    }
    Ok(files)
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Persist each scenario's audit log as `<dir>/<scenarioId>.ndjson`.
    pub log_dir: Option<PathBuf>,
}

pub fn run_suite(dir: &Path, config: &SystemConfig, options: &SuiteOptions) -> Result<SuiteReport, HarnessError> {
    let scenarios = scenario_files(dir)?
        .iter()
        .map(|f| load_scenario(f, &config.registry))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reports = Vec::new();
    for scenario in &scenarios {
        let audit = match &options.log_dir {
            Some(log_dir) => {
                let path = log_dir.join(format!("{}.ndjson", scenario.scenario_id));
                for stale in [path.clone(), crate::audit::anchor_path(&path)] {
                    if stale.exists() {
                        std::fs::remove_file(&stale).map_err(|source| HarnessError::Io { path: stale.clone(), source })?;
                    }
                }
                AuditLog::open(&path).map_err(|e| HarnessError::Run { scenario: scenario.scenario_id.clone(), source: e.into() })?
            }
            None => AuditLog::in_memory(),
        };
        reports.push(execute(scenario, config, audit)?.report);
    }
    Ok(SuiteReport {
        backend: config.backend.identity(),
        personas: config.registry.ids().iter().map(|s| s.to_string()).collect(),
        passed: reports.iter().all(|r| r.passed),
        scenarios: reports,
    })
}
