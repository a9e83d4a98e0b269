//! Persona selection, persona-based advocacy, and summarization.
//!
//! Every backend exchange goes through the same loop: ask, and on an
//! unparseable reply ask once more with the parse error attached. If the
//! second reply is also unusable, or the backend cannot be reached at all,
//! the step is answered by the rule backend instead. Advocacy replies that
//! cite paths the snapshot does not have get the same single reprompt;
//! after that the offending recommendations are dropped.

mod backend;
mod prompt;
mod reply;
mod templates;

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

pub use backend::{
    headline, reply_text, BackendError, BackendKind, GenerationBackend, HttpBackend, LiveConfig, MockBackend,
    RuleBackend, ScriptedBackend,
};
pub use prompt::{
    build_advocacy_prompt, build_selection_prompt, build_summary_prompt, condition_list, excerpt_map, fill,
    standards_block, state_clause, Prompt, PromptKind, DEFAULT_PROMPT_BUDGET, MAX_RECOMMENDATIONS, MAX_SELECTED,
    MIN_RECOMMENDATIONS,
};
pub use reply::{extract_json, parse_advocacy, parse_selection, parse_summary, CheckedAdvocacy};
pub use templates::{
    AdvocacyTemplate, RecommendationSpec, RecommendationTemplate, Rendered, Segment, TemplateError, TemplateSpec,
    TemplateTable,
};

use crate::audit::RecordKind;
use crate::eventmon::{EventBatch, Severity, StateEvent};
use crate::personas::{AdvocatePersona, PersonaError, PersonaRegistry};
use crate::worldstate::{FieldPath, WorldState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("event batch is empty")]
    EmptyBatch,
    #[error("no advisories to summarize")]
    NoAdvisories,
    #[error("{} prompt is {length} characters, over the {budget}-character budget", kind.as_str())]
    PromptBudgetExceeded { kind: PromptKind, length: usize, budget: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),
    #[error("citation violation: {0}")]
    CitationViolation(String),
    #[error(transparent)]
    Persona(#[from] PersonaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Do,
    DoNot,
}

impl Polarity {
    pub fn opposes(self, other: Polarity) -> bool {
        self != other
    }
}

/// Structured action hint attached to a recommendation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Directive {
    pub actuator: String,
    pub polarity: Polarity,
    pub verb: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Recommendation {
    pub text: String,
    pub cited_paths: Vec<FieldPath>,
    #[serde(default)]
    pub cited_standards: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directive: Option<Directive>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Advisory {
    pub advisory_id: String,
    pub persona_id: String,
    /// The highest-severity event this persona answered.
    pub event_id: u64,
    pub related_event_ids: Vec<u64>,
    pub snapshot_id: u64,
    pub recommendations: Vec<Recommendation>,
    pub severity: Severity,
    pub created_at: DateTime<Utc>,
    pub generated_by: String,
}

impl Advisory {
    pub fn id_for(event_id: u64, persona_id: &str) -> String {
        format!("adv-{event_id:06}-{persona_id}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SelectionResult {
    pub selected_advocates: Vec<String>,
    pub rationale: BTreeMap<String, String>,
    /// Personas the backend chose beyond the cap.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub truncated: Vec<String>,
    pub generated_by: String,
}

impl SelectionResult {
    pub fn empty() -> SelectionResult {
        SelectionResult {
            selected_advocates: Vec::new(),
            rationale: BTreeMap::new(),
            truncated: Vec::new(),
            generated_by: "none".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SummaryItem {
    pub text: String,
    pub advisory_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BatchRef {
    pub batch_id: String,
    pub snapshot_id: u64,
    pub event_ids: Vec<u64>,
}

impl BatchRef {
    pub fn of(batch: &EventBatch) -> BatchRef {
        let first = batch.events.first().map_or(0, |e| e.event_id);
        BatchRef {
            batch_id: format!("bat-{:06}-{first:06}", batch.snapshot_id),
            snapshot_id: batch.snapshot_id,
            event_ids: batch.events.iter().map(|e| e.event_id).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OperatorBriefing {
    pub briefing_id: String,
    pub event_batch_ref: BatchRef,
    pub summary_items: Vec<SummaryItem>,
    pub advisory_refs: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub generated_by: String,
}

/// One audit-bound artifact produced while running a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub kind: RecordKind,
    pub payload: Json,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub batch: BatchRef,
    pub selection: SelectionResult,
    pub advisories: Vec<Advisory>,
    pub briefing: Option<OperatorBriefing>,
    /// Prompts, replies, and the selection record, in the order they occurred
    /// (per-persona exchanges grouped in selection order).
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    pub prompt_budget: usize,
    /// Answer with the rule backend when the configured backend fails.
    pub fallback: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { prompt_budget: DEFAULT_PROMPT_BUDGET, fallback: true }
    }
}

struct Answer<T> {
    value: T,
    generated_by: String,
}

pub struct Pipeline {
    registry: Arc<PersonaRegistry>,
    backend: Arc<dyn GenerationBackend>,
    fallback: RuleBackend,
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(registry: Arc<PersonaRegistry>, backend: Arc<dyn GenerationBackend>) -> Pipeline {
        Pipeline { registry, backend, fallback: RuleBackend::new(), config: PipelineConfig::default() }
    }

    pub fn with_config(mut self, config: PipelineConfig) -> Pipeline {
        self.config = config;
        self
    }

    pub fn with_fallback(mut self, fallback: RuleBackend) -> Pipeline {
        self.fallback = fallback;
        self
    }

    pub fn registry(&self) -> &PersonaRegistry {
        &self.registry
    }

    pub fn backend(&self) -> &dyn GenerationBackend {
        self.backend.as_ref()
    }

    /// Runs selection, advocacy, and summarization for one batch.
    pub fn run(&self, batch: &EventBatch, snapshot: &WorldState) -> Result<PipelineOutcome, PipelineError> {
        if batch.is_empty() {
            return Err(PipelineError::EmptyBatch);
        }
        let batch_ref = BatchRef::of(batch);
        let mut trace = Vec::new();
        let selection = self.select(batch, snapshot, &batch_ref, &mut trace)?;
        self.finish(batch, snapshot, batch_ref, selection, trace)
    }

    /// Skips selection and runs advocacy for the named personas only.
    pub fn run_for(
        &self,
        batch: &EventBatch,
        snapshot: &WorldState,
        persona_ids: &[String],
    ) -> Result<PipelineOutcome, PipelineError> {
        if batch.is_empty() {
            return Err(PipelineError::EmptyBatch);
        }
        let mut rationale = BTreeMap::new();
        for p in self.registry.iter() {
            let text = if persona_ids.contains(&p.persona_id) { "Requested by the operator." } else { "Not requested." };
            rationale.insert(p.persona_id.clone(), text.to_string());
        }
        let mut selected = Vec::new();
        for id in persona_ids {
            self.registry.persona_for(id)?;
            if !selected.contains(id) {
                selected.push(id.clone());
            }
        }
        let selection = SelectionResult { selected_advocates: selected, rationale, truncated: Vec::new(), generated_by: "operator".into() };
        let batch_ref = BatchRef::of(batch);
        let mut trace = Vec::new();
        trace.push(TraceEntry { kind: RecordKind::Selection, payload: selection_payload(&batch_ref, &selection) });
        self.finish(batch, snapshot, batch_ref, selection, trace)
    }

    fn finish(
        &self,
        batch: &EventBatch,
        snapshot: &WorldState,
        batch_ref: BatchRef,
        selection: SelectionResult,
        mut trace: Vec<TraceEntry>,
    ) -> Result<PipelineOutcome, PipelineError> {
        let personas: Vec<&AdvocatePersona> = selection
            .selected_advocates
            .iter()
            .map(|id| self.registry.persona_for(id))
            .collect::<Result<_, _>>()?;
        let results: Vec<Result<(Advisory, Vec<TraceEntry>), PipelineError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = personas
                .iter()
                .map(|persona| {
                    let events = relevant_events(persona, &batch.events);
                    let batch_ref = &batch_ref;
                    scope.spawn(move || self.advocate(persona, &events, snapshot, batch_ref))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("advocacy thread panicked")).collect()
        });
        let mut advisories = Vec::new();
        for result in results {
            let (advisory, entries) = result?;
            trace.extend(entries);
            advisories.push(advisory);
        }
        let briefing = if advisories.is_empty() {
            None
        } else {
            Some(self.summarize(&advisories, &batch_ref, batch_clock(batch), &mut trace)?)
        };
        Ok(PipelineOutcome { batch: batch_ref, selection, advisories, briefing, trace })
    }

    pub fn select(
        &self,
        batch: &EventBatch,
        snapshot: &WorldState,
        batch_ref: &BatchRef,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<SelectionResult, PipelineError> {
        let prompt = build_selection_prompt(batch, snapshot, &self.registry, self.config.prompt_budget)?;
        let answer = self.ask(&prompt, batch_ref, trace, |text| {
            let json = extract_json(text)?;
            parse_selection(json, &self.registry).map(|v| (v, Vec::new()))
        }, |_| true)?;
        let (selected, rationale) = answer.value;
        let (selected, truncated) = self.cap(selected, &batch.events);
        let selection = SelectionResult { selected_advocates: selected, rationale, truncated, generated_by: answer.generated_by };
        trace.push(TraceEntry { kind: RecordKind::Selection, payload: selection_payload(batch_ref, &selection) });
        Ok(selection)
    }

    /// Keeps at most [`MAX_SELECTED`] personas, ranked by the severity of the
    /// events in their scope, then by how many events they match, then by
    /// registry order. Survivors are returned in registry order.
    fn cap(&self, selected: Vec<String>, events: &[StateEvent]) -> (Vec<String>, Vec<String>) {
        let position = |id: &str| self.registry.position(id).unwrap_or(usize::MAX);
        let mut ranked: Vec<(Option<Severity>, usize, usize, String)> = selected
            .into_iter()
            .map(|id| {
                let persona = self.registry.persona_for(&id).expect("selection ids are resolved");
                let matching: Vec<&StateEvent> =
                    events.iter().filter(|e| e.concerns.iter().any(|c| persona.covers(c))).collect();
                let severity = matching.iter().map(|e| e.severity).max();
                (severity, matching.len(), position(&id), id)
            })
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        let truncated: Vec<String> = ranked.iter().skip(MAX_SELECTED).map(|r| r.3.clone()).collect();
        let mut kept: Vec<(usize, String)> = ranked.into_iter().take(MAX_SELECTED).map(|r| (r.2, r.3)).collect();
        kept.sort();
        (kept.into_iter().map(|k| k.1).collect(), truncated)
    }

    /// `events` are the persona's relevant events, primary first.
    pub fn advocate(
        &self,
        persona: &AdvocatePersona,
        events: &[&StateEvent],
        snapshot: &WorldState,
        batch_ref: &BatchRef,
    ) -> Result<(Advisory, Vec<TraceEntry>), PipelineError> {
        let primary = *events.first().ok_or(PipelineError::EmptyBatch)?;
        let prompt = build_advocacy_prompt(persona, events, snapshot, self.config.prompt_budget)?;
        let standards = &self.registry.manifest().standards;
        let mut trace = Vec::new();
        let answer = self.ask(&prompt, batch_ref, &mut trace, |text| {
            let json = extract_json(text)?;
            let checked = parse_advocacy(json, persona, snapshot, standards)?;
            let violations = checked.violations.clone();
            Ok((checked, violations))
        }, |checked: &CheckedAdvocacy| !checked.recommendations.is_empty())?;
        let floor = events.iter().map(|e| e.severity).max().unwrap_or(primary.severity);
        let severity = answer.value.severity.map_or(floor, |s| s.max(floor));
        let advisory = Advisory {
            advisory_id: Advisory::id_for(primary.event_id, &persona.persona_id),
            persona_id: persona.persona_id.clone(),
            event_id: primary.event_id,
            related_event_ids: events.iter().map(|e| e.event_id).collect(),
            snapshot_id: snapshot.snapshot_id(),
            recommendations: answer.value.recommendations,
            severity,
            created_at: primary.detected_at,
            generated_by: answer.generated_by,
        };
        Ok((advisory, trace))
    }

    pub fn summarize(
        &self,
        advisories: &[Advisory],
        batch_ref: &BatchRef,
        clock: DateTime<Utc>,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<OperatorBriefing, PipelineError> {
        let prompt = build_summary_prompt(advisories, self.config.prompt_budget)?;
        let ids: Vec<&str> = advisories.iter().map(|a| a.advisory_id.as_str()).collect();
        let answer = self.ask(&prompt, batch_ref, trace, |text| {
            let json = extract_json(text)?;
            parse_summary(json, &ids).map(|v| (v, Vec::new()))
        }, |_| true)?;
        let first_event = batch_ref.event_ids.first().copied().unwrap_or(0);
        Ok(OperatorBriefing {
            briefing_id: format!("brf-{:06}-{first_event:06}", batch_ref.snapshot_id),
            event_batch_ref: batch_ref.clone(),
            summary_items: answer
                .value
                .into_iter()
                .map(|(text, advisory_refs)| SummaryItem { text, advisory_refs })
                .collect(),
            advisory_refs: ids.iter().map(|s| s.to_string()).collect(),
            created_at: clock,
            generated_by: answer.generated_by,
        })
    }

    /// Ask, reprompt once, then fall back to the rule backend.
    fn ask<T>(
        &self,
        prompt: &Prompt,
        batch_ref: &BatchRef,
        trace: &mut Vec<TraceEntry>,
        parse: impl Fn(&str) -> Result<(T, Vec<String>), String>,
        usable: impl Fn(&T) -> bool,
    ) -> Result<Answer<T>, PipelineError> {
        let identity = self.backend.identity();
        let mut partial: Option<T> = None;
        let mut problem = String::new();
        let mut unavailable = None;
        for attempt in 1..=2u8 {
            let current = if attempt == 1 { prompt.clone() } else { prompt.reprompt(&problem) };
            trace.push(prompt_entry(&current, &identity, attempt, batch_ref));
            let text = match self.backend.complete(&current) {
                Ok(text) => text,
                Err(e) => {
                    trace.push(reply_entry(&current, &identity, attempt, batch_ref, json!({ "error": e.to_string() })));
                    unavailable = Some(e);
                    break;
                }
            };
            match parse(&text) {
                Ok((value, violations)) if violations.is_empty() => {
                    trace.push(reply_entry(&current, &identity, attempt, batch_ref, json!({ "text": text, "outcome": "accepted" })));
                    return Ok(Answer { value, generated_by: identity });
                }
                Ok((value, violations)) => {
                    trace.push(reply_entry(
                        &current,
                        &identity,
                        attempt,
                        batch_ref,
                        json!({ "text": text, "outcome": "citation_violation", "violations": violations }),
                    ));
                    tracing::warn!(backend = %identity, ?violations, "citation violation");
                    problem = format!("citations do not resolve ({})", violations.join("; "));
                    partial = Some(value);
                }
                Err(reason) => {
                    trace.push(reply_entry(
                        &current,
                        &identity,
                        attempt,
                        batch_ref,
                        json!({ "text": text, "outcome": "malformed", "reason": reason }),
                    ));
                    problem = reason;
                }
            }
        }
        if let Some(value) = partial.filter(|v| usable(v)) {
            return Ok(Answer { value, generated_by: identity });
        }
        if !self.config.fallback {
            return Err(match unavailable {
                Some(e) => PipelineError::Backend(e),
                None if problem.starts_with("citations") => PipelineError::CitationViolation(problem),
                None => PipelineError::MalformedBackendReply(problem),
            });
        }
        let fallback_id = format!("{} (fallback)", self.fallback.identity());
        tracing::info!(backend = %identity, "falling back to the rule backend");
        trace.push(prompt_entry(prompt, &fallback_id, 1, batch_ref));
        let text = self.fallback.complete(prompt)?;
        match parse(&text) {
            Ok((value, _)) if usable(&value) => {
                trace.push(reply_entry(prompt, &fallback_id, 1, batch_ref, json!({ "text": text, "outcome": "accepted" })));
                Ok(Answer { value, generated_by: fallback_id })
            }
            Ok(_) => Err(PipelineError::CitationViolation("rule backend produced no usable recommendation".into())),
            Err(reason) => Err(PipelineError::MalformedBackendReply(reason)),
        }
    }
}

/// Events whose concerns fall in the persona's scope, in batch order
/// (severity first). A persona selected without any such event answers the
/// whole batch.
pub fn relevant_events<'a>(persona: &AdvocatePersona, events: &'a [StateEvent]) -> Vec<&'a StateEvent> {
    let matching: Vec<&StateEvent> = events.iter().filter(|e| e.concerns.iter().any(|c| persona.covers(c))).collect();
    if matching.is_empty() {
        events.iter().collect()
    } else {
        matching
    }
}

fn batch_clock(batch: &EventBatch) -> DateTime<Utc> {
    batch.events.iter().map(|e| e.detected_at).max().expect("non-empty batch")
}

fn selection_payload(batch_ref: &BatchRef, selection: &SelectionResult) -> Json {
    let mut payload = serde_json::to_value(selection).expect("selection serializes");
    payload["batchId"] = json!(batch_ref.batch_id);
    payload
}

fn prompt_entry(prompt: &Prompt, backend: &str, attempt: u8, batch_ref: &BatchRef) -> TraceEntry {
    TraceEntry {
        kind: RecordKind::Prompt,
        payload: json!({
            "batchId": batch_ref.batch_id,
            "kind": prompt.kind,
            "personaId": prompt.persona_id,
            "backend": backend,
            "attempt": attempt,
            "text": prompt.render(),
        }),
    }
}

fn reply_entry(prompt: &Prompt, backend: &str, attempt: u8, batch_ref: &BatchRef, body: Json) -> TraceEntry {
    let mut payload = json!({
        "batchId": batch_ref.batch_id,
        "kind": prompt.kind,
        "personaId": prompt.persona_id,
        "backend": backend,
        "attempt": attempt,
    });
    if let (Some(target), Json::Object(extra)) = (payload.as_object_mut(), body) {
        target.extend(extra);
    }
    TraceEntry { kind: RecordKind::BackendReply, payload }
}
