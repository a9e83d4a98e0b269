use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

use super::{Advisory, PipelineError};
use crate::eventmon::{EventBatch, StateEvent};
use crate::personas::{AdvocatePersona, PersonaRegistry};
use crate::worldstate::{FieldPath, WorldState};

pub const DEFAULT_PROMPT_BUDGET: usize = 8_000;
pub const MAX_SELECTED: usize = 3;
pub const MIN_RECOMMENDATIONS: usize = 1;
pub const MAX_RECOMMENDATIONS: usize = 3;

const SELECTION_SYSTEM: &str = include_str!("../../assets/prompts/selection_system.txt");
const SELECTION_INSTRUCTIONS: &str = include_str!("../../assets/prompts/selection.txt");
const SELECTION_SCHEMA: &str = include_str!("../../assets/prompts/selection_schema.txt");
const ADVOCACY_INSTRUCTIONS: &str = include_str!("../../assets/prompts/advocacy.txt");
const ADVOCACY_SCHEMA: &str = include_str!("../../assets/prompts/advocacy_schema.txt");
const SUMMARY_SYSTEM: &str = include_str!("../../assets/prompts/summary_system.txt");
const SUMMARY_INSTRUCTIONS: &str = include_str!("../../assets/prompts/summary.txt");
const SUMMARY_SCHEMA: &str = include_str!("../../assets/prompts/summary_schema.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Selection,
    Advocacy,
    Summary,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Selection => "selection",
            PromptKind::Advocacy => "advocacy",
            PromptKind::Summary => "summary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Prompt {
    pub kind: PromptKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub persona_id: Option<String>,
    pub system_preamble: String,
    /// Canonical JSON.
    pub context_block: String,
    pub standards_block: String,
    pub instruction_block: String,
    pub response_schema: String,
}

impl Prompt {
    pub fn render(&self) -> String {
        let standards = if self.standards_block.is_empty() { "(none)" } else { &self.standards_block };
        format!(
            "### SYSTEM\n{}\n\n### CONTEXT\n{}\n\n### STANDARDS\n{}\n\n### INSTRUCTIONS\n{}\n\n### RESPONSE FORMAT\n{}\n",
            self.system_preamble.trim_end(),
            self.context_block,
            standards.trim_end(),
            self.instruction_block.trim_end(),
            self.response_schema.trim_end()
        )
    }

    pub fn context(&self) -> Result<Json, serde_json::Error> {
        serde_json::from_str(&self.context_block)
    }

    /// The same prompt with a correction note appended to the instructions.
    pub fn reprompt(&self, problem: &str) -> Prompt {
        let mut next = self.clone();
        next.instruction_block = format!(
            "{}\nYour previous reply was rejected: {problem}. Reply again with only the JSON object described below.",
            self.instruction_block.trim_end()
        );
        next
    }
}

/// Replaces `{{name}}` placeholders.
pub fn fill(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

pub fn excerpt_map(snapshot: &WorldState, paths: &[FieldPath]) -> Json {
    let mut map = Map::new();
    for path in paths {
        map.insert(path.as_str().to_string(), snapshot.get(*path).to_json());
    }
    Json::Object(map)
}

/// Excerpt paths in priority order: paths the events touched, then `rest`.
fn excerpt_order<'a>(events: impl IntoIterator<Item = &'a StateEvent>, rest: impl IntoIterator<Item = FieldPath>) -> Vec<FieldPath> {
    let mut order: Vec<FieldPath> = Vec::new();
    let mut push = |p: FieldPath| {
        if !order.contains(&p) {
            order.push(p);
        }
    };
    for e in events {
        push(e.observed.path);
        if let Some(c) = &e.triggered_by {
            push(c.path);
        }
    }
    for p in rest {
        push(p);
    }
    order
}

/// Builds with the full excerpt, dropping the lowest-priority paths until the
/// rendered prompt fits.
fn fit(
    kind: PromptKind,
    budget: usize,
    mut paths: Vec<FieldPath>,
    build: impl Fn(&[FieldPath]) -> Prompt,
) -> Result<Prompt, PipelineError> {
    loop {
        let prompt = build(&paths);
        let length = prompt.render().chars().count();
        if length <= budget {
            return Ok(prompt);
        }
        if paths.pop().is_none() {
            return Err(PipelineError::PromptBudgetExceeded { kind, length, budget });
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// "wind speed 22 mph; forecast trend WORSENING"
pub fn condition_list<'a>(events: impl IntoIterator<Item = &'a StateEvent>) -> String {
    let mut seen = Vec::new();
    let mut parts = Vec::new();
    for e in events {
        if !seen.contains(&e.observed.path) {
            seen.push(e.observed.path);
            parts.push(e.condition_phrase());
        }
    }
    parts.join("; ")
}

/// "the wind speed is 22 mph and the forecast trend is WORSENING"
pub fn state_clause<'a>(events: impl IntoIterator<Item = &'a StateEvent>) -> String {
    let mut seen = Vec::new();
    let mut parts = Vec::new();
    for e in events {
        let path = e.observed.path;
        if seen.contains(&path) {
            continue;
        }
        seen.push(path);
        let spec = path.spec();
        let value = match spec.unit {
            Some("%") => format!("{}%", e.observed.value),
            Some(unit) => format!("{} {unit}", e.observed.value),
            None => e.observed.value.to_string(),
        };
        parts.push(format!("the {} is {value}", spec.label));
    }
    match parts.len() {
        0 => String::new(),
        1 => parts.remove(0),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

pub fn build_selection_prompt(
    batch: &EventBatch,
    snapshot: &WorldState,
    registry: &PersonaRegistry,
    budget: usize,
) -> Result<Prompt, PipelineError> {
    if batch.is_empty() {
        return Err(PipelineError::EmptyBatch);
    }
    let advocates: Vec<Json> = registry
        .iter()
        .map(|p| {
            json!({
                "personaId": p.persona_id,
                "displayName": p.display_name,
                "roleStatement": p.role_statement,
                "domainTags": p.domain_tags(),
            })
        })
        .collect();
    let advocate_line = registry
        .iter()
        .map(|p| format!("{} ({}): {}", p.display_name, p.persona_id, p.role_statement.trim_end_matches('.')))
        .collect::<Vec<_>>()
        .join("; ");
    let instruction = fill(
        SELECTION_INSTRUCTIONS,
        &[
            ("trigger", batch.trigger_line()),
            ("conditions", condition_list(&batch.events)),
            ("advocates", advocate_line),
            ("max_selected", MAX_SELECTED.to_string()),
        ],
    );
    let watched = registry.iter().flat_map(|p| p.watch_paths().iter().copied());
    let order = excerpt_order(&batch.events, watched);
    fit(PromptKind::Selection, budget, order, |paths| Prompt {
        kind: PromptKind::Selection,
        persona_id: None,
        system_preamble: SELECTION_SYSTEM.to_string(),
        context_block: json!({
            "snapshotId": snapshot.snapshot_id(),
            "trigger": batch.trigger_line(),
            "events": batch.events,
            "advocates": advocates,
            "maxSelected": MAX_SELECTED,
            "worldState": excerpt_map(snapshot, paths),
        })
        .to_string(),
        standards_block: String::new(),
        instruction_block: instruction.clone(),
        response_schema: SELECTION_SCHEMA.to_string(),
    })
}

fn persona_preamble(persona: &AdvocatePersona) -> String {
    let mut text = persona.prompt_preamble.trim_end().to_string();
    let _ = write!(text, "\n\nRole: {}\nGoals:\n", persona.role_statement);
    for goal in &persona.goals {
        let _ = writeln!(text, "- {goal}");
    }
    text.push_str("Decision priorities, highest first:\n");
    for (i, p) in persona.decision_priorities.iter().enumerate() {
        let _ = writeln!(text, "{}. {} ({})", i + 1, p.statement, p.tag);
    }
    text
}

pub fn standards_block(persona: &AdvocatePersona, events: &[&StateEvent]) -> String {
    let tags: Vec<&str> = {
        let mut tags = Vec::new();
        for e in events {
            for t in persona.matching_tags(&e.concerns) {
                if !tags.contains(&t) {
                    tags.push(t);
                }
            }
        }
        tags
    };
    let mut refs = persona.standards_for(&tags);
    if refs.is_empty() {
        refs = persona.standards_refs.iter().collect();
    }
    refs.iter()
        .map(|s| format!("[{}] {}: {}", s.standard_id, s.clause, s.snippet))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `events` are the batch events relevant to `persona`, primary first.
pub fn build_advocacy_prompt(
    persona: &AdvocatePersona,
    events: &[&StateEvent],
    snapshot: &WorldState,
    budget: usize,
) -> Result<Prompt, PipelineError> {
    let primary = events.first().ok_or(PipelineError::EmptyBatch)?;
    let instruction = fill(
        ADVOCACY_INSTRUCTIONS,
        &[
            ("display_name", persona.display_name.clone()),
            ("conditions", state_clause(events.iter().copied())),
            ("min_recommendations", MIN_RECOMMENDATIONS.to_string()),
            ("max_recommendations", MAX_RECOMMENDATIONS.to_string()),
            ("action_verbs", persona.scope_taxonomy.action_verbs.join(", ")),
        ],
    );
    let order: Vec<FieldPath> = excerpt_order(events.iter().copied(), persona.watch_paths().iter().copied())
        .into_iter()
        .filter(|p| persona.watches(*p))
        .collect();
    let persona_json = json!({
        "personaId": persona.persona_id,
        "displayName": persona.display_name,
        "domainTags": persona.domain_tags(),
        "actionVerbs": persona.scope_taxonomy.action_verbs,
    });
    let standards = standards_block(persona, events);
    let system = persona_preamble(persona);
    fit(PromptKind::Advocacy, budget, order, |paths| Prompt {
        kind: PromptKind::Advocacy,
        persona_id: Some(persona.persona_id.clone()),
        system_preamble: system.clone(),
        context_block: json!({
            "snapshotId": snapshot.snapshot_id(),
            "persona": persona_json,
            "primaryEventId": primary.event_id,
            "events": events,
            "worldState": excerpt_map(snapshot, paths),
        })
        .to_string(),
        standards_block: standards.clone(),
        instruction_block: instruction.clone(),
        response_schema: ADVOCACY_SCHEMA.to_string(),
    })
}

pub fn build_summary_prompt(advisories: &[Advisory], budget: usize) -> Result<Prompt, PipelineError> {
    if advisories.is_empty() {
        return Err(PipelineError::NoAdvisories);
    }
    let items: Vec<Json> = advisories
        .iter()
        .map(|a| {
            json!({
                "advisoryId": a.advisory_id,
                "personaId": a.persona_id,
                "severity": a.severity,
                "recommendations": a.recommendations.iter().map(|r| r.text.as_str()).collect::<Vec<_>>(),
            })
        })
        .collect();
    let prompt = Prompt {
        kind: PromptKind::Summary,
        persona_id: None,
        system_preamble: SUMMARY_SYSTEM.to_string(),
        context_block: json!({ "advisories": items }).to_string(),
        standards_block: String::new(),
        instruction_block: fill(SUMMARY_INSTRUCTIONS, &[("advisory_count", advisories.len().to_string())]),
        response_schema: SUMMARY_SCHEMA.to_string(),
    };
    let length = prompt.render().chars().count();
    if length > budget {
        return Err(PipelineError::PromptBudgetExceeded { kind: PromptKind::Summary, length, budget });
    }
    Ok(prompt)
}

pub(crate) fn sentence_case(s: &str) -> String {
    capitalize(s)
}
