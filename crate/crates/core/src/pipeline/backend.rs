//! Text-generation backends.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::prompt::{sentence_case, Prompt, PromptKind, MAX_RECOMMENDATIONS};
use super::templates::{Rendered, TemplateTable};
use crate::eventmon::{Severity, StateEvent};
use crate::worldstate::{FieldPath, Value};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend rejected the request: {0}")]
    Rejected(String),
}

/// Anything that turns a rendered prompt into reply text.
pub trait GenerationBackend: Send + Sync {
    fn complete(&self, prompt: &Prompt) -> Result<String, BackendError>;
    fn identity(&self) -> String;
    fn is_deterministic(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Rule,
    Mock,
    Live,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rule" => Ok(BackendKind::Rule),
            "mock" => Ok(BackendKind::Mock),
            "live" => Ok(BackendKind::Live),
            other => Err(format!("unknown backend `{other}` (expected rule, mock, or live)")),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Rule => "rule",
            BackendKind::Mock => "mock",
            BackendKind::Live => "live",
        })
    }
}

fn human_tag(tag: &str) -> String {
    tag.replace('_', " ")
}

fn join_words(items: &[String], last: &str) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} {last} {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct AdvocateCtx {
    persona_id: String,
    #[serde(default)]
    domain_tags: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SelectionCtx {
    events: Vec<StateEvent>,
    advocates: Vec<AdvocateCtx>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct AdvocacyCtx {
    persona: AdvocateCtx,
    events: Vec<StateEvent>,
    world_state: BTreeMap<String, Json>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SummaryAdvisoryCtx {
    advisory_id: String,
    severity: Severity,
    recommendations: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct SummaryCtx {
    advisories: Vec<SummaryAdvisoryCtx>,
}

/// Deterministic template backend. It reads only the prompt's context
/// block, so its answers are a pure function of the prompt.
#[derive(Debug, Clone)]
pub struct RuleBackend {
    templates: TemplateTable,
}

impl Default for RuleBackend {
    fn default() -> Self {
        RuleBackend { templates: TemplateTable::shipped() }
    }
}

impl RuleBackend {
    pub fn new() -> RuleBackend {
        RuleBackend::default()
    }

    pub fn with_templates(templates: TemplateTable) -> RuleBackend {
        RuleBackend { templates }
    }

    pub fn templates(&self) -> &TemplateTable {
        &self.templates
    }

    pub fn reply(&self, prompt: &Prompt) -> Result<Json, BackendError> {
        let ctx = prompt.context().map_err(|e| BackendError::Rejected(format!("context block: {e}")))?;
        let bad = |e: serde_json::Error| BackendError::Rejected(format!("context block: {e}"));
        match prompt.kind {
            PromptKind::Selection => Ok(select(serde_json::from_value(ctx).map_err(bad)?)),
            PromptKind::Advocacy => self.advocate(serde_json::from_value(ctx).map_err(bad)?),
            PromptKind::Summary => Ok(summarize(serde_json::from_value(ctx).map_err(bad)?)),
        }
    }

    fn advocate(&self, ctx: AdvocacyCtx) -> Result<Json, BackendError> {
        let mut values: BTreeMap<FieldPath, Value> = BTreeMap::new();
        for (raw, json) in &ctx.world_state {
            let path = FieldPath::resolve(raw).ok_or_else(|| BackendError::Rejected(format!("unknown path `{raw}`")))?;
            let value = Value::from_json(path, json).map_err(|e| BackendError::Rejected(e.to_string()))?;
            values.insert(path, value);
        }
        for e in &ctx.events {
            values.entry(e.observed.path).or_insert_with(|| e.observed.value.clone());
        }
        let (rendered, severity) = self
            .compose(&ctx.persona.persona_id, &ctx.events, &values)
            .ok_or_else(|| BackendError::Rejected(format!("no template renders for `{}`", ctx.persona.persona_id)))?;
        let recommendations: Vec<Json> = rendered
            .iter()
            .map(|r| {
                let mut rec = json!({
                    "text": r.text,
                    "cited_paths": r.cited_paths.iter().map(|p| {
                        let value = values.get(p).map(|v| v.to_string()).unwrap_or_default();
                        format!("{}={value}", p.as_str())
                    }).collect::<Vec<_>>(),
                    "cited_standards": r.standards,
                });
                if let Some(d) = &r.directive {
                    rec["directive"] = serde_json::to_value(d).expect("directive serializes");
                }
                rec
            })
            .collect();
        Ok(json!({ "recommendations": recommendations, "severity": severity }))
    }

    /// With one relevant event, the event's template is used whole. With
    /// several, the first recommendation of each event's template is taken,
    /// topped up from the primary template when that yields fewer than two.
    pub fn compose(
        &self,
        persona_id: &str,
        events: &[StateEvent],
        values: &BTreeMap<FieldPath, Value>,
    ) -> Option<(Vec<Rendered>, Severity)> {
        let primary = events.first()?;
        let chosen: Vec<_> = events
            .iter()
            .filter_map(|e| self.templates.lookup(&e.rule_id, persona_id, values).map(|t| (e, t)))
            .collect();
        let (_, primary_template) = chosen.first()?;
        let mut out: Vec<Rendered> = Vec::new();
        let push = |r: Rendered, out: &mut Vec<Rendered>| {
            if out.len() < MAX_RECOMMENDATIONS && !out.iter().any(|o| o.text == r.text) {
                out.push(r);
            }
        };
        if chosen.len() == 1 {
            for rec in &primary_template.recommendations {
                if let Some(r) = rec.render(values, &primary.observed) {
                    push(r, &mut out);
                }
            }
        } else {
            for (event, template) in &chosen {
                if let Some(r) = template.recommendations.iter().find_map(|rec| rec.render(values, &event.observed)) {
                    push(r, &mut out);
                }
            }
            if out.len() < 2 {
                for rec in &primary_template.recommendations {
                    if let Some(r) = rec.render(values, &chosen[0].0.observed) {
                        push(r, &mut out);
                    }
                    if out.len() >= 2 {
                        break;
                    }
                }
            }
        }
        if out.is_empty() {
            return None;
        }
        let severity = events
            .iter()
            .map(|e| e.severity)
            .chain(chosen.iter().filter_map(|(_, t)| t.severity))
            .max()
            .unwrap_or(Severity::Info);
        Some((out, severity))
    }
}

fn select(ctx: SelectionCtx) -> Json {
    let conditions = |events: &[&StateEvent]| {
        let mut seen = BTreeSet::new();
        let phrases: Vec<String> = events
            .iter()
            .filter(|e| seen.insert(e.observed.path))
            .map(|e| e.condition_phrase())
            .collect();
        join_words(&phrases, "and")
    };
    let all: Vec<&StateEvent> = ctx.events.iter().collect();
    let mut selected = Vec::new();
    let mut rationale = serde_json::Map::new();
    for advocate in &ctx.advocates {
        let covers = |tag: &String| advocate.domain_tags.contains(tag);
        let matching: Vec<&StateEvent> = ctx.events.iter().filter(|e| e.concerns.iter().any(covers)).collect();
        let text = if matching.is_empty() {
            let tags: Vec<String> = advocate.domain_tags.iter().take(2).map(|t| human_tag(t)).collect();
            format!("No {} issue is triggered by {}.", join_words(&tags, "or"), conditions(&all))
        } else {
            selected.push(advocate.persona_id.clone());
            let mut tags: Vec<String> = Vec::new();
            for e in &matching {
                for c in e.concerns.iter().filter(|c| covers(c)) {
                    let h = human_tag(c);
                    if !tags.contains(&h) {
                        tags.push(h);
                    }
                }
            }
            format!(
                "{} concerns are triggered by {}; immediate attention is required.",
                sentence_case(&join_words(&tags, "and")),
                conditions(&matching)
            )
        };
        rationale.insert(advocate.persona_id.clone(), Json::String(text));
    }
    json!({ "selected_advocates": selected, "rationale": rationale })
}

/// First sentence of a recommendation, ignoring periods inside backticks.
pub fn headline(text: &str) -> String {
    let mut in_code = false;
    let chars: Vec<char> = text.chars().collect();
    for (i, c) in chars.iter().enumerate() {
        match c {
            '`' => in_code = !in_code,
            '.' if !in_code && chars.get(i + 1).is_none_or(|n| n.is_whitespace()) => {
                return chars[..=i].iter().collect();
            }
            _ => {}
        }
    }
    let mut s = text.trim_end().to_string();
    if !s.ends_with('.') {
        s.push('.');
    }
    s
}

fn summarize(ctx: SummaryCtx) -> Json {
    let mut advisories: Vec<&SummaryAdvisoryCtx> = ctx.advisories.iter().collect();
    advisories.sort_by(|a, b| b.severity.cmp(&a.severity));
    let mut items = Vec::new();
    if let Some(top) = advisories.first() {
        if let Some(first) = top.recommendations.first() {
            items.push(json!({ "text": headline(first), "advisories": [top.advisory_id] }));
        }
        let second = match advisories.get(1) {
            Some(next) => next.recommendations.first().map(|r| (r, &next.advisory_id)),
            None => top.recommendations.get(1).map(|r| (r, &top.advisory_id)),
        };
        if let Some((text, id)) = second {
            items.push(json!({ "text": headline(text), "advisories": [id] }));
        }
    }
    json!({ "summary": items })
}

impl GenerationBackend for RuleBackend {
    fn complete(&self, prompt: &Prompt) -> Result<String, BackendError> {
        Ok(self.reply(prompt)?.to_string())
    }

    fn identity(&self) -> String {
        "rule".into()
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

const MOCK_LEADS: &[&str] = &[
    "Here is the assessment for the current state.",
    "Based on the context provided, this is my answer.",
    "Reviewing the update now.",
    "Understood. Response follows.",
];

const MOCK_TAILS: &[&str] = &[
    "Let me know if the situation changes.",
    "This reflects the state as given.",
    "",
    "End of response.",
];

/// Stand-in for a generative model: the rule backend's answer wrapped in
/// prose the way chat models tend to reply. The wrapping is picked from a
/// SHA-256 of the rendered prompt, so equal prompts give equal text.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    rule: RuleBackend,
}

impl MockBackend {
    pub fn new() -> MockBackend {
        MockBackend::default()
    }

    pub fn with_templates(templates: TemplateTable) -> MockBackend {
        MockBackend { rule: RuleBackend::with_templates(templates) }
    }
}

impl GenerationBackend for MockBackend {
    fn complete(&self, prompt: &Prompt) -> Result<String, BackendError> {
        let reply = self.rule.reply(prompt)?;
        let digest = Sha256::digest(prompt.render().as_bytes());
        let lead = MOCK_LEADS[digest[0] as usize % MOCK_LEADS.len()];
        let tail = MOCK_TAILS[digest[1] as usize % MOCK_TAILS.len()];
        let body = serde_json::to_string_pretty(&reply).expect("reply serializes");
        Ok(format!("{lead}\n\n```json\n{body}\n```\n\n{tail}").trim_end().to_string())
    }

    fn identity(&self) -> String {
        "mock".into()
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

type Script = dyn Fn(&Prompt) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure; used to inject failures in tests.
pub struct ScriptedBackend {
    name: String,
    script: Box<Script>,
}

impl ScriptedBackend {
    pub fn new(name: &str, script: impl Fn(&Prompt) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        ScriptedBackend { name: name.into(), script: Box::new(script) }
    }
}

impl fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedBackend").field("name", &self.name).finish()
    }
}

impl GenerationBackend for ScriptedBackend {
    fn complete(&self, prompt: &Prompt) -> Result<String, BackendError> {
        (self.script)(prompt)
    }

    fn identity(&self) -> String {
        format!("scripted:{}", self.name)
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct LiveConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_tokens: u32,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            endpoint: "http://127.0.0.1:8080/v1/completions".into(),
            model: "default".into(),
            api_key: None,
            timeout_secs: 30,
            max_tokens: 1024,
        }
    }
}

impl LiveConfig {
    /// Overrides from `RAVEN_LIVE_ENDPOINT`, `RAVEN_LIVE_MODEL`, and
    /// `RAVEN_LIVE_API_KEY`.
    pub fn from_env(mut self) -> LiveConfig {
        if let Ok(v) = std::env::var("RAVEN_LIVE_ENDPOINT") {
            self.endpoint = v;
        }
        if let Ok(v) = std::env::var("RAVEN_LIVE_MODEL") {
            self.model = v;
        }
        if let Ok(v) = std::env::var("RAVEN_LIVE_API_KEY") {
            self.api_key = Some(v);
        }
        self
    }
}

/// HTTP text-generation API. Requests `{model, prompt, parameters}` with
/// temperature 0 and accepts a `text` field, an OpenAI-style `choices`
/// array, or a plain-text body.
pub struct HttpBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: LiveConfig) -> Result<HttpBackend, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .connect_timeout(Duration::from_secs(config.timeout_secs.min(5)))
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(HttpBackend { config, client })
    }
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend").field("endpoint", &self.config.endpoint).field("model", &self.config.model).finish()
    }
}

pub fn reply_text(body: &str) -> String {
    let Ok(json) = serde_json::from_str::<Json>(body) else {
        return body.to_string();
    };
    let choice = &json["choices"][0];
    let text = [&json["text"], &choice["text"], &choice["message"]["content"]]
        .into_iter()
        .find_map(|v| v.as_str())
        .map(str::to_string);
    text.unwrap_or_else(|| body.to_string())
}

impl GenerationBackend for HttpBackend {
    fn complete(&self, prompt: &Prompt) -> Result<String, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt.render(),
            "parameters": { "temperature": 0, "max_tokens": self.config.max_tokens },
        });
        let mut request = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Unavailable(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Unavailable(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        Ok(reply_text(&text))
    }

    fn identity(&self) -> String {
        format!("live:{}@{}", self.config.model, self.config.endpoint)
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}
