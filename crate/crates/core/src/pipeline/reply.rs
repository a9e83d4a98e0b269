//! Parsing of backend replies into validated pipeline values.

use std::collections::BTreeMap;

use serde::Deserialize;
use serde_json::Value as Json;

use super::prompt::MAX_RECOMMENDATIONS;
use super::{Directive, Recommendation};
use crate::eventmon::Severity;
use crate::personas::{AdvocatePersona, PersonaRegistry};
use crate::worldstate::{FieldPath, WorldState};

/// Pulls the JSON object out of a reply: the first fenced block when there
/// is one, otherwise the outermost braces.
pub fn extract_json(text: &str) -> Result<Json, String> {
    let body = fenced(text).or_else(|| braces(text)).ok_or("reply contains no JSON object")?;
    let json: Json = serde_json::from_str(body.trim()).map_err(|e| format!("reply JSON does not parse: {e}"))?;
    if !json.is_object() {
        return Err("reply JSON is not an object".into());
    }
    Ok(json)
}

fn fenced(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n').map_or(0, |i| i + 1);
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

fn braces(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

#[derive(Debug, Deserialize)]
struct SelectionReply {
    selected_advocates: Vec<String>,
    #[serde(default)]
    rationale: BTreeMap<String, String>,
}

/// Selected persona ids (registry-resolved, deduplicated, reply order) and
/// rationale keyed by persona id.
pub fn parse_selection(
    json: Json,
    registry: &PersonaRegistry,
) -> Result<(Vec<String>, BTreeMap<String, String>), String> {
    let reply: SelectionReply = serde_json::from_value(json).map_err(|e| format!("selection reply: {e}"))?;
    let mut selected = Vec::new();
    for name in &reply.selected_advocates {
        let persona = registry.resolve_name(name).ok_or_else(|| format!("unknown advocate `{name}`"))?;
        if !selected.contains(&persona.persona_id) {
            selected.push(persona.persona_id.clone());
        }
    }
    let mut rationale = BTreeMap::new();
    for (name, text) in reply.rationale {
        let persona = registry.resolve_name(&name).ok_or_else(|| format!("rationale for unknown advocate `{name}`"))?;
        if text.trim().is_empty() {
            return Err(format!("empty rationale for `{name}`"));
        }
        rationale.insert(persona.persona_id.clone(), text.trim().to_string());
    }
    if let Some(missing) = registry.iter().find(|p| !rationale.contains_key(&p.persona_id)) {
        return Err(format!("rationale is missing for `{}`", missing.persona_id));
    }
    Ok((selected, rationale))
}

#[derive(Debug, Deserialize)]
struct AdvocacyReply {
    recommendations: Vec<RecommendationReply>,
    #[serde(default)]
    severity: Option<Severity>,
}

#[derive(Debug, Deserialize)]
struct RecommendationReply {
    text: String,
    #[serde(default, alias = "citedPaths")]
    cited_paths: Vec<String>,
    #[serde(default, alias = "citedStandards")]
    cited_standards: Vec<String>,
    #[serde(default)]
    directive: Option<Directive>,
}

/// Outcome of checking an advocacy reply against the snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckedAdvocacy {
    pub recommendations: Vec<Recommendation>,
    pub severity: Option<Severity>,
    /// One entry per recommendation that cited something unresolvable.
    pub violations: Vec<String>,
}

/// Structural problems are errors; citation problems are reported in
/// `violations` with the offending recommendations already removed.
pub fn parse_advocacy(
    json: Json,
    persona: &AdvocatePersona,
    snapshot: &WorldState,
    known_standards: &[String],
) -> Result<CheckedAdvocacy, String> {
    let reply: AdvocacyReply = serde_json::from_value(json).map_err(|e| format!("advocacy reply: {e}"))?;
    if reply.recommendations.is_empty() {
        return Err("reply has no recommendations".into());
    }
    let mut recommendations = Vec::new();
    let mut violations = Vec::new();
    for (i, rec) in reply.recommendations.into_iter().take(MAX_RECOMMENDATIONS).enumerate() {
        if rec.text.trim().is_empty() {
            return Err(format!("recommendation {} has no text", i + 1));
        }
        if let Some(d) = &rec.directive {
            if d.actuator.trim().is_empty() || d.verb.trim().is_empty() {
                return Err(format!("recommendation {} has an incomplete directive", i + 1));
            }
        }
        match check_citations(&rec.cited_paths, snapshot) {
            Ok(cited_paths) => recommendations.push(Recommendation {
                text: rec.text.trim().to_string(),
                cited_paths,
                cited_standards: rec
                    .cited_standards
                    .into_iter()
                    .filter(|s| known_standards.contains(s))
                    .collect(),
                directive: rec.directive,
            }),
            Err(problem) => violations.push(format!("{}: recommendation {}: {problem}", persona.persona_id, i + 1)),
        }
    }
    Ok(CheckedAdvocacy { recommendations, severity: reply.severity, violations })
}

/// Each citation is `path` or `path=value`; the path must resolve and a
/// stated value must match the snapshot.
fn check_citations(cited: &[String], snapshot: &WorldState) -> Result<Vec<FieldPath>, String> {
    if cited.is_empty() {
        return Err("cites no world-state path".into());
    }
    let mut out = Vec::new();
    for raw in cited {
        let raw = raw.trim().trim_matches('`');
        let (path_text, value_text) = match raw.split_once('=') {
            Some((p, v)) => (p.trim(), Some(v.trim())),
            None => (raw, None),
        };
        let path = FieldPath::resolve(path_text).ok_or_else(|| format!("`{path_text}` does not resolve"))?;
        if let Some(v) = value_text {
            let actual = snapshot.get(path).to_string();
            if v.trim_matches(|c| c == '"' || c == '\'') != actual {
                return Err(format!("`{path_text}` is {actual}, not {v}"));
            }
        }
        if !out.contains(&path) {
            out.push(path);
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct SummaryReply {
    summary: Vec<SummaryReplyItem>,
}

#[derive(Debug, Deserialize)]
struct SummaryReplyItem {
    text: String,
    #[serde(default)]
    advisories: Vec<String>,
}

/// (text, advisory ids) pairs; 1 or 2 items, each tied to known advisories.
pub fn parse_summary(json: Json, advisory_ids: &[&str]) -> Result<Vec<(String, Vec<String>)>, String> {
    let reply: SummaryReply = serde_json::from_value(json).map_err(|e| format!("summary reply: {e}"))?;
    if reply.summary.is_empty() || reply.summary.len() > 2 {
        return Err(format!("summary must have 1 or 2 items, got {}", reply.summary.len()));
    }
    reply
        .summary
        .into_iter()
        .map(|item| {
            if item.text.trim().is_empty() {
                return Err("summary item has no text".to_string());
            }
            if item.advisories.is_empty() {
                return Err("summary item references no advisory".to_string());
            }
            if let Some(bad) = item.advisories.iter().find(|a| !advisory_ids.contains(&a.as_str())) {
                return Err(format!("summary references unknown advisory `{bad}`"));
            }
            Ok((item.text.trim().to_string(), item.advisories))
        })
        .collect()
}
