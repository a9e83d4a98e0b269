//! Advocacy templates for the rule backend.

use std::collections::BTreeMap;

use serde::Deserialize;
use thiserror::Error;

use super::Directive;
use crate::eventmon::{Condition, ConditionSpec, Severity};
use crate::worldstate::{FieldPath, FieldValue, Value};

const SHIPPED_TEMPLATES: &str = include_str!("../../assets/templates/advocacy.toml");

pub const ANY: &str = "*";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("template file: {0}")]
    Parse(String),
    #[error("template ({rule}, {persona}): {reason}")]
    Invalid { rule: String, persona: String, reason: String },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    #[serde(rename = "template", default)]
    templates: Vec<TemplateSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub rule: String,
    pub persona: String,
    #[serde(default)]
    pub when: Vec<ConditionSpec>,
    #[serde(default)]
    pub severity: Option<Severity>,
    #[serde(rename = "recommendation")]
    pub recommendations: Vec<RecommendationSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendationSpec {
    pub text: String,
    #[serde(default)]
    pub standards: Vec<String>,
    #[serde(default)]
    pub directive: Option<Directive>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Literal(String),
    /// `path=value` in backticks.
    Cite(FieldPath),
    /// Value with unit.
    Bare(FieldPath),
    /// The event's watched field, cited.
    Event,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationTemplate {
    pub source: String,
    pub segments: Vec<Segment>,
    pub standards: Vec<String>,
    pub directive: Option<Directive>,
}

/// A rendered recommendation before it is attached to an advisory.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub text: String,
    pub cited_paths: Vec<FieldPath>,
    pub standards: Vec<String>,
    pub directive: Option<Directive>,
}

impl RecommendationTemplate {
    /// Static paths referenced by placeholders, in order of appearance.
    pub fn placeholder_paths(&self) -> Vec<FieldPath> {
        let mut out = Vec::new();
        for s in &self.segments {
            if let Segment::Cite(p) | Segment::Bare(p) = s {
                if !out.contains(p) {
                    out.push(*p);
                }
            }
        }
        out
    }

    pub fn has_citation(&self) -> bool {
        self.segments.iter().any(|s| !matches!(s, Segment::Literal(_)))
    }

    /// `None` when a placeholder has no value in `values`.
    pub fn render(&self, values: &BTreeMap<FieldPath, Value>, event: &FieldValue) -> Option<Rendered> {
        let mut text = String::new();
        let mut cited = Vec::new();
        let mut cite = |p: FieldPath| {
            if !cited.contains(&p) {
                cited.push(p);
            }
        };
        for segment in &self.segments {
            match segment {
                Segment::Literal(s) => text.push_str(s),
                Segment::Cite(path) => {
                    let value = values.get(path)?;
                    text.push_str(&format!("`{}={}`", path.as_str(), value));
                    cite(*path);
                }
                Segment::Bare(path) => {
                    let value = values.get(path)?;
                    let unit = path.spec().unit;
                    match unit {
                        Some("%") => text.push_str(&format!("{value}%")),
                        Some(u) => text.push_str(&format!("{value} {u}")),
                        None => text.push_str(&value.to_string()),
                    }
                    cite(*path);
                }
                Segment::Event => {
                    text.push_str(&format!("`{}={}`", event.path.as_str(), event.value));
                    cite(event.path);
                }
            }
        }
        Some(Rendered { text, cited_paths: cited, standards: self.standards.clone(), directive: self.directive.clone() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvocacyTemplate {
    pub rule: String,
    pub persona: String,
    pub guards: Vec<Condition>,
    pub severity: Option<Severity>,
    pub recommendations: Vec<RecommendationTemplate>,
}

impl AdvocacyTemplate {
    pub fn guards_hold(&self, values: &BTreeMap<FieldPath, Value>) -> bool {
        self.guards.iter().all(|g| values.get(&g.path) == Some(&g.equals))
    }

    pub fn guard_paths(&self) -> impl Iterator<Item = FieldPath> + '_ {
        self.guards.iter().map(|g| g.path)
    }
}

fn parse_segments(text: &str) -> Result<Vec<Segment>, String> {
    let mut segments = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            segments.push(Segment::Literal(rest[..open].to_string()));
        }
        let close = rest[open..].find('}').ok_or_else(|| format!("unclosed placeholder in `{text}`"))? + open;
        let inner = &rest[open + 1..close];
        let segment = if inner == "event" {
            Segment::Event
        } else if let Some(path) = inner.strip_suffix("|value") {
            Segment::Bare(FieldPath::resolve(path).ok_or_else(|| format!("unknown path `{path}`"))?)
        } else {
            Segment::Cite(FieldPath::resolve(inner).ok_or_else(|| format!("unknown path `{inner}`"))?)
        };
        segments.push(segment);
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        segments.push(Segment::Literal(rest.to_string()));
    }
    Ok(segments)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateTable {
    templates: Vec<AdvocacyTemplate>,
}

impl TemplateTable {
    pub fn shipped() -> TemplateTable {
        TemplateTable::from_toml(SHIPPED_TEMPLATES).expect("shipped templates are valid")
    }

    pub fn from_toml(text: &str) -> Result<TemplateTable, TemplateError> {
        let file: TemplateFile = toml::from_str(text).map_err(|e| TemplateError::Parse(e.to_string()))?;
        TemplateTable::from_specs(file.templates)
    }

    pub fn from_specs(specs: Vec<TemplateSpec>) -> Result<TemplateTable, TemplateError> {
        let templates = specs.into_iter().map(compile).collect::<Result<Vec<_>, _>>()?;
        Ok(TemplateTable { templates })
    }

    /// Puts `spec` ahead of every existing template for the same key.
    pub fn prepend(&mut self, spec: TemplateSpec) -> Result<(), TemplateError> {
        self.templates.insert(0, compile(spec)?);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdvocacyTemplate> {
        self.templates.iter()
    }

    /// Exact key first, then the persona fallback, then the global one.
    pub fn lookup(&self, rule_id: &str, persona_id: &str, values: &BTreeMap<FieldPath, Value>) -> Option<&AdvocacyTemplate> {
        [(rule_id, persona_id), (ANY, persona_id), (ANY, ANY)].into_iter().find_map(|(rule, persona)| {
            self.templates
                .iter()
                .find(|t| t.rule == rule && t.persona == persona && t.guards_hold(values))
        })
    }
}

fn compile(spec: TemplateSpec) -> Result<AdvocacyTemplate, TemplateError> {
    let invalid = |reason: String| TemplateError::Invalid {
        rule: spec.rule.clone(),
        persona: spec.persona.clone(),
        reason,
    };
    if spec.recommendations.is_empty() || spec.recommendations.len() > super::prompt::MAX_RECOMMENDATIONS {
        return Err(invalid("needs 1 to 3 recommendations".into()));
    }
    let guards = spec
        .when
        .iter()
        .map(|c| {
            let path = FieldPath::resolve(&c.path).ok_or_else(|| invalid(format!("unknown guard path `{}`", c.path)))?;
            let json = serde_json::to_value(&c.equals).expect("scalar serializes");
            let equals = Value::from_json(path, &json).map_err(|e| invalid(e.to_string()))?;
            Ok(Condition { path, equals })
        })
        .collect::<Result<Vec<_>, TemplateError>>()?;
    let recommendations = spec
        .recommendations
        .iter()
        .map(|r| {
            let segments = parse_segments(&r.text).map_err(&invalid)?;
            let template = RecommendationTemplate {
                source: r.text.clone(),
                segments,
                standards: r.standards.clone(),
                directive: r.directive.clone(),
            };
            if !template.has_citation() {
                return Err(invalid(format!("`{}` cites no world-state path", r.text)));
            }
            Ok(template)
        })
        .collect::<Result<Vec<_>, TemplateError>>()?;
    Ok(AdvocacyTemplate {
        rule: spec.rule.clone(),
        persona: spec.persona.clone(),
        guards,
        severity: spec.severity,
        recommendations,
    })
}
