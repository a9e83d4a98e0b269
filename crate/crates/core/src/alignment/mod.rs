//! Runtime alignment checks over delivered advisories.
//!
//! The scope check tags each recommendation with the domains its wording
//! touches and flags any tag outside the persona's own. Conflict detection
//! pairs advisories from different personas whose directives push the same
//! actuator in opposite directions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::personas::AdvocatePersona;
use crate::pipeline::{Advisory, Polarity};
use crate::worldstate::FieldPath;

const SHIPPED_LEXICON: &str = include_str!("../../assets/lexicon.toml");

/// Tag whose terms never count against a persona.
pub const NEUTRAL: &str = "neutral";

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon: {0}")]
    Parse(String),
    #[error("lexicon tag `{0}` has an empty term")]
    EmptyTerm(String),
    #[error("reading lexicon: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconFile {
    tags: BTreeMap<String, Vec<String>>,
}

/// Domain tag to term table. Terms are stored as token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    terms: Vec<(String, Vec<String>)>,
}

impl Lexicon {
    pub fn shipped() -> Lexicon {
        Lexicon::from_toml(SHIPPED_LEXICON).expect("shipped lexicon is valid")
    }

    pub fn load(path: &Path) -> Result<Lexicon, LexiconError> {
        Lexicon::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Lexicon, LexiconError> {
        let file: LexiconFile = toml::from_str(text).map_err(|e| LexiconError::Parse(e.to_string()))?;
        let mut terms = Vec::new();
        for (tag, list) in file.tags {
            for term in list {
                let tokens = tokenize(&term);
                if tokens.is_empty() {
                    return Err(LexiconError::EmptyTerm(tag));
                }
                terms.push((tag.clone(), tokens));
            }
        }
        // Longer terms first so "safe landing" is seen before a shorter overlap.
        terms.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.cmp(b)));
        Ok(Lexicon { terms })
    }

    pub fn tags(&self) -> BTreeSet<&str> {
        self.terms.iter().map(|(t, _)| t.as_str()).collect()
    }

    /// Tag to the matched terms, for the given free text.
    pub fn tag_text(&self, text: &str) -> BTreeMap<String, BTreeSet<String>> {
        let tokens = tokenize(&strip_citations(text));
        let mut found: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (tag, term) in &self.terms {
            if tokens.windows(term.len()).any(|w| w == term.as_slice()) {
                found.entry(tag.clone()).or_default().insert(term.join(" "));
            }
        }
        found
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Drops backtick spans and bare `path` or `path=value` words, so a cited
/// field name does not count as the persona talking about that domain.
fn strip_citations(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut inside = false;
    for c in text.chars() {
        if c == '`' {
            inside = !inside;
            out.push(' ');
        } else if !inside {
            out.push(c);
        }
    }
    out.split_whitespace()
        .filter(|word| {
            let word = word.trim_matches(|c: char| !(c.is_alphanumeric() || c == '.' || c == '_' || c == '='));
            let path = word.split_once('=').map_or(word, |(p, _)| p);
            FieldPath::resolve(path).is_none()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScopeReport {
    pub advisory_id: String,
    pub persona_id: String,
    pub assigned_domain: Vec<String>,
    pub detected_domains: Vec<String>,
    /// Detected tags outside the assigned domain and the neutral set.
    pub out_of_scope: Vec<String>,
    pub leakage: bool,
    pub matched_terms: BTreeMap<String, Vec<String>>,
}

/// Tags recommendation text and directive tokens against the lexicon.
pub fn classify_scope(advisory: &Advisory, persona: &AdvocatePersona, lexicon: &Lexicon) -> ScopeReport {
    let mut matched: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for rec in &advisory.recommendations {
        let mut text = rec.text.clone();
        if let Some(d) = &rec.directive {
            text.push_str(&format!(" {} {}", d.actuator, d.verb));
        }
        for (tag, terms) in lexicon.tag_text(&text) {
            matched.entry(tag).or_default().extend(terms);
        }
    }
    let assigned = persona.domain_tags().to_vec();
    let out_of_scope: Vec<String> = matched
        .keys()
        .filter(|tag| tag.as_str() != NEUTRAL && !assigned.contains(tag))
        .cloned()
        .collect();
    ScopeReport {
        advisory_id: advisory.advisory_id.clone(),
        persona_id: advisory.persona_id.clone(),
        assigned_domain: assigned,
        detected_domains: matched.keys().cloned().collect(),
        leakage: !out_of_scope.is_empty(),
        out_of_scope,
        matched_terms: matched.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConflictPair {
    pub conflict_id: String,
    pub advisory_a: String,
    pub advisory_b: String,
    pub persona_a: String,
    pub persona_b: String,
    pub actuator: String,
    pub polarity_a: Polarity,
    pub polarity_b: Polarity,
    pub explanation: String,
}

/// Pairs are ordered by advisory id within each pair and across the list,
/// so the result does not depend on input order.
pub fn detect_conflicts(advisories: &[Advisory]) -> Vec<ConflictPair> {
    let mut sorted: Vec<&Advisory> = advisories.iter().collect();
    sorted.sort_by(|a, b| a.advisory_id.cmp(&b.advisory_id));
    let mut pairs = Vec::new();
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            if a.persona_id == b.persona_id {
                continue;
            }
            let mut seen = BTreeSet::new();
            for da in a.recommendations.iter().filter_map(|r| r.directive.as_ref()) {
                for db in b.recommendations.iter().filter_map(|r| r.directive.as_ref()) {
                    if da.actuator != db.actuator || !da.polarity.opposes(db.polarity) {
                        continue;
                    }
                    if !seen.insert(da.actuator.clone()) {
                        continue;
                    }
                    pairs.push(ConflictPair {
                        conflict_id: format!("cfl-{}-{}-{}", a.advisory_id, b.persona_id, da.actuator),
                        advisory_a: a.advisory_id.clone(),
                        advisory_b: b.advisory_id.clone(),
                        persona_a: a.persona_id.clone(),
                        persona_b: b.persona_id.clone(),
                        actuator: da.actuator.clone(),
                        polarity_a: da.polarity,
                        polarity_b: db.polarity,
                        explanation: format!(
                            "{} says {} on {} while {} says {}.",
                            a.persona_id,
                            stance(da.polarity, &da.verb),
                            da.actuator,
                            b.persona_id,
                            stance(db.polarity, &db.verb),
                        ),
                    });
                }
            }
        }
    }
    pairs
}

fn stance(polarity: Polarity, verb: &str) -> String {
    match polarity {
        Polarity::Do => format!("`{verb}`"),
        Polarity::DoNot => format!("do not `{verb}`"),
    }
}
