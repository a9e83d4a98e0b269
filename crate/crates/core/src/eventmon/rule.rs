use std::fmt;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::EventMonError;
use crate::worldstate::{parse_duration, FieldKind, FieldPath, Value, WorldState};

pub const DEFAULT_COOLDOWN_SECS: u64 = 60;
/// Hysteresis band as a fraction of the threshold when a rule does not set one.
pub const DEFAULT_HYSTERESIS_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Caution,
    Warning,
    Critical,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Info => "info",
            Severity::Caution => "caution",
            Severity::Warning => "warning",
            Severity::Critical => "critical",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=", alias = "≤")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=", alias = "≥")]
    Ge,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Lt => value < threshold,
            Comparator::Le => value <= threshold,
            Comparator::Gt => value > threshold,
            Comparator::Ge => value >= threshold,
        }
    }

    /// True for `>`/`>=`: the rule fires when the value climbs.
    pub fn is_upper(self) -> bool {
        matches!(self, Comparator::Gt | Comparator::Ge)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        }
    }
}

/// Untyped scalar from a rule file; converted against the field's kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl Scalar {
    fn to_json(&self) -> serde_json::Value {
        match self {
            Scalar::Bool(b) => serde_json::Value::Bool(*b),
            Scalar::Number(n) => serde_json::json!(n),
            Scalar::Text(s) => serde_json::Value::String(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredicateSpec {
    Compare { op: Comparator, threshold: Scalar },
    EnumTransition {
        #[serde(default)]
        from: Vec<String>,
        to: Vec<String>,
    },
    BooleanBecame { value: bool },
    DeadlineWithin { window: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub path: String,
    pub equals: Scalar,
}

/// Rule as written in a rule-table file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RuleSpec {
    pub rule_id: String,
    pub path: String,
    pub predicate: PredicateSpec,
    pub severity: Severity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hysteresis: Option<f64>,
    /// `hh:mm:ss`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cooldown: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub when: Vec<ConditionSpec>,
    /// Domain tags this rule raises; persona selection matches on them.
    #[serde(default)]
    pub concerns: Vec<String>,
}

impl RuleSpec {
    pub fn compare(rule_id: &str, path: &str, op: Comparator, threshold: f64, severity: Severity) -> RuleSpec {
        RuleSpec {
            rule_id: rule_id.into(),
            path: path.into(),
            predicate: PredicateSpec::Compare { op, threshold: Scalar::Number(threshold) },
            severity,
            hysteresis: None,
            cooldown: None,
            when: Vec::new(),
            concerns: Vec::new(),
        }
    }

    pub fn with_predicate(rule_id: &str, path: &str, predicate: PredicateSpec, severity: Severity) -> RuleSpec {
        RuleSpec { predicate, ..RuleSpec::compare(rule_id, path, Comparator::Gt, 0.0, severity) }
    }

    pub fn hysteresis(mut self, band: f64) -> RuleSpec {
        self.hysteresis = Some(band);
        self
    }

    pub fn cooldown_secs(mut self, secs: u64) -> RuleSpec {
        self.cooldown = Some(crate::worldstate::format_duration(secs));
        self
    }

    pub fn when(mut self, path: &str, equals: Scalar) -> RuleSpec {
        self.when.push(ConditionSpec { path: path.into(), equals });
        self
    }

    pub fn concerns(mut self, tags: &[&str]) -> RuleSpec {
        self.concerns = tags.iter().map(|t| t.to_string()).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    /// Threshold in field units; durations compare in seconds.
    Compare { op: Comparator, threshold: f64 },
    EnumTransition { from: Vec<String>, to: Vec<String> },
    BooleanBecame(bool),
    /// Satisfied once the watched instant is at most `window` after the clock.
    DeadlineWithin(Duration),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub path: FieldPath,
    pub equals: Value,
}

/// Read access to field values; implemented by snapshots and by the
/// reconstructed predecessor view.
pub trait StateView {
    fn value(&self, path: FieldPath) -> &Value;
}

impl StateView for WorldState {
    fn value(&self, path: FieldPath) -> &Value {
        self.get(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRule {
    pub rule_id: String,
    pub watch_path: FieldPath,
    pub predicate: Predicate,
    pub guards: Vec<Condition>,
    /// Re-arm margin for numeric rules; zero means plain edge re-arming.
    pub hysteresis_band: f64,
    pub cooldown: Duration,
    pub severity: Severity,
    pub concerns: Vec<String>,
    spec: RuleSpec,
}

impl TriggerRule {
    pub fn from_spec(spec: RuleSpec) -> Result<TriggerRule, EventMonError> {
        let invalid = |reason: String| EventMonError::InvalidRule { rule_id: spec.rule_id.clone(), reason };
        if spec.rule_id.trim().is_empty() {
            return Err(invalid("ruleId must not be empty".into()));
        }
        let watch_path =
            FieldPath::resolve(&spec.path).ok_or_else(|| EventMonError::UnknownPath(spec.path.clone()))?;
        let kind = watch_path.kind();
        let predicate = match &spec.predicate {
            PredicateSpec::Compare { op, threshold } => {
                if !kind.is_numeric() {
                    return Err(invalid(format!("`{watch_path}` is not numeric")));
                }
                let threshold = match (kind, threshold) {
                    (FieldKind::Duration, Scalar::Text(s)) => parse_duration(s)
                        .map(|s| s as f64)
                        .ok_or_else(|| invalid(format!("bad duration threshold `{s}`")))?,
                    (FieldKind::Number(_), Scalar::Number(n)) if n.is_finite() => *n,
                    (_, other) => return Err(invalid(format!("threshold {other:?} does not match `{watch_path}`"))),
                };
                Predicate::Compare { op: *op, threshold }
            }
            PredicateSpec::EnumTransition { from, to } => {
                let FieldKind::Enum(members) = kind else {
                    return Err(invalid(format!("`{watch_path}` is not an enumeration")));
                };
                if to.is_empty() {
                    return Err(invalid("enum_transition needs a non-empty `to` set".into()));
                }
                if let Some(bad) = from.iter().chain(to).find(|m| !members.contains(&m.as_str())) {
                    return Err(invalid(format!("`{bad}` is not a member of `{watch_path}`")));
                }
                Predicate::EnumTransition { from: from.clone(), to: to.clone() }
            }
            PredicateSpec::BooleanBecame { value } => {
                if kind != FieldKind::Bool {
                    return Err(invalid(format!("`{watch_path}` is not boolean")));
                }
                Predicate::BooleanBecame(*value)
            }
            PredicateSpec::DeadlineWithin { window } => {
                if kind != FieldKind::Instant {
                    return Err(invalid(format!("`{watch_path}` is not a timestamp field")));
                }
                let secs = parse_duration(window).ok_or_else(|| invalid(format!("bad window `{window}`")))?;
                Predicate::DeadlineWithin(Duration::seconds(secs as i64))
            }
        };
        let guards = spec
            .when
            .iter()
            .map(|c| {
                let path = FieldPath::resolve(&c.path).ok_or_else(|| EventMonError::UnknownPath(c.path.clone()))?;
                let equals = Value::from_json(path, &c.equals.to_json())
                    .map_err(|e| invalid(format!("guard on `{path}`: {e}")))?;
                Ok(Condition { path, equals })
            })
            .collect::<Result<Vec<_>, EventMonError>>()?;
        let hysteresis_band = match (&predicate, spec.hysteresis) {
            (_, Some(band)) if !(band.is_finite() && band >= 0.0) => {
                return Err(invalid("hysteresis must be a non-negative number".into()))
            }
            (Predicate::Compare { .. }, Some(band)) => band,
            (Predicate::Compare { threshold, .. }, None) => threshold.abs() * DEFAULT_HYSTERESIS_FRACTION,
            (_, Some(_)) => return Err(invalid("hysteresis applies to numeric rules only".into())),
            (_, None) => 0.0,
        };
        let cooldown = match &spec.cooldown {
            None => Duration::seconds(DEFAULT_COOLDOWN_SECS as i64),
            Some(text) => Duration::seconds(
                parse_duration(text).ok_or_else(|| invalid(format!("bad cooldown `{text}`")))? as i64,
            ),
        };
        Ok(TriggerRule {
            rule_id: spec.rule_id.clone(),
            watch_path,
            predicate,
            guards,
            hysteresis_band,
            cooldown,
            severity: spec.severity,
            concerns: spec.concerns.clone(),
            spec,
        })
    }

    pub fn spec(&self) -> &RuleSpec {
        &self.spec
    }

    pub fn guards_hold(&self, view: &dyn StateView) -> bool {
        self.guards.iter().all(|g| view.value(g.path) == &g.equals)
    }

    /// Whether the rule's condition holds in `view` at `clock`.
    pub fn is_satisfied(&self, view: &dyn StateView, clock: DateTime<Utc>) -> bool {
        self.guards_hold(view) && self.predicate_holds(view, clock)
    }

    fn predicate_holds(&self, view: &dyn StateView, clock: DateTime<Utc>) -> bool {
        let value = view.value(self.watch_path);
        match &self.predicate {
            Predicate::Compare { op, threshold } => value.as_f64().is_some_and(|v| op.holds(v, *threshold)),
            Predicate::EnumTransition { to, .. } => value.as_str().is_some_and(|s| to.iter().any(|t| t == s)),
            Predicate::BooleanBecame(expected) => value.as_bool() == Some(*expected),
            Predicate::DeadlineWithin(window) => value.as_instant().is_some_and(|t| t - clock <= *window),
        }
    }

    /// Enum rules with a `from` set only fire when the prior value was in it.
    pub(crate) fn transition_allowed(&self, previous: &dyn StateView) -> bool {
        match &self.predicate {
            Predicate::EnumTransition { from, .. } if !from.is_empty() => previous
                .value(self.watch_path)
                .as_str()
                .is_some_and(|s| from.iter().any(|f| f == s)),
            _ => true,
        }
    }

    /// Whether a latched rule may fire again.
    pub(crate) fn rearms(&self, view: &dyn StateView, clock: DateTime<Utc>) -> bool {
        if !self.guards_hold(view) {
            return true;
        }
        match self.predicate {
            Predicate::Compare { op, threshold } if self.hysteresis_band > 0.0 => {
                let Some(v) = view.value(self.watch_path).as_f64() else { return true };
                if op.is_upper() {
                    v < threshold - self.hysteresis_band
                } else {
                    v > threshold + self.hysteresis_band
                }
            }
            _ => !self.predicate_holds(view, clock),
        }
    }

    pub fn describe_condition(&self) -> String {
        let mut text = match &self.predicate {
            Predicate::Compare { op, threshold } => {
                let t = match self.watch_path.kind() {
                    FieldKind::Duration => crate::worldstate::format_duration(*threshold as u64),
                    _ => crate::worldstate::number_json(*threshold).to_string(),
                };
                format!("{} {} {}", self.watch_path.leaf(), op.symbol(), t)
            }
            Predicate::EnumTransition { to, .. } => format!("{} -> {}", self.watch_path.leaf(), to.join("|")),
            Predicate::BooleanBecame(v) => format!("{} became {}", self.watch_path.leaf(), v),
            Predicate::DeadlineWithin(w) => format!(
                "{} within {}",
                self.watch_path.leaf(),
                crate::worldstate::format_duration(w.num_seconds().max(0) as u64)
            ),
        };
        for g in &self.guards {
            text.push_str(&format!(" while {}={}", g.path.leaf(), g.equals));
        }
        text
    }
}

/// On-disk rule table: `[[rule]]` entries in TOML or `{"rules": [...]}` in JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTableFile {
    #[serde(alias = "rule", default)]
    pub rules: Vec<RuleSpec>,
}

impl RuleTableFile {
    pub fn from_toml(text: &str) -> Result<RuleTableFile, EventMonError> {
        toml::from_str(text).map_err(|e| EventMonError::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<RuleTableFile, EventMonError> {
        serde_json::from_str(text).map_err(|e| EventMonError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RuleTableFile, EventMonError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EventMonError::Config(format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }
}
