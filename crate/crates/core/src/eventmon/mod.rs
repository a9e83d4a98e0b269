//! Event detection over snapshot diffs.
//!
//! Rules are edge-triggered: a rule emits one [`StateEvent`] when its
//! condition goes from unsatisfied to satisfied. After firing, the rule stays
//! latched until it re-arms (the value retreats past `threshold ∓ band` for
//! numeric rules, or the condition clears for the others), and two firings of
//! the same rule are always at least `cooldown` apart on the event clock.
//! A crossing that lands inside the cooldown window stays pending and fires
//! on the first later evaluation where the condition still holds.

mod rule;

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rule::{
    Comparator, Condition, ConditionSpec, Predicate, PredicateSpec, RuleSpec, RuleTableFile, Scalar, Severity,
    StateView, TriggerRule, DEFAULT_COOLDOWN_SECS, DEFAULT_HYSTERESIS_FRACTION,
};

use crate::worldstate::{FieldChange, FieldPath, FieldValue, Value, WorldState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventMonError {
    #[error("duplicate rule id `{0}`")]
    DuplicateRuleId(String),
    #[error("unknown world-state path `{0}`")]
    UnknownPath(String),
    #[error("invalid rule `{rule_id}`: {reason}")]
    InvalidRule { rule_id: String, reason: String },
    #[error("rule table: {0}")]
    Config(String),
}

const DEFAULT_RULES_TOML: &str = include_str!("../../assets/rules/default.toml");

/// The shipped rule table.
pub fn default_rule_table() -> Vec<TriggerRule> {
    RuleRegistry::from_table(&RuleTableFile::from_toml(DEFAULT_RULES_TOML).expect("shipped rule table parses"))
        .expect("shipped rule table is valid")
        .into_rules()
}

#[derive(Debug, Clone, Default)]
pub struct RuleRegistry {
    rules: Vec<TriggerRule>,
}

impl RuleRegistry {
    pub fn new() -> RuleRegistry {
        RuleRegistry::default()
    }

    pub fn with_defaults() -> RuleRegistry {
        RuleRegistry { rules: default_rule_table() }
    }

    pub fn from_table(table: &RuleTableFile) -> Result<RuleRegistry, EventMonError> {
        let mut registry = RuleRegistry::new();
        for spec in &table.rules {
            registry.register(spec.clone())?;
        }
        Ok(registry)
    }

    pub fn register(&mut self, spec: RuleSpec) -> Result<&TriggerRule, EventMonError> {
        if self.get(&spec.rule_id).is_some() {
            return Err(EventMonError::DuplicateRuleId(spec.rule_id));
        }
        self.rules.push(TriggerRule::from_spec(spec)?);
        Ok(self.rules.last().expect("just pushed"))
    }

    /// Replaces the rule with the same id, or appends it.
    pub fn replace(&mut self, spec: RuleSpec) -> Result<(), EventMonError> {
        let rule = TriggerRule::from_spec(spec)?;
        match self.rules.iter_mut().find(|r| r.rule_id == rule.rule_id) {
            Some(slot) => *slot = rule,
            None => self.rules.push(rule),
        }
        Ok(())
    }

    pub fn get(&self, rule_id: &str) -> Option<&TriggerRule> {
        self.rules.iter().find(|r| r.rule_id == rule_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TriggerRule> {
        self.rules.iter()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn into_rules(self) -> Vec<TriggerRule> {
        self.rules
    }

    pub fn to_table(&self) -> RuleTableFile {
        RuleTableFile { rules: self.rules.iter().map(|r| r.spec().clone()).collect() }
    }
}

impl FromIterator<TriggerRule> for RuleRegistry {
    fn from_iter<I: IntoIterator<Item = TriggerRule>>(iter: I) -> Self {
        RuleRegistry { rules: iter.into_iter().collect() }
    }
}

/// A detected significant change that activates the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StateEvent {
    pub event_id: u64,
    pub rule_id: String,
    pub snapshot_id: u64,
    /// The change on the watched path, or on a guard path when the guard
    /// flipped. `None` for clock-driven (deadline) firings.
    pub triggered_by: Option<FieldChange>,
    pub observed: FieldValue,
    pub severity: Severity,
    pub concerns: Vec<String>,
    pub detected_at: DateTime<Utc>,
    pub description: String,
}

impl StateEvent {
    /// Phrase such as `wind speed 22 mph`.
    pub fn condition_phrase(&self) -> String {
        phrase(self.observed.path, &self.observed.value)
    }
}

pub fn phrase(path: FieldPath, value: &Value) -> String {
    let spec = path.spec();
    match spec.unit {
        Some("%") => format!("{} {}%", spec.label, value),
        Some(unit) => format!("{} {} {}", spec.label, value, unit),
        None => format!("{} {}", spec.label, value),
    }
}

/// All events detected on one snapshot; one pipeline run per batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EventBatch {
    pub snapshot_id: u64,
    pub events: Vec<StateEvent>,
}

impl EventBatch {
    pub fn max_severity(&self) -> Option<Severity> {
        self.events.iter().map(|e| e.severity).max()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// "World state updated. Current wind speed: 22 mph; forecast trend: WORSENING."
    pub fn trigger_line(&self) -> String {
        let mut seen = Vec::new();
        let mut parts = Vec::new();
        for e in &self.events {
            if seen.contains(&e.observed.path) {
                continue;
            }
            seen.push(e.observed.path);
            let spec = e.observed.path.spec();
            let unit = match spec.unit {
                Some("%") => "%".to_string(),
                Some(u) => format!(" {u}"),
                None => String::new(),
            };
            parts.push(format!("{}: {}{}", spec.label, e.observed.value, unit));
        }
        format!("World state updated. Current {}.", parts.join("; "))
    }
}

#[derive(Debug, Clone, Default)]
struct RuleState {
    armed: bool,
    last_fired: Option<DateTime<Utc>>,
}

/// Stateful evaluator over the ordered snapshot stream.
#[derive(Debug, Clone)]
pub struct EventMonitor {
    rules: RuleRegistry,
    states: BTreeMap<String, RuleState>,
    next_event_id: u64,
}

/// The predecessor snapshot reconstructed from a snapshot and its diff.
struct Predecessor<'a> {
    current: &'a WorldState,
    old: HashMap<FieldPath, &'a Value>,
}

impl StateView for Predecessor<'_> {
    fn value(&self, path: FieldPath) -> &Value {
        self.old.get(&path).copied().unwrap_or_else(|| self.current.get(path))
    }
}

impl EventMonitor {
    pub fn new(rules: RuleRegistry) -> EventMonitor {
        EventMonitor { rules, states: BTreeMap::new(), next_event_id: 1 }
    }

    pub fn rules(&self) -> &RuleRegistry {
        &self.rules
    }

    /// Ids are shared with events created outside rule evaluation.
    pub fn allocate_event_id(&mut self) -> u64 {
        let id = self.next_event_id;
        self.next_event_id += 1;
        id
    }

    /// Evaluates the first snapshot of a stream. No predecessor exists, so
    /// every rule starts armed and fires if its condition already holds.
    pub fn evaluate_initial(&mut self, snapshot: &WorldState, clock: DateTime<Utc>) -> Vec<StateEvent> {
        self.states = self
            .rules
            .iter()
            .map(|r| (r.rule_id.clone(), RuleState { armed: true, last_fired: None }))
            .collect();
        self.run(&[], snapshot, None, clock)
    }

    /// Evaluates `snapshot` given the diff against its predecessor.
    pub fn evaluate(&mut self, changes: &[FieldChange], snapshot: &WorldState, clock: DateTime<Utc>) -> Vec<StateEvent> {
        let previous = Predecessor {
            current: snapshot,
            old: changes.iter().map(|c| (c.path, &c.old_value)).collect(),
        };
        self.run(changes, snapshot, Some(&previous), clock)
    }

    fn run(
        &mut self,
        changes: &[FieldChange],
        snapshot: &WorldState,
        previous: Option<&dyn StateView>,
        clock: DateTime<Utc>,
    ) -> Vec<StateEvent> {
        let mut fired: Vec<&TriggerRule> = Vec::new();
        for rule in self.rules.iter() {
            let state = self.states.entry(rule.rule_id.clone()).or_insert_with(|| RuleState {
                // First sight of this rule: it is armed unless it already held before the change.
                armed: previous.is_none_or(|p| !rule.is_satisfied(p, clock)),
                last_fired: None,
            });
            let now = rule.is_satisfied(snapshot, clock);
            if !state.armed && rule.rearms(snapshot, clock) {
                state.armed = true;
            }
            if !(state.armed && now) {
                continue;
            }
            if !previous.is_none_or(|p| rule.transition_allowed(p)) {
                state.armed = false;
                continue;
            }
            if state.last_fired.is_some_and(|t| clock - t < rule.cooldown) {
                continue;
            }
            state.armed = false;
            state.last_fired = Some(clock);
            fired.push(rule);
        }
        fired.sort_by(|a, b| b.severity.cmp(&a.severity).then_with(|| a.rule_id.cmp(&b.rule_id)));
        let mut events = Vec::with_capacity(fired.len());
        for rule in fired {
            let triggered_by = changes
                .iter()
                .find(|c| c.path == rule.watch_path)
                .or_else(|| changes.iter().find(|c| rule.guards.iter().any(|g| g.path == c.path)))
                .cloned();
            let observed = FieldValue { path: rule.watch_path, value: snapshot.get(rule.watch_path).clone() };
            let description = format!(
                "{} ({}: {})",
                phrase(observed.path, &observed.value),
                rule.rule_id,
                rule.describe_condition()
            );
            events.push(StateEvent {
                event_id: 0,
                rule_id: rule.rule_id.clone(),
                snapshot_id: snapshot.snapshot_id(),
                triggered_by,
                observed,
                severity: rule.severity,
                concerns: rule.concerns.clone(),
                detected_at: clock,
                description,
            });
        }
        for e in &mut events {
            e.event_id = self.next_event_id;
            self.next_event_id += 1;
        }
        events
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldstate::{apply_update, diff, Patch};

    fn wind_rule() -> RuleSpec {
        RuleSpec::compare("wind", "environment.weather.windSpeedMph", Comparator::Gt, 20.0, Severity::Warning)
    }

    fn step(base: &WorldState, path: &str, v: Value) -> (WorldState, Vec<FieldChange>) {
        let next = apply_update(base, &Patch::new().set(path, v).unwrap()).unwrap();
        let changes = diff(base, &next);
        (next, changes)
    }

    fn with(path: &str, v: Value) -> WorldState {
        apply_update(&WorldState::nominal(), &Patch::new().set(path, v).unwrap()).unwrap()
    }

    #[test]
    fn register_grows_registry_and_rejects_duplicates() {
        let mut reg = RuleRegistry::new();
        reg.register(RuleSpec::compare("wind", "environment.weather.windSpeedMph", Comparator::Gt, 18.0, Severity::Warning))
            .unwrap();
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.register(wind_rule()).unwrap_err(), EventMonError::DuplicateRuleId("wind".into()));
    }

    #[test]
    fn register_rejects_unknown_path() {
        let mut reg = RuleRegistry::new();
        let err = reg
            .register(RuleSpec::compare("x", "environment.weather.bogus", Comparator::Gt, 1.0, Severity::Info))
            .unwrap_err();
        assert_eq!(err, EventMonError::UnknownPath("environment.weather.bogus".into()));
    }

    #[test]
    fn register_rejects_threshold_of_wrong_type() {
        let mut reg = RuleRegistry::new();
        let spec = RuleSpec::with_predicate(
            "bad",
            "environment.weather.forecastTrend",
            PredicateSpec::Compare { op: Comparator::Gt, threshold: Scalar::Number(1.0) },
            Severity::Info,
        );
        assert!(matches!(reg.register(spec), Err(EventMonError::InvalidRule { .. })));
    }

    #[test]
    fn crossing_fires_once() {
        let mut reg = RuleRegistry::new();
        reg.register(wind_rule()).unwrap();
        let mut mon = EventMonitor::new(reg);
        let base = with("environment.weather.windSpeedMph", Value::Number(10.0));
        let (next, changes) = step(&base, "environment.weather.windSpeedMph", Value::Number(22.0));
        let events = mon.evaluate(&changes, &next, next.timestamp());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].triggered_by.as_ref().unwrap().old_value, Value::Number(10.0));
    }

    #[test]
    fn already_satisfied_rule_does_not_refire() {
        let mut reg = RuleRegistry::new();
        reg.register(wind_rule()).unwrap();
        let mut mon = EventMonitor::new(reg);
        let base = with("environment.weather.windSpeedMph", Value::Number(21.0));
        let (next, changes) = step(&base, "environment.weather.windSpeedMph", Value::Number(22.0));
        assert!(mon.evaluate(&changes, &next, next.timestamp()).is_empty());
    }

    #[test]
    fn low_battery_and_property_proximity_emit_two_events_critical_first() {
        let mut reg = RuleRegistry::new();
        reg.register(RuleSpec::compare("power", "system.platform.status.powerLevel", Comparator::Le, 20.0, Severity::Critical))
            .unwrap();
        reg.register(RuleSpec::compare(
            "proximity",
            "regulatory.restrictedAreas.distanceMeters",
            Comparator::Le,
            50.0,
            Severity::Warning,
        ))
        .unwrap();
        let mut mon = EventMonitor::new(reg);
        let base = apply_update(
            &WorldState::nominal(),
            &Patch::new()
                .set("system.platform.status.powerLevel", Value::Number(40.0))
                .unwrap()
                .set("regulatory.restrictedAreas.distanceMeters", Value::Number(500.0))
                .unwrap(),
        )
        .unwrap();
        let next = apply_update(
            &base,
            &Patch::new()
                .set("system.platform.status.powerLevel", Value::Number(15.0))
                .unwrap()
                .set("regulatory.restrictedAreas.distanceMeters", Value::Number(10.0))
                .unwrap(),
        )
        .unwrap();
        let events = mon.evaluate(&diff(&base, &next), &next, next.timestamp());
        let ids: Vec<_> = events.iter().map(|e| (e.rule_id.as_str(), e.severity)).collect();
        assert_eq!(ids, [("power", Severity::Critical), ("proximity", Severity::Warning)]);
        assert!(events[0].event_id < events[1].event_id);
    }

    #[test]
    fn hysteresis_blocks_refire_until_value_retreats() {
        let mut reg = RuleRegistry::new();
        reg.register(wind_rule().hysteresis(2.0).cooldown_secs(0)).unwrap();
        let mut mon = EventMonitor::new(reg);
        let mut s = with("environment.weather.windSpeedMph", Value::Number(10.0));
        let mut fired = Vec::new();
        for v in [22.0, 19.0, 21.0, 17.5, 21.0] {
            let (next, changes) = step(&s, "environment.weather.windSpeedMph", Value::Number(v));
            fired.push(mon.evaluate(&changes, &next, next.timestamp()).len());
            s = next;
        }
        assert_eq!(fired, [1, 0, 0, 0, 1]);
    }

    #[test]
    fn cooldown_defers_a_second_crossing() {
        let mut reg = RuleRegistry::new();
        reg.register(wind_rule().hysteresis(0.0).cooldown_secs(60)).unwrap();
        let mut mon = EventMonitor::new(reg);
        let t0 = WorldState::nominal().timestamp();
        let mut s = WorldState::nominal();
        let mut fired_at = Vec::new();
        for (i, v) in [22.0, 10.0, 22.0, 22.5].into_iter().enumerate() {
            let clock = t0 + chrono::Duration::seconds(20 * i as i64);
            let (next, changes) = step(&s, "environment.weather.windSpeedMph", Value::Number(v));
            if !mon.evaluate(&changes, &next, clock).is_empty() {
                fired_at.push(i);
            }
            s = next;
        }
        // Re-crossing at t=40s is inside the window; it fires at t=60s instead.
        assert_eq!(fired_at, [0, 3]);
    }

    #[test]
    fn deadline_rule_fires_from_clock_alone() {
        let mut reg = RuleRegistry::new();
        reg.register(RuleSpec::with_predicate(
            "auth",
            "regulatory.authorizationExpires",
            PredicateSpec::DeadlineWithin { window: "00:30:00".into() },
            Severity::Warning,
        ))
        .unwrap();
        let mut mon = EventMonitor::new(reg);
        let s = WorldState::nominal();
        assert!(mon.evaluate_initial(&s, s.timestamp()).is_empty());
        let expires = s.get(FieldPath::resolve("regulatory.authorizationExpires").unwrap()).as_instant().unwrap();
        let events = mon.evaluate(&[], &s, expires - chrono::Duration::minutes(10));
        assert_eq!(events.len(), 1);
        assert!(events[0].triggered_by.is_none());
    }

    #[test]
    fn enum_transition_respects_from_set() {
        let mut reg = RuleRegistry::new();
        reg.register(RuleSpec::with_predicate(
            "trend",
            "environment.weather.forecastTrend",
            PredicateSpec::EnumTransition { from: vec!["STABLE".into()], to: vec!["WORSENING".into()] },
            Severity::Caution,
        ))
        .unwrap();
        let mut mon = EventMonitor::new(reg);
        let improving = with("environment.weather.forecastTrend", Value::Text("IMPROVING".into()));
        mon.evaluate_initial(&improving, improving.timestamp());
        let (next, changes) = step(&improving, "environment.weather.forecastTrend", Value::Text("WORSENING".into()));
        assert!(mon.evaluate(&changes, &next, next.timestamp()).is_empty());

        let mut mon = EventMonitor::new(mon.rules().clone());
        let stable = WorldState::nominal();
        mon.evaluate_initial(&stable, stable.timestamp());
        let (next, changes) = step(&stable, "environment.weather.forecastTrend", Value::Text("WORSENING".into()));
        assert_eq!(mon.evaluate(&changes, &next, next.timestamp()).len(), 1);
    }

    #[test]
    fn guarded_rule_fires_when_guard_flips() {
        let mut reg = RuleRegistry::new();
        reg.register(
            RuleSpec::compare(
                "prox",
                "regulatory.restrictedAreas.distanceMeters",
                Comparator::Le,
                100.0,
                Severity::Warning,
            )
            .when("regulatory.restrictedAreas.notificationRequired", Scalar::Bool(true)),
        )
        .unwrap();
        let mut mon = EventMonitor::new(reg);
        let near = with("regulatory.restrictedAreas.distanceMeters", Value::Number(50.0));
        assert!(mon.evaluate_initial(&near, near.timestamp()).is_empty());
        let (next, changes) = step(&near, "regulatory.restrictedAreas.notificationRequired", Value::Bool(true));
        let events = mon.evaluate(&changes, &next, next.timestamp());
        assert_eq!(events.len(), 1);
        assert_eq!(
            events[0].triggered_by.as_ref().unwrap().path.as_str(),
            "regulatory.restrictedAreas.notificationRequired"
        );
    }

    #[test]
    fn default_table_matches_shipped_thresholds() {
        let rules = default_rule_table();
        let ids: Vec<_> = rules.iter().map(|r| r.rule_id.as_str()).collect();
        assert_eq!(
            ids,
            [
                "wind_high",
                "forecast_worsening",
                "battery_low",
                "endurance_low",
                "restricted_proximity",
                "authorization_expiring",
                "capture_in_sensitive_area",
                "altitude_near_obstacles",
            ]
        );
        let wind = &rules[0];
        assert_eq!(wind.predicate, Predicate::Compare { op: Comparator::Gt, threshold: 18.0 });
        assert!((wind.hysteresis_band - 1.8).abs() < 1e-12);
        assert_eq!(wind.cooldown, chrono::Duration::seconds(60));
        assert_eq!(rules[3].predicate, Predicate::Compare { op: Comparator::Le, threshold: 600.0 });
        assert_eq!(rules[5].predicate, Predicate::DeadlineWithin(chrono::Duration::minutes(30)));
    }

    #[test]
    fn default_table_fires_on_wind_and_trend() {
        let mut mon = EventMonitor::new(RuleRegistry::with_defaults());
        let base = WorldState::nominal();
        mon.evaluate_initial(&base, base.timestamp());
        let next = apply_update(
            &base,
            &Patch::new()
                .set("environment.weather.windSpeedMph", Value::Number(22.0))
                .unwrap()
                .set("environment.weather.forecastTrend", Value::Text("WORSENING".into()))
                .unwrap(),
        )
        .unwrap();
        let events = mon.evaluate(&diff(&base, &next), &next, next.timestamp());
        let ids: Vec<_> = events.iter().map(|e| e.rule_id.as_str()).collect();
        assert_eq!(ids, ["wind_high", "forecast_worsening"]);
        let batch = EventBatch { snapshot_id: next.snapshot_id(), events };
        assert_eq!(batch.trigger_line(), "World state updated. Current wind speed: 22 mph; forecast trend: WORSENING.");
    }

    #[test]
    fn default_table_fires_on_power_15() {
        let mut mon = EventMonitor::new(RuleRegistry::with_defaults());
        let base = WorldState::nominal();
        mon.evaluate_initial(&base, base.timestamp());
        let (next, changes) = step(&base, "system.platform.status.powerLevel", Value::Number(15.0));
        let events = mon.evaluate(&changes, &next, next.timestamp());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].rule_id, "battery_low");
        assert_eq!(events[0].severity, Severity::Critical);
    }

    #[test]
    fn nominal_snapshot_fires_nothing() {
        let mut mon = EventMonitor::new(RuleRegistry::with_defaults());
        let s = WorldState::nominal();
        assert!(mon.evaluate_initial(&s, s.timestamp()).is_empty());
    }
}
