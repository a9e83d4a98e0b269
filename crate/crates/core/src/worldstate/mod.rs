//! Versioned, hierarchical world state.
//!
//! A [`WorldState`] is an immutable snapshot of environment, platform,
//! mission, and regulatory context. Updates are expressed as a [`Patch`]
//! (field path → value) and produce a new snapshot with the next
//! `snapshotId`; the base snapshot is never touched. [`diff`] reports the
//! paths whose values differ between two snapshots in canonical path order.

mod schema;
mod value;

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value as Json};
use thiserror::Error;

pub use schema::{Bound, FieldKind, FieldPath, FieldSpec, SCHEMA};
pub use value::{format_duration, format_instant, number_json, parse_duration, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldStateError {
    #[error("unknown world-state path `{0}`")]
    UnknownPath(String),
    #[error("type mismatch at `{path}`: expected {expected}, found {found}")]
    TypeMismatch {
        path: String,
        expected: &'static str,
        found: String,
    },
    #[error("invariant violated: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvariantViolation(Vec<Violation>),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
}

/// A broken field invariant, reported as data by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.path, self.rule)
    }
}

/// Unknown-key policy for parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Reject unrecognized keys with [`WorldStateError::UnknownPath`].
    #[default]
    Strict,
    /// Keep unrecognized keys alongside the state but ignore them.
    Permissive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    snapshot_id: u64,
    timestamp: DateTime<Utc>,
    fields: BTreeMap<FieldPath, Value>,
    /// Unrecognized keys retained by permissive parsing.
    extras: BTreeMap<String, Json>,
}

const NOMINAL_JSON: &str = include_str!("../../assets/baseline_state.json");

impl WorldState {
    /// The ideal-conditions snapshot: clear weather, full battery, proper
    /// authorization, no nearby restricted areas.
    pub fn nominal() -> WorldState {
        WorldState::parse(NOMINAL_JSON).expect("shipped baseline state is valid")
    }

    pub fn snapshot_id(&self) -> u64 {
        self.snapshot_id
    }

    pub fn timestamp(&self) -> DateTime<Utc> {
        self.timestamp
    }

    pub fn get(&self, path: FieldPath) -> &Value {
        // Every constructor fills all schema paths.
        &self.fields[&path]
    }

    /// Looks up a path given as text, accepting aliases.
    pub fn lookup(&self, raw: &str) -> Option<(FieldPath, &Value)> {
        FieldPath::resolve(raw).map(|p| (p, self.get(p)))
    }

    pub fn fields(&self) -> impl Iterator<Item = (FieldPath, &Value)> {
        self.fields.iter().map(|(p, v)| (*p, v))
    }

    pub fn extras(&self) -> &BTreeMap<String, Json> {
        &self.extras
    }

    /// Overwrites a field without range checks. The value must still have the
    /// field's representation. Intended for constructing invalid fixtures.
    pub fn with_unchecked(mut self, path: FieldPath, value: Value) -> Result<Self, WorldStateError> {
        check_kind(path, &value)?;
        self.fields.insert(path, value);
        Ok(self)
    }

    /// Canonical JSON text: sorted keys, minimal numbers, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        self.to_json().to_string()
    }

    pub fn to_json(&self) -> Json {
        let mut root = Map::new();
        for (key, value) in &self.extras {
            insert_path(&mut root, key, value.clone());
        }
        for (path, value) in &self.fields {
            insert_path(&mut root, path.as_str(), value.to_json());
        }
        root.insert("snapshotId".into(), Json::from(self.snapshot_id));
        root.insert("timestamp".into(), Json::String(format_instant(self.timestamp)));
        Json::Object(root)
    }

    /// A nested JSON object restricted to `paths`, in canonical form.
    pub fn excerpt<'a>(&self, paths: impl IntoIterator<Item = &'a FieldPath>) -> Json {
        let mut root = Map::new();
        for path in paths {
            insert_path(&mut root, path.as_str(), self.get(*path).to_json());
        }
        Json::Object(root)
    }

    /// Strict parse of a complete snapshot.
    pub fn parse(text: &str) -> Result<WorldState, WorldStateError> {
        Self::parse_with(text, ParseMode::Strict)
    }

    pub fn parse_with(text: &str, mode: ParseMode) -> Result<WorldState, WorldStateError> {
        let json: Json = serde_json::from_str(text).map_err(|e| WorldStateError::Parse {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        Self::from_json(&json, mode)
    }

    pub fn from_json(json: &Json, mode: ParseMode) -> Result<WorldState, WorldStateError> {
        let root = json.as_object().ok_or_else(|| WorldStateError::Parse {
            path: "$".into(),
            message: "world state must be a JSON object".into(),
        })?;
        let snapshot_id = match root.get("snapshotId") {
            None => return Err(WorldStateError::MissingField("snapshotId".into())),
            Some(v) => v.as_u64().ok_or_else(|| WorldStateError::TypeMismatch {
                path: "snapshotId".into(),
                expected: "non-negative integer",
                found: v.to_string(),
            })?,
        };
        let timestamp = match root.get("timestamp") {
            None => return Err(WorldStateError::MissingField("timestamp".into())),
            Some(v) => v
                .as_str()
                .and_then(|s| DateTime::parse_from_rfc3339(s).ok())
                .map(|t| t.with_timezone(&Utc))
                .ok_or_else(|| WorldStateError::TypeMismatch {
                    path: "timestamp".into(),
                    expected: "ISO-8601 UTC instant",
                    found: v.to_string(),
                })?,
        };
        let mut body = root.clone();
        body.remove("snapshotId");
        body.remove("timestamp");
        let flat = flatten(&body, mode)?;
        let mut fields = BTreeMap::new();
        for (path, raw) in &flat.fields {
            fields.insert(*path, Value::from_json(*path, raw)?);
        }
        if let Some(missing) = FieldPath::all().find(|p| !fields.contains_key(p)) {
            return Err(WorldStateError::MissingField(missing.as_str().into()));
        }
        let state = WorldState { snapshot_id, timestamp, fields, extras: flat.extras };
        let violations = validate(&state);
        if !violations.is_empty() {
            return Err(WorldStateError::InvariantViolation(violations));
        }
        Ok(state)
    }
}

impl Serialize for WorldState {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for WorldState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let json = Json::deserialize(d)?;
        WorldState::from_json(&json, ParseMode::Strict).map_err(serde::de::Error::custom)
    }
}

/// A partial field-path → value map applied by [`apply_update`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Patch {
    timestamp: Option<DateTime<Utc>>,
    values: BTreeMap<FieldPath, Value>,
    ignored: Vec<String>,
}

impl Patch {
    pub fn new() -> Patch {
        Patch::default()
    }

    /// Builds a patch from JSON. Keys may be dotted paths, nested objects, or
    /// a mix of both; aliases are normalized.
    pub fn from_json(json: &Json, mode: ParseMode) -> Result<Patch, WorldStateError> {
        let root = json.as_object().ok_or_else(|| WorldStateError::Parse {
            path: "$".into(),
            message: "patch must be a JSON object".into(),
        })?;
        let mut body = root.clone();
        let mut patch = Patch::new();
        if let Some(ts) = body.remove("timestamp") {
            let t = ts
                .as_str()
                .and_then(|s| DateTime::parse_from_rfc3339(s).ok())
                .ok_or_else(|| WorldStateError::TypeMismatch {
                    path: "timestamp".into(),
                    expected: "ISO-8601 UTC instant",
                    found: ts.to_string(),
                })?;
            patch.timestamp = Some(t.with_timezone(&Utc));
        }
        let flat = flatten(&body, mode)?;
        for (path, raw) in &flat.fields {
            patch.values.insert(*path, Value::from_json(*path, raw)?);
        }
        patch.ignored = flat.extras.into_keys().collect();
        Ok(patch)
    }

    /// Sets a field given as text (aliases accepted).
    pub fn set(mut self, raw_path: &str, value: Value) -> Result<Patch, WorldStateError> {
        let path = FieldPath::resolve(raw_path)
            .ok_or_else(|| WorldStateError::UnknownPath(raw_path.to_string()))?;
        check_kind(path, &value)?;
        self.values.insert(path, value);
        Ok(self)
    }

    pub fn set_json(self, raw_path: &str, json: Json) -> Result<Patch, WorldStateError> {
        let path = FieldPath::resolve(raw_path)
            .ok_or_else(|| WorldStateError::UnknownPath(raw_path.to_string()))?;
        let value = Value::from_json(path, &json)?;
        self.set(path.as_str(), value)
    }

    pub fn at(mut self, timestamp: DateTime<Utc>) -> Patch {
        self.timestamp = Some(timestamp);
        self
    }

    pub fn timestamp(&self) -> Option<DateTime<Utc>> {
        self.timestamp
    }

    pub fn values(&self) -> impl Iterator<Item = (FieldPath, &Value)> {
        self.values.iter().map(|(p, v)| (*p, v))
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Keys dropped by permissive parsing.
    pub fn ignored(&self) -> &[String] {
        &self.ignored
    }

    pub fn to_json(&self) -> Json {
        let mut map = Map::new();
        for (path, value) in &self.values {
            map.insert(path.as_str().into(), value.to_json());
        }
        if let Some(t) = self.timestamp {
            map.insert("timestamp".into(), Json::String(format_instant(t)));
        }
        Json::Object(map)
    }
}

/// One differing path between two snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldChange {
    pub path: FieldPath,
    pub old_value: Value,
    pub new_value: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct FieldChangeWire {
    path: FieldPath,
    old_value: Json,
    new_value: Json,
}

impl Serialize for FieldChange {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        FieldChangeWire {
            path: self.path,
            old_value: self.old_value.to_json(),
            new_value: self.new_value.to_json(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FieldChange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = FieldChangeWire::deserialize(d)?;
        let old_value = Value::from_json(wire.path, &wire.old_value).map_err(serde::de::Error::custom)?;
        let new_value = Value::from_json(wire.path, &wire.new_value).map_err(serde::de::Error::custom)?;
        Ok(FieldChange { path: wire.path, old_value, new_value })
    }
}

/// A path together with its value in some snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldValue {
    pub path: FieldPath,
    pub value: Value,
}

#[derive(Serialize, Deserialize)]
struct FieldValueWire {
    path: FieldPath,
    value: Json,
}

impl Serialize for FieldValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        FieldValueWire { path: self.path, value: self.value.to_json() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FieldValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = FieldValueWire::deserialize(d)?;
        let value = Value::from_json(wire.path, &wire.value).map_err(serde::de::Error::custom)?;
        Ok(FieldValue { path: wire.path, value })
    }
}

/// Applies `patch` to `base`, returning a new snapshot with the next id.
pub fn apply_update(base: &WorldState, patch: &Patch) -> Result<WorldState, WorldStateError> {
    let mut violations = Vec::new();
    for (path, value) in patch.values() {
        check_kind(path, value)?;
        violations.extend(check_range(path, value));
    }
    if !violations.is_empty() {
        return Err(WorldStateError::InvariantViolation(violations));
    }
    let mut next = base.clone();
    next.snapshot_id = base.snapshot_id + 1;
    if let Some(t) = patch.timestamp {
        next.timestamp = t;
    }
    for (path, value) in patch.values() {
        next.fields.insert(path, value.clone());
    }
    Ok(next)
}

/// Paths whose values differ, in lexicographic path order.
pub fn diff(old: &WorldState, new: &WorldState) -> Vec<FieldChange> {
    old.fields
        .iter()
        .zip(new.fields.iter())
        .filter(|((_, a), (_, b))| a != b)
        .map(|((path, a), (_, b))| FieldChange { path: *path, old_value: a.clone(), new_value: b.clone() })
        .collect()
}

/// All range violations in `state`; empty iff every invariant holds.
pub fn validate(state: &WorldState) -> Vec<Violation> {
    state.fields().flat_map(|(path, value)| check_range(path, value)).collect()
}

fn check_kind(path: FieldPath, value: &Value) -> Result<(), WorldStateError> {
    if value.fits(path.kind()) {
        Ok(())
    } else {
        Err(WorldStateError::TypeMismatch {
            path: path.as_str().into(),
            expected: path.kind().describe(),
            found: value.to_json().to_string(),
        })
    }
}

fn check_range(path: FieldPath, value: &Value) -> Option<Violation> {
    match (path.kind(), value) {
        (FieldKind::Number(bound), Value::Number(v)) => bound.check(*v).err().map(|rule| Violation {
            path: path.as_str().into(),
            rule: rule.into(),
        }),
        _ => None,
    }
}

struct Flattened<'a> {
    fields: Vec<(FieldPath, &'a Json)>,
    extras: BTreeMap<String, Json>,
}

fn flatten(body: &Map<String, Json>, mode: ParseMode) -> Result<Flattened<'_>, WorldStateError> {
    let mut out = Flattened { fields: Vec::new(), extras: BTreeMap::new() };
    walk("", body, mode, &mut out)?;
    Ok(out)
}

fn walk<'a>(
    prefix: &str,
    obj: &'a Map<String, Json>,
    mode: ParseMode,
    out: &mut Flattened<'a>,
) -> Result<(), WorldStateError> {
    for (key, value) in obj {
        let full = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        if let Some(path) = FieldPath::resolve(&full) {
            out.fields.push((path, value));
        } else if let Json::Object(child) = value {
            walk(&full, child, mode, out)?;
        } else if mode == ParseMode::Strict {
            return Err(WorldStateError::UnknownPath(full));
        } else {
            out.extras.insert(full, value.clone());
        }
    }
    Ok(())
}

fn insert_path(root: &mut Map<String, Json>, path: &str, value: Json) {
    let mut segments = path.split('.').peekable();
    let mut node = root;
    while let Some(seg) = segments.next() {
        if segments.peek().is_none() {
            node.entry(seg.to_string()).or_insert(value);
            return;
        }
        let child = node.entry(seg.to_string()).or_insert_with(|| Json::Object(Map::new()));
        match child {
            Json::Object(map) => node = map,
            // A scalar already sits where an object is needed; keep the scalar.
            _ => return,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn path(p: &str) -> FieldPath {
        FieldPath::resolve(p).unwrap()
    }

    #[test]
    fn nominal_snapshot_is_valid() {
        let s = WorldState::nominal();
        assert!(validate(&s).is_empty());
        assert_eq!(s.fields().count(), SCHEMA.len());
    }

    #[test]
    fn wind_patch_updates_two_fields() {
        let base = WorldState::nominal();
        let patch = Patch::from_json(
            &json!({"environment.weather.windSpeedMph": 22, "environment.weather.forecastTrend": "WORSENING"}),
            ParseMode::Strict,
        )
        .unwrap();
        let next = apply_update(&base, &patch).unwrap();
        assert_eq!(next.get(path("environment.weather.windSpeedMph")), &Value::Number(22.0));
        assert_eq!(next.get(path("environment.weather.forecastTrend")), &Value::Text("WORSENING".into()));
        assert_eq!(next.snapshot_id(), base.snapshot_id() + 1);
        assert_eq!(base, WorldState::nominal());
    }

    #[test]
    fn empty_patch_only_bumps_snapshot_id() {
        let base = WorldState::nominal();
        let next = apply_update(&base, &Patch::new()).unwrap();
        assert_eq!(next.snapshot_id(), base.snapshot_id() + 1);
        assert!(diff(&base, &next).is_empty());
    }

    #[test]
    fn out_of_range_power_is_rejected() {
        let patch = Patch::new().set("system.platform.status.powerLevel", Value::Number(150.0)).unwrap();
        let err = apply_update(&WorldState::nominal(), &patch).unwrap_err();
        assert!(matches!(err, WorldStateError::InvariantViolation(ref v) if v[0].path == "system.platform.status.powerLevel"));
    }

    #[test]
    fn unknown_patch_path_is_rejected() {
        let err = Patch::from_json(&json!({"environment.weather.bogus": 1}), ParseMode::Strict).unwrap_err();
        assert_eq!(err, WorldStateError::UnknownPath("environment.weather.bogus".into()));
    }

    #[test]
    fn string_wind_is_a_type_mismatch() {
        let err = Patch::from_json(&json!({"environment": {"weather": {"windSpeedMph": "fast"}}}), ParseMode::Strict)
            .unwrap_err();
        assert!(matches!(err, WorldStateError::TypeMismatch { ref path, .. } if path == "environment.weather.windSpeedMph"));
    }

    #[test]
    fn permissive_patch_ignores_unknown_keys() {
        let patch = Patch::from_json(
            &json!({"environment": {"weather": {"windSpeedMph": 9, "humidity": 40}}}),
            ParseMode::Permissive,
        )
        .unwrap();
        assert_eq!(patch.len(), 1);
        assert_eq!(patch.ignored(), ["environment.weather.humidity"]);
    }

    #[test]
    fn nested_alias_patch_is_normalized() {
        let patch = Patch::from_json(&json!({"system": {"status": {"powerLevel": 15}}}), ParseMode::Strict).unwrap();
        let (p, v) = patch.values().next().unwrap();
        assert_eq!(p.as_str(), "system.platform.status.powerLevel");
        assert_eq!(v, &Value::Number(15.0));
    }

    #[test]
    fn diff_is_reflexively_empty() {
        let s = WorldState::nominal();
        assert!(diff(&s, &s).is_empty());
    }

    #[test]
    fn diff_reports_changes_in_path_order() {
        let base = WorldState::nominal();
        let patch = Patch::new()
            .set("system.platform.status.powerLevel", Value::Number(15.0))
            .unwrap()
            .set("environment.weather.windSpeedMph", Value::Number(22.0))
            .unwrap();
        let changes = diff(&base, &apply_update(&base, &patch).unwrap());
        let paths: Vec<_> = changes.iter().map(|c| c.path.as_str()).collect();
        assert_eq!(paths, ["environment.weather.windSpeedMph", "system.platform.status.powerLevel"]);
    }

    #[test]
    fn validate_flags_heading_360_and_negative_distance() {
        let s = WorldState::nominal()
            .with_unchecked(path("system.platform.telemetry.heading"), Value::Number(360.0))
            .unwrap();
        let v = validate(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "system.platform.telemetry.heading");

        let s = WorldState::nominal()
            .with_unchecked(path("regulatory.restrictedAreas.distanceMeters"), Value::Number(-5.0))
            .unwrap();
        let v = validate(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "must be non-negative");
    }

    #[test]
    fn canonical_text_is_sorted_and_stable() {
        let s = WorldState::nominal();
        let text = s.to_canonical_json();
        assert_eq!(text, WorldState::parse(&text).unwrap().to_canonical_json());
        assert!(text.starts_with("{\"environment\":{\"location\":"));
        assert!(text.contains("\"estimatedEndurance\":\"00:40:00\""));
    }

    #[test]
    fn parse_rejects_unknown_keys_in_strict_mode_only() {
        let mut json = WorldState::nominal().to_json();
        json["environment"]["weather"]["humidity"] = json!(40);
        let text = json.to_string();
        assert_eq!(
            WorldState::parse(&text).unwrap_err(),
            WorldStateError::UnknownPath("environment.weather.humidity".into())
        );
        let s = WorldState::parse_with(&text, ParseMode::Permissive).unwrap();
        assert_eq!(s.extras().get("environment.weather.humidity"), Some(&json!(40)));
        assert!(s.to_canonical_json().contains("\"humidity\":40"));
    }

    #[test]
    fn parse_reports_missing_fields_and_syntax_errors() {
        let mut json = WorldState::nominal().to_json();
        json["system"]["platform"]["status"].as_object_mut().unwrap().remove("powerLevel");
        assert_eq!(
            WorldState::parse(&json.to_string()).unwrap_err(),
            WorldStateError::MissingField("system.platform.status.powerLevel".into())
        );
        assert!(matches!(WorldState::parse("{\"snapshotId\": ").unwrap_err(), WorldStateError::Parse { .. }));
    }
}
