//! Static field schema for the hierarchical world state.
//!
//! Every dot-delimited path that rules, personas, templates, or scenario files
//! may reference is declared here exactly once. The table is kept sorted by
//! path so that iteration order is the canonical (lexicographic) order.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Numeric range constraint attached to a number field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    /// Any finite value.
    Finite,
    /// `v >= 0`
    NonNegative,
    /// `v > 0`
    Positive,
    /// `0 <= v <= 100`
    Percent,
    /// `0 <= v < 360`
    Heading,
}

impl Bound {
    pub fn check(self, v: f64) -> Result<(), &'static str> {
        if !v.is_finite() {
            return Err("must be a finite number");
        }
        match self {
            Bound::Finite => Ok(()),
            Bound::NonNegative if v < 0.0 => Err("must be non-negative"),
            Bound::Positive if v <= 0.0 => Err("must be strictly positive"),
            Bound::Percent if !(0.0..=100.0).contains(&v) => Err("must lie in [0, 100]"),
            Bound::Heading if !(0.0..360.0).contains(&v) => Err("must lie in [0, 360)"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Number(Bound),
    Enum(&'static [&'static str]),
    Bool,
    /// Free-text identifier token.
    Token,
    /// `hh:mm:ss`, stored as whole seconds.
    Duration,
    /// UTC instant, ISO-8601.
    Instant,
    /// Unordered set of identifiers; stored sorted and deduplicated.
    TokenSet,
    /// Ordered list of identifiers.
    TokenList,
}

impl FieldKind {
    pub fn describe(self) -> &'static str {
        match self {
            FieldKind::Number(_) => "number",
            FieldKind::Enum(_) => "enumeration",
            FieldKind::Bool => "boolean",
            FieldKind::Token => "token string",
            FieldKind::Duration => "duration hh:mm:ss",
            FieldKind::Instant => "ISO-8601 UTC instant",
            FieldKind::TokenSet => "array of identifiers",
            FieldKind::TokenList => "array of identifiers",
        }
    }

    /// Kinds that the event monitor can compare against a numeric threshold.
    pub fn is_numeric(self) -> bool {
        matches!(self, FieldKind::Number(_) | FieldKind::Duration)
    }
}

#[derive(Debug)]
pub struct FieldSpec {
    pub path: &'static str,
    pub kind: FieldKind,
    /// Short human label used when phrasing events in prompts.
    pub label: &'static str,
    pub unit: Option<&'static str>,
}

pub const TREND: &[&str] = &["IMPROVING", "STABLE", "WORSENING"];
pub const DENSITY: &[&str] = &["low", "moderate", "high"];
pub const PHASE: &[&str] = &["preflight", "enroute", "on_task", "returning", "landing"];
pub const COLLECTION: &[&str] = &["none", "metadata", "full"];
pub const SENSITIVE_HANDLING: &[&str] = &["avoid", "restrict_capture", "unrestricted"];

macro_rules! field {
    ($path:literal, $kind:expr, $label:literal) => {
        FieldSpec { path: $path, kind: $kind, label: $label, unit: None }
    };
    ($path:literal, $kind:expr, $label:literal, $unit:literal) => {
        FieldSpec { path: $path, kind: $kind, label: $label, unit: Some($unit) }
    };
}

/// Sorted lexicographically by path.
pub static SCHEMA: &[FieldSpec] = &[
    field!("environment.location.obstacleDensity", FieldKind::Enum(DENSITY), "obstacle density"),
    field!("environment.location.populationDensity", FieldKind::Enum(DENSITY), "population density"),
    field!("environment.location.vegetationDensity", FieldKind::Enum(DENSITY), "vegetation density"),
    field!("environment.weather.forecastTrend", FieldKind::Enum(TREND), "forecast trend"),
    field!("environment.weather.visibilityMiles", FieldKind::Number(Bound::NonNegative), "visibility", "mi"),
    field!("environment.weather.windSpeedMph", FieldKind::Number(Bound::NonNegative), "wind speed", "mph"),
    field!("mission.dataOperations.collectionLevel", FieldKind::Enum(COLLECTION), "data collection level"),
    field!("mission.missionConstraints.sensitiveAreaHandling", FieldKind::Enum(SENSITIVE_HANDLING), "sensitive area handling"),
    field!("mission.missionContext.elapsedTime", FieldKind::Duration, "elapsed mission time"),
    field!("mission.missionContext.phase", FieldKind::Enum(PHASE), "mission phase"),
    field!("mission.operationalParameters.resourceManagement.groundTeams", FieldKind::TokenList, "ground teams"),
    field!("mission.operationalParameters.resourceManagement.prioritizationMethod", FieldKind::Token, "prioritization method"),
    field!("regulatory.authorizationExpires", FieldKind::Instant, "flight authorization expiry"),
    field!("regulatory.restrictedAreas.distanceMeters", FieldKind::Number(Bound::NonNegative), "distance to nearest restricted area", "m"),
    field!("regulatory.restrictedAreas.nearestType", FieldKind::Token, "nearest restricted area type"),
    field!("regulatory.restrictedAreas.notificationRequired", FieldKind::Bool, "restricted area notification required"),
    field!("system.platform.camera.opticalZoom", FieldKind::Number(Bound::Positive), "optical zoom", "x"),
    field!("system.platform.camera.recording", FieldKind::Bool, "camera recording"),
    field!("system.platform.status.estimatedEndurance", FieldKind::Duration, "estimated endurance"),
    field!("system.platform.status.powerLevel", FieldKind::Number(Bound::Percent), "battery level", "%"),
    field!("system.platform.status.sensorsActive", FieldKind::TokenSet, "active sensors"),
    field!("system.platform.telemetry.altitudeFt", FieldKind::Number(Bound::Finite), "altitude", "ft AGL"),
    field!("system.platform.telemetry.groundSpeedMph", FieldKind::Number(Bound::NonNegative), "ground speed", "mph"),
    field!("system.platform.telemetry.heading", FieldKind::Number(Bound::Heading), "heading", "deg"),
];

/// Prefix rewrites applied before lookup. Scenario narratives and advisories
/// use a few shortened forms of the canonical paths.
const ALIASES: &[(&str, &str)] = &[
    ("system.status.", "system.platform.status."),
    ("system.telemetry.", "system.platform.telemetry."),
    ("system.camera.", "system.platform.camera."),
    ("operationalParameters.", "mission.operationalParameters."),
    ("missionContext.", "mission.missionContext."),
    ("missionConstraints.", "mission.missionConstraints."),
    ("dataOperations.", "mission.dataOperations."),
    ("restrictedAreas.", "regulatory.restrictedAreas."),
];

/// A path that is known to resolve in [`SCHEMA`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FieldPath(&'static str);

impl FieldPath {
    /// Resolves a path (canonical or alias form) to its schema entry.
    pub fn resolve(raw: &str) -> Option<FieldPath> {
        let trimmed = raw.strip_prefix("worldState.").unwrap_or(raw);
        if let Some(path) = lookup(trimmed) {
            return Some(path);
        }
        ALIASES.iter().find_map(|(from, to)| {
            trimmed
                .strip_prefix(from)
                .and_then(|rest| lookup(&format!("{to}{rest}")))
        })
    }

    pub fn as_str(self) -> &'static str {
        self.0
    }

    pub fn spec(self) -> &'static FieldSpec {
        // Construction only happens through `lookup`, so the entry exists.
        &SCHEMA[SCHEMA.binary_search_by(|f| f.path.cmp(self.0)).expect("schema path")]
    }

    pub fn kind(self) -> FieldKind {
        self.spec().kind
    }

    /// Last path segment, e.g. `windSpeedMph`.
    pub fn leaf(self) -> &'static str {
        self.0.rsplit('.').next().unwrap_or(self.0)
    }

    pub fn all() -> impl Iterator<Item = FieldPath> {
        SCHEMA.iter().map(|f| FieldPath(f.path))
    }
}

fn lookup(path: &str) -> Option<FieldPath> {
    SCHEMA
        .binary_search_by(|f| f.path.cmp(path))
        .ok()
        .map(|i| FieldPath(SCHEMA[i].path))
}

impl fmt::Debug for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FieldPath({})", self.0)
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

impl Serialize for FieldPath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.0)
    }
}

impl<'de> Deserialize<'de> for FieldPath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        FieldPath::resolve(&raw)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown world-state path `{raw}`")))
    }
}
