use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use serde_json::{Number, Value as Json};

use super::schema::{FieldKind, FieldPath};
use super::WorldStateError;

/// A typed world-state field value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    Bool(bool),
    /// Enumeration members and free-text tokens.
    Text(String),
    /// Whole seconds.
    Duration(u64),
    Instant(DateTime<Utc>),
    List(Vec<String>),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(v) => Some(*v),
            Value::Duration(s) => Some(*s as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_instant(&self) -> Option<DateTime<Utc>> {
        match self {
            Value::Instant(t) => Some(*t),
            _ => None,
        }
    }

    /// Whether this value has the representation required by `kind`.
    /// Range constraints are not checked here.
    pub fn fits(&self, kind: FieldKind) -> bool {
        match (kind, self) {
            (FieldKind::Number(_), Value::Number(_)) => true,
            (FieldKind::Enum(members), Value::Text(s)) => members.contains(&s.as_str()),
            (FieldKind::Bool, Value::Bool(_)) => true,
            (FieldKind::Token, Value::Text(s)) => !s.is_empty(),
            (FieldKind::Duration, Value::Duration(_)) => true,
            (FieldKind::Instant, Value::Instant(_)) => true,
            (FieldKind::TokenSet, Value::List(items)) => items.windows(2).all(|w| w[0] < w[1]),
            (FieldKind::TokenList, Value::List(_)) => true,
            _ => false,
        }
    }

    /// Parses a JSON value for the field at `path`.
    pub fn from_json(path: FieldPath, json: &Json) -> Result<Value, WorldStateError> {
        let kind = path.kind();
        let mismatch = || WorldStateError::TypeMismatch {
            path: path.as_str().to_string(),
            expected: kind.describe(),
            found: json.to_string(),
        };
        let value = match kind {
            FieldKind::Number(_) => Value::Number(json.as_f64().ok_or_else(mismatch)?),
            FieldKind::Bool => Value::Bool(json.as_bool().ok_or_else(mismatch)?),
            FieldKind::Enum(members) => {
                let s = json.as_str().ok_or_else(mismatch)?;
                if !members.contains(&s) {
                    return Err(mismatch());
                }
                Value::Text(s.to_string())
            }
            FieldKind::Token => {
                let s = json.as_str().filter(|s| !s.is_empty()).ok_or_else(mismatch)?;
                Value::Text(s.to_string())
            }
            FieldKind::Duration => {
                let s = json.as_str().ok_or_else(mismatch)?;
                Value::Duration(parse_duration(s).ok_or_else(mismatch)?)
            }
            FieldKind::Instant => {
                let s = json.as_str().ok_or_else(mismatch)?;
                let t = DateTime::parse_from_rfc3339(s).map_err(|_| mismatch())?;
                Value::Instant(t.with_timezone(&Utc))
            }
            FieldKind::TokenSet | FieldKind::TokenList => {
                let items = json.as_array().ok_or_else(mismatch)?;
                let mut out = items
                    .iter()
                    .map(|item| item.as_str().filter(|s| !s.is_empty()).map(str::to_string))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(mismatch)?;
                if kind == FieldKind::TokenSet {
                    out.sort();
                    out.dedup();
                }
                Value::List(out)
            }
        };
        Ok(value)
    }

    /// Canonical JSON form: integral numbers without a fraction, durations
    /// as `hh:mm:ss`, instants in `Z` form.
    pub fn to_json(&self) -> Json {
        match self {
            Value::Number(v) => number_json(*v),
            Value::Bool(b) => Json::Bool(*b),
            Value::Text(s) => Json::String(s.clone()),
            Value::Duration(secs) => Json::String(format_duration(*secs)),
            Value::Instant(t) => Json::String(format_instant(*t)),
            Value::List(items) => Json::Array(items.iter().cloned().map(Json::String).collect()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(v) => write!(f, "{}", number_json(*v)),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Text(s) => f.write_str(s),
            Value::Duration(secs) => f.write_str(&format_duration(*secs)),
            Value::Instant(t) => f.write_str(&format_instant(*t)),
            Value::List(items) => write!(f, "[{}]", items.join(",")),
        }
    }
}

/// Minimal decimal representation; integral values print without `.0`.
pub fn number_json(v: f64) -> Json {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        Json::Number(Number::from(v as i64))
    } else {
        Number::from_f64(v).map(Json::Number).unwrap_or(Json::Null)
    }
}

pub fn parse_duration(s: &str) -> Option<u64> {
    let mut parts = s.split(':');
    let (h, m, sec) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() || h.len() < 2 || m.len() != 2 || sec.len() != 2 {
        return None;
    }
    let digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    if !(digits(h) && digits(m) && digits(sec)) {
        return None;
    }
    let (h, m, sec): (u64, u64, u64) = (h.parse().ok()?, m.parse().ok()?, sec.parse().ok()?);
    if m >= 60 || sec >= 60 {
        return None;
    }
    Some(h * 3600 + m * 60 + sec)
}

pub fn format_duration(secs: u64) -> String {
    format!("{:02}:{:02}:{:02}", secs / 3600, (secs / 60) % 60, secs % 60)
}

pub fn format_instant(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}
