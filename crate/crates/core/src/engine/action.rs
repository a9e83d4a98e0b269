use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::worldstate::{Patch, Value, WorldState};

use super::EngineError;

/// An operator command as submitted over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OperatorAction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_id: Option<String>,
    #[serde(default = "default_operator")]
    pub operator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issued_at: Option<DateTime<Utc>>,
    #[serde(flatten)]
    pub command: ActionCommand,
}

fn default_operator() -> String {
    "operator".into()
}

impl OperatorAction {
    pub fn new(command: ActionCommand) -> OperatorAction {
        OperatorAction { action_id: None, operator_id: default_operator(), issued_at: None, command }
    }

    /// Parses the wire form, reporting any problem as invalid parameters.
    pub fn from_json(json: Json) -> Result<OperatorAction, EngineError> {
        serde_json::from_value(json).map_err(|e| EngineError::InvalidParameters(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameters", rename_all = "snake_case", rename_all_fields = "camelCase")]
pub enum ActionCommand {
    AdjustAltitude { target_altitude_ft: f64 },
    ReduceSpeed { target_mph: f64 },
    PauseMission,
    ResumeMission {
        #[serde(default)]
        ground_speed_mph: Option<f64>,
    },
    AbortMission,
    ToggleSensor { sensor_id: String, enabled: bool },
    AcknowledgeAdvisory { advisory_id: String },
    RequestAdvice { persona_id: String },
}

impl ActionCommand {
    pub fn kind(&self) -> &'static str {
        match self {
            ActionCommand::AdjustAltitude { .. } => "adjust_altitude",
            ActionCommand::ReduceSpeed { .. } => "reduce_speed",
            ActionCommand::PauseMission => "pause_mission",
            ActionCommand::ResumeMission { .. } => "resume_mission",
            ActionCommand::AbortMission => "abort_mission",
            ActionCommand::ToggleSensor { .. } => "toggle_sensor",
            ActionCommand::AcknowledgeAdvisory { .. } => "acknowledge_advisory",
            ActionCommand::RequestAdvice { .. } => "request_advice",
        }
    }

    /// The world-state patch this command applies, if it changes the state.
    /// `resume_speed` is the ground speed to restore when none is given.
    pub fn to_patch(&self, state: &WorldState, resume_speed: f64) -> Result<Option<Patch>, EngineError> {
        let invalid = |msg: String| EngineError::InvalidParameters(msg);
        let patch = Patch::new();
        let patch = match self {
            ActionCommand::AdjustAltitude { target_altitude_ft: ft } => {
                if !ft.is_finite() || *ft < 0.0 {
                    return Err(invalid(format!("targetAltitudeFt must be >= 0, got {ft}")));
                }
                patch.set("system.platform.telemetry.altitudeFt", Value::Number(*ft))?
            }
            ActionCommand::ReduceSpeed { target_mph } => {
                let current = state.lookup("system.platform.telemetry.groundSpeedMph").and_then(|(_, v)| v.as_f64()).unwrap_or(0.0);
                if !target_mph.is_finite() || *target_mph < 0.0 {
                    return Err(invalid(format!("targetMph must be >= 0, got {target_mph}")));
                }
                if *target_mph > current {
                    return Err(invalid(format!("targetMph {target_mph} is above the current ground speed {current}")));
                }
                patch.set("system.platform.telemetry.groundSpeedMph", Value::Number(*target_mph))?
            }
            ActionCommand::PauseMission => patch.set("system.platform.telemetry.groundSpeedMph", Value::Number(0.0))?,
            ActionCommand::ResumeMission { ground_speed_mph } => {
                let speed = ground_speed_mph.unwrap_or(resume_speed);
                if !speed.is_finite() || speed < 0.0 {
                    return Err(invalid(format!("groundSpeedMph must be >= 0, got {speed}")));
                }
                patch.set("system.platform.telemetry.groundSpeedMph", Value::Number(speed))?
            }
            ActionCommand::AbortMission => patch.set("mission.missionContext.phase", Value::Text("returning".into()))?,
            ActionCommand::ToggleSensor { sensor_id, enabled } => {
                if sensor_id.is_empty() || !sensor_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(invalid(format!("sensorId `{sensor_id}` is not a sensor token")));
                }
                let mut active: Vec<String> = match state.lookup("system.platform.status.sensorsActive") {
                    Some((_, Value::List(items))) => items.clone(),
                    _ => Vec::new(),
                };
                active.retain(|s| s != sensor_id);
                if *enabled {
                    active.push(sensor_id.clone());
                }
                active.sort();
                let patch = patch.set("system.platform.status.sensorsActive", Value::List(active))?;
                if sensor_id == "camera" {
                    patch.set("system.platform.camera.recording", Value::Bool(*enabled))?
                } else {
                    patch
                }
            }
            ActionCommand::AcknowledgeAdvisory { .. } | ActionCommand::RequestAdvice { .. } => return Ok(None),
        };
        Ok(Some(patch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn wire_form_round_trips() {
        let action = OperatorAction::from_json(json!({
            "kind": "reduce_speed",
            "parameters": { "targetMph": 15 },
            "operatorId": "op-1"
        }))
        .unwrap();
        assert_eq!(action.command, ActionCommand::ReduceSpeed { target_mph: 15.0 });
        let back = serde_json::to_value(&action).unwrap();
        assert_eq!(back["kind"], "reduce_speed");
        assert_eq!(back["parameters"]["targetMph"], 15.0);
        let pause = OperatorAction::from_json(json!({ "kind": "pause_mission" })).unwrap();
        assert_eq!(pause.command, ActionCommand::PauseMission);
        assert_eq!(pause.operator_id, "operator");
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(OperatorAction::from_json(json!({ "kind": "adjust_altitude", "parameters": {} })).is_err());
        assert!(OperatorAction::from_json(json!({ "kind": "teleport" })).is_err());
        let state = WorldState::nominal();
        let err = ActionCommand::AdjustAltitude { target_altitude_ft: -5.0 }.to_patch(&state, 0.0).unwrap_err();
        assert!(matches!(err, EngineError::InvalidParameters(_)));
        let err = ActionCommand::ReduceSpeed { target_mph: 25.0 }.to_patch(&state, 0.0).unwrap_err();
        assert!(matches!(err, EngineError::InvalidParameters(_)));
    }

    #[test]
    fn camera_toggle_also_sets_recording() {
        let state = WorldState::nominal();
        let patch = ActionCommand::ToggleSensor { sensor_id: "camera".into(), enabled: false }
            .to_patch(&state, 0.0)
            .unwrap()
            .unwrap();
        let values: Vec<_> = patch.values().map(|(p, v)| (p.as_str(), v.clone())).collect();
        assert!(values.contains(&("system.platform.camera.recording", Value::Bool(false))));
        assert!(values.contains(&(
            "system.platform.status.sensorsActive",
            Value::List(vec!["gps".into(), "imu".into(), "thermal".into()])
        )));
    }
}
