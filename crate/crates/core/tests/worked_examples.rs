use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Duration, Utc};
use raven_core::audit::{AuditRecord, RecordKind};
use raven_core::engine::{Engine, IngestMeta};
use raven_core::harness::{execute, load_scenario, SystemConfig};
use raven_core::personas::PersonaRegistry;
use raven_core::pipeline::{Pipeline, RuleBackend};
use raven_core::worldstate::{Patch, Value, WorldState};
use serde_json::Value as Json;

fn oracle(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/oracle").join(name)
}

fn records(engine: &Engine, kind: RecordKind) -> Vec<AuditRecord> {
    engine.with_log(|log| log.records().iter().filter(|r| r.record_kind == kind).cloned().collect())
}

fn prompt_text(engine: &Engine, kind: &str, persona: Option<&str>) -> String {
    records(engine, RecordKind::Prompt)
        .into_iter()
        .find(|r| r.payload["kind"] == kind && persona.is_none_or(|p| r.payload["personaId"] == p))
        .map(|r| r.payload["text"].as_str().unwrap().to_string())
        .unwrap_or_else(|| panic!("no {kind} prompt"))
}

/// Nominal state, then wind 22 mph with a worsening forecast.
fn wind_engine() -> Engine {
    let start = WorldState::nominal().timestamp();
    let pipeline = Pipeline::new(Arc::new(PersonaRegistry::shipped()), Arc::new(RuleBackend::new()));
    let engine = Engine::builder(pipeline).start(start).unwrap();
    let patch = Patch::new()
        .set("environment.weather.windSpeedMph", Value::Number(22.0))
        .unwrap()
        .set("environment.weather.forecastTrend", Value::Text("WORSENING".into()))
        .unwrap();
    let clock = start + Duration::minutes(5);
    engine.ingest(patch, IngestMeta::default(), clock).unwrap();
    engine.process_pending(clock).unwrap();
    engine
}

#[test]
fn wind_update_selects_only_safety_with_reasons_for_all() {
    let engine = wind_engine();
    let selection = engine.last_selection().unwrap();
    assert_eq!(selection["selectedAdvocates"], serde_json::json!(["safety_controller"]));
    let rationale = &selection["rationale"];
    for id in ["safety_controller", "ethical_governor", "regulatory_auditor"] {
        assert!(rationale[id].as_str().is_some_and(|s| !s.is_empty()), "{id}");
    }
    let regulatory = rationale["regulatory_auditor"].as_str().unwrap().to_lowercase();
    assert!(regulatory.starts_with("no "), "{regulatory}");
    assert!(regulatory.contains("wind speed 22 mph"), "{regulatory}");

    let text = prompt_text(&engine, "selection", None);
    assert!(text.contains("Current wind speed: 22 mph; forecast trend: WORSENING"), "{text}");
    assert!(text.contains("Which of these advocates need to weigh in"), "{text}");
}

#[test]
fn wind_advocacy_prompt_asks_for_immediate_guidance() {
    let engine = wind_engine();
    let text = prompt_text(&engine, "advocacy", Some("safety_controller"));
    let instruction = text.split("### INSTRUCTIONS").nth(1).unwrap().lines().nth(1).unwrap().to_lowercase();
    assert!(instruction.contains("wind speed is 22 mph"), "{instruction}");
    assert!(instruction.contains("worsening"), "{instruction}");
    assert!(instruction.contains("immediate guidance"), "{instruction}");
    assert!(text.contains("MIL-STD-882E"));
    assert!(!text.contains("regulatory.authorizationExpires"), "excerpt leaked a path the persona does not watch");
}

#[test]
fn wind_briefing_has_adjustment_and_suspension_items() {
    let engine = wind_engine();
    let briefings = records(&engine, RecordKind::Briefing);
    assert_eq!(briefings.len(), 1);
    let items = briefings[0].payload["summaryItems"].as_array().unwrap();
    assert_eq!(items.len(), 2);
    let first = items[0]["text"].as_str().unwrap().to_lowercase();
    let second = items[1]["text"].as_str().unwrap().to_lowercase();
    assert!(first.contains("altitude") || first.contains("speed"), "{first}");
    assert!(second.contains("pause") || second.contains("suspend") || second.contains("abort"), "{second}");
}

fn run_oracle(name: &str) -> raven_core::harness::ScenarioRun {
    let config = SystemConfig::default();
    let scenario = load_scenario(&oracle(name), &config.registry).unwrap();
    execute(&scenario, &config, raven_core::audit::AuditLog::in_memory()).unwrap()
}

#[test]
fn scenario_one_yields_three_advisories_and_a_briefing() {
    let run = run_oracle("scenario1_low_battery.json");
    let personas: Vec<&str> = run.report.advisories.iter().map(|a| a.persona_id.as_str()).collect();
    assert_eq!(personas, ["safety_controller", "ethical_governor", "regulatory_auditor"]);
    assert_eq!(records(&run.engine, RecordKind::Briefing).len(), 1);
    let ethical = &run.report.advisories[1];
    assert!(ethical.recommendations.iter().any(|r| r.text.contains("avoid data capture") || r.text.contains("avoiding data capture")));
}

#[test]
fn scenario_two_regulatory_advice_cites_the_prison_distance() {
    let run = run_oracle("scenario2_prison_recording.json");
    let regulatory = run.report.advisories.iter().find(|a| a.persona_id == "regulatory_auditor").unwrap();
    let cited: Vec<&str> =
        regulatory.recommendations.iter().flat_map(|r| r.cited_paths.iter().map(|p| p.as_str())).collect();
    assert!(cited.contains(&"regulatory.restrictedAreas.distanceMeters"));
    assert!(cited.contains(&"regulatory.restrictedAreas.notificationRequired"));
    let text: String = regulatory.recommendations.iter().map(|r| r.text.clone()).collect();
    assert!(text.contains("80 m"), "{text}");
    assert!(text.contains("`regulatory.restrictedAreas.notificationRequired=true`"), "{text}");

    let ethical_prompt = prompt_text(&run.engine, "advocacy", Some("ethical_governor"));
    let standards = ethical_prompt.split("### STANDARDS").nth(1).unwrap();
    assert!(standards.contains("GDPR-Art5"), "{standards}");
}

#[test]
fn scenario_three_is_safety_and_regulatory_only() {
    let run = run_oracle("scenario3_tall_structure.json");
    let personas: Vec<&str> = run.report.advisories.iter().map(|a| a.persona_id.as_str()).collect();
    assert!(personas.contains(&"safety_controller") && personas.contains(&"regulatory_auditor"));
    assert!(!personas.contains(&"ethical_governor"));
    let safety: String = run
        .report
        .advisories
        .iter()
        .filter(|a| a.persona_id == "safety_controller")
        .flat_map(|a| a.recommendations.iter().map(|r| r.text.clone()))
        .collect();
    assert!(safety.contains("`environment.weather.windSpeedMph=12`"), "{safety}");
    assert!(safety.contains("`system.platform.telemetry.altitudeFt=350`"), "{safety}");
    let selection: Json = run.engine.last_selection().unwrap();
    let ethical = selection["rationale"]["ethical_governor"].as_str().unwrap();
    assert!(ethical.starts_with("No privacy"), "{ethical}");
}

#[test]
fn baseline_leaves_the_pipeline_idle() {
    let run = run_oracle("baseline.json");
    assert!(records(&run.engine, RecordKind::Prompt).is_empty());
    assert!(records(&run.engine, RecordKind::Event).is_empty());
    assert_eq!(run.engine.log_len(), 1);
    assert!(Utc::now() > run.engine.state().timestamp());
}
