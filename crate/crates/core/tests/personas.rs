use std::fs;
use std::path::{Path, PathBuf};

use raven_core::personas::{PersonaError, PersonaRegistry};

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/personas")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// A temp directory holding the shipped persona files and manifest.
fn shipped_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(assets()).unwrap() {
        let path = entry.unwrap().path();
        fs::copy(&path, dir.path().join(path.file_name().unwrap())).unwrap();
    }
    dir
}

#[test]
fn directory_of_shipped_files_matches_embedded_registry() {
    let dir = shipped_dir();
    assert_eq!(PersonaRegistry::load(dir.path()).unwrap(), PersonaRegistry::shipped());
}

#[test]
fn fourth_persona_extends_the_registry() {
    let dir = shipped_dir();
    fs::copy(fixture("legal_advisor.json"), dir.path().join("legal_advisor.json")).unwrap();
    let registry = PersonaRegistry::load(dir.path()).unwrap();
    assert_eq!(registry.ids(), ["safety_controller", "ethical_governor", "regulatory_auditor", "legal_advisor"]);
    assert_eq!(registry.resolve_name("Legal Advisor").unwrap().persona_id, "legal_advisor");
    assert_ne!(registry.fingerprint(), PersonaRegistry::shipped().fingerprint());
}

#[test]
fn unresolvable_watch_path_is_rejected() {
    let dir = shipped_dir();
    let text = fs::read_to_string(fixture("legal_advisor.json")).unwrap().replace(
        "\"regulatory.restrictedAreas.nearestType\"",
        "\"foo.bar\"",
    );
    fs::write(dir.path().join("legal_advisor.json"), text).unwrap();
    let err = PersonaRegistry::load(dir.path()).unwrap_err();
    assert_eq!(err, PersonaError::UnresolvedWatchPath { persona_id: "legal_advisor".into(), path: "foo.bar".into() });
}

#[test]
fn duplicate_ids_are_rejected() {
    let dir = shipped_dir();
    fs::copy(assets().join("safety_controller.json"), dir.path().join("safety_copy.json")).unwrap();
    let err = PersonaRegistry::load(dir.path()).unwrap_err();
    assert_eq!(err, PersonaError::DuplicatePersonaId("safety_controller".into()));
}

#[test]
fn malformed_and_empty_inputs() {
    let dir = shipped_dir();
    fs::write(dir.path().join("broken.json"), "{\"personaId\": \"broken\"").unwrap();
    assert!(matches!(
        PersonaRegistry::load(dir.path()),
        Err(PersonaError::MalformedPersonaFile { path, .. }) if path.ends_with("broken.json")
    ));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(PersonaRegistry::load(empty.path()), Err(PersonaError::EmptyDirectory(_))));
}

#[test]
fn shipped_persona_without_standards_is_rejected() {
    let dir = shipped_dir();
    let path = dir.path().join("safety_controller.json");
    let mut json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    json["standardsRefs"] = serde_json::json!([]);
    fs::write(&path, json.to_string()).unwrap();
    assert!(matches!(PersonaRegistry::load(dir.path()), Err(PersonaError::MalformedPersonaFile { .. })));
}
