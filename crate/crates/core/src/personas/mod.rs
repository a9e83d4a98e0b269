//! Static advocate personas and the registry that holds them.
//!
//! A persona is one JSON document (see `assets/personas`). The registry is
//! immutable once loaded; callers that want to hot-reload build a new one and
//! swap it in whole.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::worldstate::FieldPath;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PersonaError {
    #[error("malformed persona file {path}: {reason}")]
    MalformedPersonaFile { path: PathBuf, reason: String },
    #[error("duplicate persona id `{0}`")]
    DuplicatePersonaId(String),
    #[error("persona `{persona_id}` watches unknown path `{path}`")]
    UnresolvedWatchPath { persona_id: String, path: String },
    #[error("persona `{persona_id}` cites `{standard_id}`, which is not in the manifest")]
    UnknownStandard { persona_id: String, standard_id: String },
    #[error("unknown persona `{0}`")]
    UnknownPersona(String),
    #[error("no persona files in {0}")]
    EmptyDirectory(PathBuf),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StandardRef {
    pub standard_id: String,
    pub clause: String,
    pub snippet: String,
    pub topic_tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionPriority {
    pub tag: String,
    pub statement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScopeTaxonomy {
    pub domain_tags: Vec<String>,
    pub action_verbs: Vec<String>,
    /// Paths this persona may cite, in excerpt priority order.
    pub watch_paths: Vec<FieldPath>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AdvocatePersona {
    pub persona_id: String,
    pub display_name: String,
    pub role_statement: String,
    pub goals: Vec<String>,
    pub pain_points: Vec<String>,
    pub decision_priorities: Vec<DecisionPriority>,
    pub standards_refs: Vec<StandardRef>,
    pub scope_taxonomy: ScopeTaxonomy,
    pub prompt_preamble: String,
}

impl AdvocatePersona {
    pub fn domain_tags(&self) -> &[String] {
        &self.scope_taxonomy.domain_tags
    }

    pub fn watch_paths(&self) -> &[FieldPath] {
        &self.scope_taxonomy.watch_paths
    }

    pub fn watches(&self, path: FieldPath) -> bool {
        self.scope_taxonomy.watch_paths.contains(&path)
    }

    pub fn covers(&self, tag: &str) -> bool {
        self.scope_taxonomy.domain_tags.iter().any(|t| t == tag)
    }

    /// Tags from `concerns` that fall in this persona's scope.
    pub fn matching_tags<'a>(&self, concerns: impl IntoIterator<Item = &'a String>) -> Vec<&'a str> {
        concerns.into_iter().filter(|c| self.covers(c)).map(String::as_str).collect()
    }

    /// Standards whose topic tags intersect `tags`, highest decision
    /// priority first; ties keep file order.
    pub fn standards_for(&self, tags: &[&str]) -> Vec<&StandardRef> {
        let rank = |s: &StandardRef| {
            self.decision_priorities
                .iter()
                .position(|p| s.topic_tags.contains(&p.tag) && tags.contains(&p.tag.as_str()))
                .or_else(|| self.decision_priorities.iter().position(|p| s.topic_tags.contains(&p.tag)))
                .unwrap_or(usize::MAX)
        };
        let mut hits: Vec<(usize, usize, &StandardRef)> = self
            .standards_refs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.topic_tags.iter().any(|t| tags.contains(&t.as_str())))
            .map(|(i, s)| (rank(s), i, s))
            .collect();
        hits.sort_by_key(|&(rank, i, _)| (rank, i));
        hits.into_iter().map(|(_, _, s)| s).collect()
    }

    fn validate(&self, path: &Path, manifest: &Manifest) -> Result<(), PersonaError> {
        let malformed = |reason: &str| PersonaError::MalformedPersonaFile {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if !is_token(&self.persona_id) {
            return Err(malformed("personaId must be a lowercase token"));
        }
        if self.decision_priorities.is_empty() {
            return Err(malformed("decisionPriorities must not be empty"));
        }
        if self.scope_taxonomy.domain_tags.is_empty() {
            return Err(malformed("scopeTaxonomy.domainTags must not be empty"));
        }
        if self.scope_taxonomy.watch_paths.is_empty() {
            return Err(malformed("scopeTaxonomy.watchPaths must not be empty"));
        }
        if manifest.shipped.contains(&self.persona_id) && self.standards_refs.is_empty() {
            return Err(malformed("shipped personas must cite at least one standard"));
        }
        for s in &self.standards_refs {
            if s.snippet.trim().is_empty() {
                return Err(malformed(&format!("{} has an empty snippet", s.standard_id)));
            }
            if !manifest.standards.contains(&s.standard_id) {
                return Err(PersonaError::UnknownStandard {
                    persona_id: self.persona_id.clone(),
                    standard_id: s.standard_id.clone(),
                });
            }
        }
        Ok(())
    }
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// Registry manifest: shipped order, reserved ids, and the standards corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub shipped: Vec<String>,
    #[serde(default)]
    pub reserved: Vec<String>,
    pub standards: Vec<String>,
}

const MANIFEST_JSON: &str = include_str!("../../assets/personas/manifest.json");
const SHIPPED_FILES: &[(&str, &str)] = &[
    ("safety_controller.json", include_str!("../../assets/personas/safety_controller.json")),
    ("ethical_governor.json", include_str!("../../assets/personas/ethical_governor.json")),
    ("regulatory_auditor.json", include_str!("../../assets/personas/regulatory_auditor.json")),
];

impl Manifest {
    pub fn shipped_default() -> Manifest {
        serde_json::from_str(MANIFEST_JSON).expect("shipped manifest parses")
    }
}

/// Raw persona document; watch paths are resolved during validation.
#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct PersonaFile {
    persona_id: String,
    display_name: String,
    role_statement: String,
    goals: Vec<String>,
    pain_points: Vec<String>,
    decision_priorities: Vec<DecisionPriority>,
    standards_refs: Vec<StandardRef>,
    scope_taxonomy: ScopeFile,
    prompt_preamble: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ScopeFile {
    domain_tags: Vec<String>,
    action_verbs: Vec<String>,
    watch_paths: Vec<String>,
}

/// Parses and validates one persona document.
pub fn parse_persona(path: &Path, text: &str, manifest: &Manifest) -> Result<AdvocatePersona, PersonaError> {
    let raw: PersonaFile = serde_json::from_str(text).map_err(|e| PersonaError::MalformedPersonaFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let watch_paths = raw
        .scope_taxonomy
        .watch_paths
        .iter()
        .map(|p| {
            FieldPath::resolve(p).ok_or_else(|| PersonaError::UnresolvedWatchPath {
                persona_id: raw.persona_id.clone(),
                path: p.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let persona = AdvocatePersona {
        persona_id: raw.persona_id,
        display_name: raw.display_name,
        role_statement: raw.role_statement,
        goals: raw.goals,
        pain_points: raw.pain_points,
        decision_priorities: raw.decision_priorities,
        standards_refs: raw.standards_refs,
        scope_taxonomy: ScopeTaxonomy {
            domain_tags: raw.scope_taxonomy.domain_tags,
            action_verbs: raw.scope_taxonomy.action_verbs,
            watch_paths,
        },
        prompt_preamble: raw.prompt_preamble,
    };
    persona.validate(path, manifest)?;
    Ok(persona)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonaRegistry {
    personas: Vec<AdvocatePersona>,
    manifest: Manifest,
    fingerprint: String,
}

impl PersonaRegistry {
    /// The three shipped personas, embedded at build time.
    pub fn shipped() -> PersonaRegistry {
        let manifest = Manifest::shipped_default();
        let personas = SHIPPED_FILES
            .iter()
            .map(|(name, text)| parse_persona(Path::new(name), text, &manifest))
            .collect::<Result<Vec<_>, _>>()
            .expect("shipped personas are valid");
        PersonaRegistry::from_personas(personas, manifest).expect("shipped registry is valid")
    }

    /// Loads every `*.json` persona file in `dir`. A `manifest.json` in the
    /// directory replaces the shipped manifest.
    pub fn load(dir: &Path) -> Result<PersonaRegistry, PersonaError> {
        let io = |e: std::io::Error| PersonaError::Io { path: dir.to_path_buf(), reason: e.to_string() };
        let manifest_path = dir.join("manifest.json");
        let manifest = if manifest_path.is_file() {
            let text = fs::read_to_string(&manifest_path).map_err(io)?;
            serde_json::from_str(&text).map_err(|e| PersonaError::MalformedPersonaFile {
                path: manifest_path.clone(),
                reason: e.to_string(),
            })?
        } else {
            Manifest::shipped_default()
        };
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json") && p.file_name() != Some("manifest.json".as_ref()))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(PersonaError::EmptyDirectory(dir.to_path_buf()));
        }
        let personas = files
            .iter()
            .map(|path| {
                let text = fs::read_to_string(path)
                    .map_err(|e| PersonaError::Io { path: path.clone(), reason: e.to_string() })?;
                parse_persona(path, &text, &manifest)
            })
            .collect::<Result<Vec<_>, _>>()?;
        PersonaRegistry::from_personas(personas, manifest)
    }

    /// Orders shipped personas by manifest order, then extensions by id.
    pub fn from_personas(mut personas: Vec<AdvocatePersona>, manifest: Manifest) -> Result<PersonaRegistry, PersonaError> {
        let mut seen = BTreeSet::new();
        for p in &personas {
            if !seen.insert(p.persona_id.clone()) {
                return Err(PersonaError::DuplicatePersonaId(p.persona_id.clone()));
            }
        }
        let order = |p: &AdvocatePersona| {
            manifest.shipped.iter().position(|id| *id == p.persona_id).unwrap_or(usize::MAX)
        };
        personas.sort_by(|a, b| order(a).cmp(&order(b)).then_with(|| a.persona_id.cmp(&b.persona_id)));
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&manifest).expect("manifest serializes"));
        for p in &personas {
            hasher.update(serde_json::to_vec(p).expect("persona serializes"));
        }
        let fingerprint = hex::encode(hasher.finalize());
        Ok(PersonaRegistry { personas, manifest, fingerprint })
    }

    pub fn persona_for(&self, persona_id: &str) -> Result<&AdvocatePersona, PersonaError> {
        self.personas
            .iter()
            .find(|p| p.persona_id == persona_id)
            .ok_or_else(|| PersonaError::UnknownPersona(persona_id.to_string()))
    }

    /// Accepts either the persona id or its display name.
    pub fn resolve_name(&self, name: &str) -> Option<&AdvocatePersona> {
        let name = name.trim();
        self.personas.iter().find(|p| p.persona_id == name || p.display_name == name)
    }

    pub fn standards_for(&self, persona_id: &str, tags: &[&str]) -> Result<Vec<&StandardRef>, PersonaError> {
        Ok(self.persona_for(persona_id)?.standards_for(tags))
    }

    /// Personas in registry order.
    pub fn iter(&self) -> impl Iterator<Item = &AdvocatePersona> {
        self.personas.iter()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.personas.iter().map(|p| p.persona_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }

    pub fn position(&self, persona_id: &str) -> Option<usize> {
        self.personas.iter().position(|p| p.persona_id == persona_id)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn shipped_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.shipped.iter().map(String::as_str).filter(|id| self.position(id).is_some())
    }

    /// SHA-256 over the manifest and the personas in registry order.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Map of persona id to display name, used by prompts and reports.
    pub fn display_names(&self) -> BTreeMap<&str, &str> {
        self.personas.iter().map(|p| (p.persona_id.as_str(), p.display_name.as_str())).collect()
    }
}
