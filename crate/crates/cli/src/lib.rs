//! `raven`: scenario bench runner, single-scenario tracer, log verifier, and
//! gateway launcher.
//!
//! Exit codes are `0` when every expectation holds, `1` when a scenario or a
//! log fails its check, and `2` for usage, configuration, or parse errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use raven_core::audit::{read_anchor, read_ndjson, verify_records, AuditError, AuditLog, RecordKind};
use raven_core::eventmon::{EventMonError, RuleRegistry, RuleTableFile};
use raven_core::harness::{execute, load_scenario, run_suite, HarnessError, SuiteOptions, SystemConfig};
use raven_core::personas::{PersonaError, PersonaRegistry};
use raven_core::pipeline::{
    BackendError, BackendKind, GenerationBackend, HttpBackend, LiveConfig, MockBackend, RuleBackend, TemplateError,
    TemplateTable,
};
use raven_gateway::GatewayError;
use thiserror::Error;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Persona(#[from] PersonaError),
    #[error(transparent)]
    Rules(#[from] EventMonError),
    #[error("{path}: {source}")]
    Templates { path: PathBuf, source: TemplateError },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("writing output: {0}")]
    Output(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "raven", version, about = "Event-triggered advocate personas for sUAS operators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every scenario in a directory and score it against expectations.
    Bench {
        dir: PathBuf,
        #[command(flatten)]
        system: SystemArgs,
        /// Write the JSON report here.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
        /// Print the persona-by-scenario activation matrix.
        #[arg(long)]
        matrix: bool,
        /// Keep each scenario's audit log as `<DIR>/<scenarioId>.ndjson`.
        #[arg(long, value_name = "DIR")]
        log_dir: Option<PathBuf>,
    },
    /// Run one scenario.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        system: SystemArgs,
        /// Print every prompt and backend reply.
        #[arg(long)]
        trace: bool,
    },
    /// Start the HTTP gateway.
    Serve {
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
    },
    /// Check the hash chain of an NDJSON audit log and its head anchor.
    VerifyLog { path: PathBuf },
}

#[derive(Debug, Clone, Args)]
pub struct SystemArgs {
    #[arg(long, default_value = "rule")]
    pub backend: BackendKind,
    /// Trigger rule table (TOML or JSON).
    #[arg(long, value_name = "PATH")]
    pub rules: Option<PathBuf>,
    /// Directory of persona files with a manifest.
    #[arg(long, value_name = "DIR")]
    pub personas: Option<PathBuf>,
    /// Advocacy template table (TOML) for the rule and mock backends.
    #[arg(long, value_name = "PATH")]
    pub templates: Option<PathBuf>,
}

impl SystemArgs {
    pub fn build(&self) -> Result<SystemConfig, CliError> {
        let templates = match &self.templates {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?;
                TemplateTable::from_toml(&text).map_err(|source| CliError::Templates { path: path.clone(), source })?
            }
            None => TemplateTable::shipped(),
        };
        let backend: Arc<dyn GenerationBackend> = match self.backend {
            BackendKind::Rule => Arc::new(RuleBackend::with_templates(templates.clone())),
            BackendKind::Mock => Arc::new(MockBackend::with_templates(templates.clone())),
            BackendKind::Live => Arc::new(HttpBackend::new(LiveConfig::default().from_env())?),
        };
        let mut config = SystemConfig::default()
            .with_backend(backend)
            .with_fallback(RuleBackend::with_templates(templates));
        if let Some(dir) = &self.personas {
            config = config.with_registry(Arc::new(PersonaRegistry::load(dir)?));
        }
        if let Some(path) = &self.rules {
            config = config.with_rules(RuleRegistry::from_table(&RuleTableFile::load(path)?)?);
        }
        Ok(config)
    }
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `out` and diagnostics to stderr. Returns the exit code.
pub fn main_with(args: impl IntoIterator<Item = OsString>, out: &mut impl Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
        }
    };
    match run(cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("raven: {e}");
            EXIT_USAGE
        }
    }
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<i32, CliError> {
    match cli.command {
        Command::Bench { dir, system, report, matrix, log_dir } => bench(&dir, &system, report.as_deref(), matrix, log_dir, out),
        Command::Run { scenario, system, trace } => run_one(&scenario, &system, trace, out),
        Command::Serve { config } => serve(config.as_deref()),
        Command::VerifyLog { path } => verify_log(&path, out),
    }
}

fn bench(
    dir: &Path,
    system: &SystemArgs,
    report_path: Option<&Path>,
    matrix: bool,
    log_dir: Option<PathBuf>,
    out: &mut impl Write,
) -> Result<i32, CliError> {
    let config = system.build()?;
    if let Some(dir) = &log_dir {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
    }
    let report = run_suite(dir, &config, &SuiteOptions { log_dir })?;
    if let Some(path) = report_path {
        std::fs::write(path, report.normalized().to_json() + "\n")
            .map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    }
    if matrix {
        write!(out, "{}", report.matrix(&config.registry))?;
    } else if report_path.is_none() {
        writeln!(out, "{}", report.normalized().to_json())?;
    } else {
        let passed = report.scenarios.iter().filter(|s| s.passed).count();
        writeln!(out, "{passed}/{} scenarios passed", report.scenarios.len())?;
    }
    Ok(report.exit_code())
}

fn run_one(path: &Path, system: &SystemArgs, trace: bool, out: &mut impl Write) -> Result<i32, CliError> {
    let config = system.build()?;
    let scenario = load_scenario(path, &config.registry)?;
    let run = execute(&scenario, &config, AuditLog::in_memory())?;
    let report = &run.report;
    writeln!(out, "{} ({})", report.scenario_id, report.name)?;
    for step in &report.steps {
        write!(out, "  {:>8}  snapshot {:<3}", step.offset, step.snapshot_id)?;
        if !step.events.is_empty() {
            write!(out, "  events {}", step.events.join(","))?;
        }
        if !step.selected.is_empty() {
            write!(out, "  selected {}", step.selected.join(","))?;
        }
        if let Some(note) = &step.note {
            write!(out, "  # {note}")?;
        }
        writeln!(out)?;
    }
    if trace {
        let records = run.engine.with_log(|log| log.records().to_vec());
        for record in records {
            let p = &record.payload;
            let head = |what: &str| {
                format!(
                    "--- {what} #{} {} {} {} attempt {} ({})",
                    record.sequence,
                    p["batchId"].as_str().unwrap_or("?"),
                    p["kind"].as_str().unwrap_or("?"),
                    p["personaId"].as_str().unwrap_or("-"),
                    p["attempt"],
                    p["backend"].as_str().unwrap_or("?"),
                )
            };
            match record.record_kind {
                RecordKind::Prompt => {
                    writeln!(out, "{}", head("prompt"))?;
                    writeln!(out, "{}", p["text"].as_str().unwrap_or_default())?;
                }
                RecordKind::BackendReply => {
                    writeln!(out, "{} -> {}", head("reply"), p["outcome"].as_str().unwrap_or("error"))?;
                    match p["text"].as_str() {
                        Some(text) => writeln!(out, "{text}")?,
                        None => writeln!(out, "error: {}", p["error"])?,
                    }
                }
                _ => {}
            }
        }
    }
    writeln!(
        out,
        "observed {{{}}} expected {{{}}}: {}",
        report.observed_activation.iter().cloned().collect::<Vec<_>>().join(", "),
        report.expected_activation.iter().cloned().collect::<Vec<_>>().join(", "),
        if report.passed { "pass" } else { "FAIL" }
    )?;
    Ok(if report.passed { EXIT_PASS } else { EXIT_FAIL })
}

fn serve(config: Option<&Path>) -> Result<i32, CliError> {
    let config = raven_gateway::load_config(config)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(raven_gateway::serve(config))?;
    Ok(EXIT_PASS)
}

fn verify_log(path: &Path, out: &mut impl Write) -> Result<i32, CliError> {
    let records = read_ndjson(path)?;
    let anchor = read_anchor(path)?;
    match verify_records(&records, anchor.as_ref()) {
        Ok(()) => {
            let head = records.last().map(|r| r.hash.as_str()).unwrap_or("(empty)");
            writeln!(out, "ok: {} records, head {head}", records.len())?;
            Ok(EXIT_PASS)
        }
        Err(e) => {
            writeln!(out, "FAILED: {e}")?;
            Ok(EXIT_FAIL)
        }
    }
}
