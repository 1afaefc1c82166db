//! Scripted scenarios: parsing, execution, reports and random generation.

pub mod gen;
pub mod report;
pub mod runner;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value as Json;
use thiserror::Error;

use crate::middleware::StackConfig;
use crate::model::{Intent, PackageInfo};

pub use report::{emit_report, ReportFormat};
pub use runner::{run_scenario, ExpectResult, Outcome, RunError, RunFlags, RunReport, ScenarioRun, TraceEntry};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

impl ParseError {
    fn new(line: usize, reason: impl Into<String>) -> ParseError {
        ParseError { line, reason: reason.into() }
    }
}

fn shell_uid() -> u32 {
    crate::model::SHELL_UID
}

fn yes() -> bool {
    true
}

/// One scripted step. Apps are named by package; the lowest live pid of
/// that package acts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventSpec {
    Install {
        package: PackageInfo,
    },
    Uninstall {
        package: String,
    },
    Spawn {
        package: String,
        #[serde(default)]
        receivers: Vec<String>,
    },
    Exit {
        app: String,
    },
    Broadcast {
        app: String,
        intent: Intent,
    },
    StartActivity {
        app: String,
        intent: Intent,
    },
    BindService {
        app: String,
        intent: Intent,
    },
    CheckPermission {
        app: String,
        permission: String,
        /// Package owning the component.
        owner: String,
        #[serde(default = "yes")]
        exported: bool,
    },
    GetLocation {
        app: String,
    },
    GetProviders {
        app: String,
    },
    RequestLocationUpdates {
        app: String,
        provider: String,
    },
    ReportLocation {
        latitude: f64,
        longitude: f64,
        #[serde(default)]
        timestamp: u64,
    },
    QueryContent {
        app: String,
        store: String,
        #[serde(default)]
        selection: serde_json::Map<String, Json>,
    },
    GetDeviceId {
        app: String,
    },
    ClipGet {
        app: String,
    },
    ClipSet {
        app: String,
        text: String,
    },
    GetInstalled {
        app: String,
    },
    CallModule {
        bundle: serde_json::Map<String, Json>,
        #[serde(default = "shell_uid")]
        uid: u32,
    },
    Invoke {
        app: String,
        method: String,
        #[serde(default)]
        args: Vec<Json>,
    },
    FileAccess {
        app: String,
        path: String,
        op: String,
    },
    Expect(Expectation),
}

/// Matcher over the outcome of the nearest preceding non-expect event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Json>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason_contains: Option<String>,
}

impl EventSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            EventSpec::Install { .. } => "install",
            EventSpec::Uninstall { .. } => "uninstall",
            EventSpec::Spawn { .. } => "spawn",
            EventSpec::Exit { .. } => "exit",
            EventSpec::Broadcast { .. } => "broadcast",
            EventSpec::StartActivity { .. } => "start_activity",
            EventSpec::BindService { .. } => "bind_service",
            EventSpec::CheckPermission { .. } => "check_permission",
            EventSpec::GetLocation { .. } => "get_location",
            EventSpec::GetProviders { .. } => "get_providers",
            EventSpec::RequestLocationUpdates { .. } => "request_location_updates",
            EventSpec::ReportLocation { .. } => "report_location",
            EventSpec::QueryContent { .. } => "query_content",
            EventSpec::GetDeviceId { .. } => "get_device_id",
            EventSpec::ClipGet { .. } => "clip_get",
            EventSpec::ClipSet { .. } => "clip_set",
            EventSpec::GetInstalled { .. } => "get_installed",
            EventSpec::CallModule { .. } => "call_module",
            EventSpec::Invoke { .. } => "invoke",
            EventSpec::FileAccess { .. } => "file_access",
            EventSpec::Expect(_) => "expect",
        }
    }

    /// The app (package) this event acts as, if any.
    pub fn actor(&self) -> Option<&str> {
        match self {
            EventSpec::Exit { app }
            | EventSpec::Broadcast { app, .. }
            | EventSpec::StartActivity { app, .. }
            | EventSpec::BindService { app, .. }
            | EventSpec::CheckPermission { app, .. }
            | EventSpec::GetLocation { app }
            | EventSpec::GetProviders { app }
            | EventSpec::RequestLocationUpdates { app, .. }
            | EventSpec::QueryContent { app, .. }
            | EventSpec::GetDeviceId { app }
            | EventSpec::ClipGet { app }
            | EventSpec::ClipSet { app, .. }
            | EventSpec::GetInstalled { app }
            | EventSpec::Invoke { app, .. }
            | EventSpec::FileAccess { app, .. } => Some(app),
            _ => None,
        }
    }
}

pub const KNOWN_KINDS: [&str; 21] = [
    "install",
    "uninstall",
    "spawn",
    "exit",
    "broadcast",
    "start_activity",
    "bind_service",
    "check_permission",
    "get_location",
    "get_providers",
    "request_location_updates",
    "report_location",
    "query_content",
    "get_device_id",
    "clip_get",
    "clip_set",
    "get_installed",
    "call_module",
    "invoke",
    "file_access",
    "expect",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioEvent {
    /// 1-based source line, 0 for generated events.
    #[serde(skip)]
    pub line: usize,
    #[serde(flatten)]
    pub spec: EventSpec,
}

impl ScenarioEvent {
    pub fn new(spec: EventSpec) -> ScenarioEvent {
        ScenarioEvent { line: 0, spec }
    }
}

/// Built with [`Scenario::parse`], which keeps source lines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub events: Vec<ScenarioEvent>,
}

#[derive(Deserialize)]
struct RawScenario<'a> {
    name: String,
    #[serde(default)]
    seed: u64,
    #[serde(borrow)]
    events: Vec<&'a RawValue>,
}

fn line_of(text: &str, fragment: &str) -> usize {
    let offset = (fragment.as_ptr() as usize).saturating_sub(text.as_ptr() as usize).min(text.len());
    text[..offset].bytes().filter(|b| *b == b'\n').count() + 1
}

impl Scenario {
    pub fn new(name: impl Into<String>, seed: u64, events: Vec<EventSpec>) -> Scenario {
        Scenario { name: name.into(), seed, events: events.into_iter().map(ScenarioEvent::new).collect() }
    }

    /// Parses and validates a scenario; errors carry the source line.
    pub fn parse(text: &str) -> Result<Scenario, ParseError> {
        let raw: RawScenario<'_> = serde_json::from_str(text).map_err(|e| ParseError::new(e.line(), e.to_string()))?;
        let mut events = Vec::with_capacity(raw.events.len());
        for fragment in raw.events {
            let line = line_of(text, fragment.get());
            let spec: EventSpec = serde_json::from_str(fragment.get()).map_err(|e| {
                let kind = serde_json::from_str::<Json>(fragment.get())
                    .ok()
                    .and_then(|v| v.get("kind").and_then(Json::as_str).map(str::to_owned));
                match kind {
                    Some(k) if !KNOWN_KINDS.contains(&k.as_str()) => {
                        ParseError::new(line, format!("unknown event kind `{k}`"))
                    }
                    None => ParseError::new(line, "event without a `kind`"),
                    Some(k) => ParseError::new(line + e.line().saturating_sub(1), format!("{k}: {e}")),
                }
            })?;
            events.push(ScenarioEvent { line, spec });
        }
        let scenario = Scenario { name: raw.name, seed: raw.seed, events };
        scenario.validate_structure()?;
        Ok(scenario)
    }

    pub fn from_file(path: &Path) -> Result<Scenario, ParseError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ParseError::new(0, format!("cannot read {}: {e}", path.display())))?;
        Scenario::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate_structure(&self) -> Result<(), ParseError> {
        let mut seen_action = false;
        for e in &self.events {
            match &e.spec {
                EventSpec::Expect(_) if !seen_action => {
                    return Err(ParseError::new(e.line, "expect without a preceding event"));
                }
                EventSpec::Expect(x) if !["ok", "denied", "rejected", "error"].contains(&x.status.as_str()) => {
                    return Err(ParseError::new(e.line, format!("unknown expected status `{}`", x.status)));
                }
                EventSpec::Expect(_) => {}
                _ => seen_action = true,
            }
        }
        Ok(())
    }

    /// Checks that events name only packages installed earlier (or
    /// preinstalled) and apps spawned earlier.
    pub fn validate_references(&self, config: &StackConfig) -> Result<(), ParseError> {
        let mut installed: BTreeSet<String> = config.preinstalled_packages.iter().map(|p| p.name.clone()).collect();
        let mut spawned: BTreeSet<String> = BTreeSet::new();
        for e in &self.events {
            let missing = |what: &str, name: &str| {
                ParseError::new(e.line, format!("{} refers to unknown {what} `{name}`", e.spec.kind()))
            };
            match &e.spec {
                EventSpec::Install { package } => {
                    installed.insert(package.name.clone());
                }
                EventSpec::Uninstall { package } => {
                    if !installed.remove(package) {
                        return Err(missing("package", package));
                    }
                    spawned.remove(package);
                }
                EventSpec::Spawn { package, .. } => {
                    if !installed.contains(package) {
                        return Err(missing("package", package));
                    }
                    spawned.insert(package.clone());
                }
                EventSpec::CheckPermission { owner, .. } if !installed.contains(owner) => {
                    return Err(missing("package", owner));
                }
                _ => {}
            }
            if let Some(app) = e.spec.actor() {
                if !spawned.contains(app) {
                    return Err(missing("app", app));
                }
            }
            if let EventSpec::Exit { app } = &e.spec {
                spawned.remove(app);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "name": "minimal",
  "events": [
    {"kind": "install", "package": {"name": "a"}},
    {"kind": "spawn", "package": "a"},
    {"kind": "get_location", "app": "a"}
  ]
}"#;

    #[test]
    fn minimal_has_three_events() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.events.len(), 3);
        assert_eq!(s.events[2].line, 6);
        s.validate_references(&StackConfig::default()).unwrap();
    }

    #[test]
    fn unknown_kind_reports_line() {
        let text = MINIMAL.replace("\"get_location\"", "\"teleport\"");
        let err = Scenario::parse(&text).unwrap_err();
        assert_eq!(err.line, 6);
        assert!(err.reason.contains("teleport"));
    }

    #[test]
    fn leading_expect_is_rejected() {
        let text = r#"{"name":"x","events":[
            {"kind":"expect","status":"ok"}]}"#;
        assert_eq!(Scenario::parse(text).unwrap_err().line, 2);
    }

    #[test]
    fn references_must_exist() {
        let text = r#"{"name":"x","events":[{"kind":"spawn","package":"ghost"}]}"#;
        let s = Scenario::parse(text).unwrap();
        assert!(s.validate_references(&StackConfig::default()).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let s = Scenario::parse(MINIMAL).unwrap();
        let again = Scenario::parse(&s.to_json()).unwrap();
        assert_eq!(
            s.events.iter().map(|e| &e.spec).collect::<Vec<_>>(),
            again.events.iter().map(|e| &e.spec).collect::<Vec<_>>()
        );
    }
}
