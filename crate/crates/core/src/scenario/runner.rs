//! Executes scenarios against a freshly booted stack.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::bundle::{Bundle, Value};
use crate::framework::hooks::*;
use crate::framework::{DecisionRecord, ModuleCatalog, ModuleManifest};
use crate::middleware::{BootOptions, ServiceError, Stack, StackConfig};
use crate::model::{Credentials, LocationFix};

use super::{EventSpec, Expectation, ParseError, Scenario};

/// Result of one event, as matched by `expect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub status: String,
    #[serde(default)]
    pub value: Json,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Outcome {
    pub fn ok(value: Json) -> Outcome {
        Outcome { status: "ok".into(), value, reason: None }
    }

    pub fn error(reason: impl Into<String>) -> Outcome {
        Outcome { status: "error".into(), value: Json::Null, reason: Some(reason.into()) }
    }

    pub fn from_result<T>(r: Result<T, ServiceError>, render: impl FnOnce(T) -> Json) -> Outcome {
        match r {
            Ok(v) => Outcome::ok(render(v)),
            Err(e) => {
                let reason = match &e {
                    ServiceError::Denied(r) | ServiceError::Rejected(r) => r.clone(),
                    other => other.to_string(),
                };
                Outcome { status: e.status().into(), value: Json::Null, reason: Some(reason) }
            }
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

impl Expectation {
    /// `None` when the outcome matches, else what differed.
    pub fn mismatch(&self, outcome: &Outcome) -> Option<String> {
        if self.status != outcome.status {
            return Some(format!(
                "expected status {}, got {} ({})",
                self.status,
                outcome.status,
                outcome.reason.as_deref().unwrap_or("-")
            ));
        }
        if let Some(v) = &self.value {
            if *v != outcome.value {
                return Some(format!("expected value {v}, got {}", outcome.value));
            }
        }
        if let Some(needle) = &self.reason_contains {
            if !outcome.reason.as_deref().unwrap_or_default().contains(needle.as_str()) {
                return Some(format!("reason {:?} lacks {needle:?}", outcome.reason));
            }
        }
        None
    }
}

fn fix_json(f: &LocationFix) -> Json {
    json!({ "latitude": f.latitude, "longitude": f.longitude, "timestamp": f.timestamp })
}

/// Hook an event's service path is labeled with for benchmarking.
pub fn primary_hook(spec: &EventSpec) -> Option<&'static str> {
    Some(match spec {
        EventSpec::Install { .. } => SCAN_PACKAGE,
        EventSpec::Spawn { .. } => INSTRUMENT_APP,
        EventSpec::Broadcast { .. } => DELIVER_TO_RECEIVER,
        EventSpec::StartActivity { .. } => START_ACTIVITY,
        EventSpec::BindService { .. } => BIND_SERVICE,
        EventSpec::CheckPermission { .. } => CHECK_COMPONENT_PERMISSION,
        EventSpec::GetLocation { .. } => GET_LAST_LOCATION,
        EventSpec::GetProviders { .. } => GET_ALL_PROVIDERS,
        EventSpec::RequestLocationUpdates { .. } => REQUEST_LOCATION_UPDATES,
        EventSpec::ReportLocation { .. } => REPORT_LOCATION,
        EventSpec::QueryContent { .. } => PRE_QUERY,
        EventSpec::GetDeviceId { .. } => GET_DEVICE_ID,
        EventSpec::ClipGet { .. } => GET_PRIMARY_CLIP,
        EventSpec::ClipSet { .. } => SET_PRIMARY_CLIP,
        EventSpec::GetInstalled { .. } => GET_INSTALLED_PACKAGES,
        _ => return None,
    })
}

fn bundle_of(map: &serde_json::Map<String, Json>) -> Result<Bundle, String> {
    Bundle::from_plain_json(&Json::Object(map.clone())).map_err(|e| e.to_string())
}

/// Runs one non-expect event.
pub fn execute(stack: &Stack, spec: &EventSpec) -> Outcome {
    let pid = |app: &str| {
        stack.app_for_package(app).map(|a| a.pid).ok_or_else(|| Outcome::error(format!("no running app `{app}`")))
    };
    macro_rules! app {
        ($name:expr) => {
            match pid($name) {
                Ok(p) => p,
                Err(o) => return o,
            }
        };
    }
    match spec {
        EventSpec::Install { package } => Outcome::from_result(
            stack.install_package(package.clone()),
            |o| json!({ "uid": o.uid, "replaced": o.replaced }),
        ),
        EventSpec::Uninstall { package } => Outcome::from_result(stack.uninstall_package(package), |_| Json::Null),
        EventSpec::Spawn { package, receivers } => Outcome::from_result(
            stack.launch_app_process(package, receivers),
            |a| json!({ "pid": a.pid, "uid": a.uid }),
        ),
        EventSpec::Exit { app } => Outcome::from_result(stack.exit_app(app!(app)), |_| Json::Null),
        EventSpec::Broadcast { app, intent } => Outcome::from_result(
            stack.send_broadcast(app!(app), intent),
            |r| json!({ "delivered": r.delivered, "suppressed": r.suppressed.iter().map(|(c, _)| c).collect::<Vec<_>>() }),
        ),
        EventSpec::StartActivity { app, intent } => {
            Outcome::from_result(stack.start_activity(app!(app), intent), Json::from)
        }
        EventSpec::BindService { app, intent } => {
            Outcome::from_result(stack.bind_service(app!(app), intent), Json::from)
        }
        EventSpec::CheckPermission { app, permission, owner, exported } => {
            let caller = match stack.app(app!(app)) {
                Some(a) => a.credentials(),
                None => return Outcome::error(format!("no running app `{app}`")),
            };
            let Some(owner) = stack.package(owner) else {
                return Outcome::error(format!("unknown package `{owner}`"));
            };
            Outcome::from_result(
                stack.check_component_permission(permission, &caller, owner.uid, *exported),
                Json::from,
            )
        }
        EventSpec::GetLocation { app } => Outcome::from_result(stack.get_last_location(app!(app)), |f| fix_json(&f)),
        EventSpec::GetProviders { app } => Outcome::from_result(stack.get_all_providers(app!(app)), Json::from),
        EventSpec::RequestLocationUpdates { app, provider } => {
            Outcome::from_result(stack.request_location_updates(app!(app), provider), |_| Json::Null)
        }
        EventSpec::ReportLocation { latitude, longitude, timestamp } => {
            let fix = LocationFix::new(*latitude, *longitude, *timestamp);
            Outcome::from_result(stack.report_location(fix), |f| f.as_ref().map_or(Json::Null, fix_json))
        }
        EventSpec::QueryContent { app, store, selection } => {
            let pid = app!(app);
            let selection = match bundle_of(selection) {
                Ok(b) => b,
                Err(e) => return Outcome::error(e),
            };
            Outcome::from_result(stack.query_content(pid, store, &selection), |rs| rs.to_value().to_plain_json())
        }
        EventSpec::GetDeviceId { app } => Outcome::from_result(stack.get_device_id(app!(app)), Json::from),
        EventSpec::ClipGet { app } => Outcome::from_result(stack.get_primary_clip(app!(app)), Json::from),
        EventSpec::ClipSet { app, text } => {
            Outcome::from_result(stack.set_primary_clip(app!(app), text), |_| Json::Null)
        }
        EventSpec::GetInstalled { app } => Outcome::from_result(stack.get_installed_packages(app!(app)), |pkgs| {
            json!(pkgs.iter().map(|p| p.name.clone()).collect::<Vec<_>>())
        }),
        EventSpec::CallModule { bundle, uid } => {
            let request = match bundle_of(bundle) {
                Ok(b) => b,
                Err(e) => return Outcome::error(e),
            };
            Outcome::from_result(stack.call_module(&Credentials::new(*uid, 0), &request), |b| b.to_plain_json())
        }
        EventSpec::Invoke { app, method, args } => {
            let pid = app!(app);
            let args: Result<Vec<Value>, _> = args.iter().map(Value::from_plain_json).collect();
            match args {
                Ok(args) => Outcome::from_result(stack.invoke(pid, method, &args), |v| v.to_plain_json()),
                Err(e) => Outcome::error(e.to_string()),
            }
        }
        EventSpec::FileAccess { app, path, op } => {
            Outcome::from_result(stack.file_access(app!(app), path, op), |_| Json::Null)
        }
        EventSpec::Expect(_) => Outcome::error("expect is not an action"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    pub line: usize,
    pub kind: String,
    pub outcome: Outcome,
    pub decisions: Vec<DecisionRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectResult {
    pub index: usize,
    pub line: usize,
    /// Index of the event the matcher applied to.
    pub target: usize,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub module: Option<String>,
    pub hooks_enabled: bool,
    pub entries: Vec<TraceEntry>,
    pub expects: Vec<ExpectResult>,
    pub passed: bool,
    pub module_stats: BTreeMap<String, u64>,
}

impl RunReport {
    pub fn failed_expects(&self) -> usize {
        self.expects.iter().filter(|e| !e.passed).count()
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario: {0}")]
    Parse(#[from] ParseError),
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct RunFlags {
    pub hooks_enabled: bool,
    /// Overrides the scenario's recorded seed.
    pub seed: Option<u64>,
    pub catalog: ModuleCatalog,
}

impl Default for RunFlags {
    fn default() -> Self {
        RunFlags { hooks_enabled: true, seed: None, catalog: crate::modules::builtin_catalog() }
    }
}

/// A finished run; the stack is kept for inspection.
pub struct ScenarioRun {
    pub report: RunReport,
    pub stack: Stack,
}

/// Boots a fresh stack and runs every event in order.
pub fn run_scenario(
    scenario: &Scenario,
    config: &StackConfig,
    manifest: Option<&ModuleManifest>,
    flags: &RunFlags,
) -> Result<ScenarioRun, RunError> {
    scenario.validate_references(config)?;
    let options = BootOptions { hooks_enabled: flags.hooks_enabled, catalog: flags.catalog.clone(), record: true };
    let stack = Stack::boot(config, manifest, options).map_err(|e| RunError::Config(e.to_string()))?;
    stack.framework().take_decisions();
    let mut entries: Vec<TraceEntry> = Vec::new();
    let mut expects = Vec::new();
    for (index, event) in scenario.events.iter().enumerate() {
        if let EventSpec::Expect(x) = &event.spec {
            let target = entries.last().expect("validated: expect follows an event");
            let mismatch = x.mismatch(&target.outcome);
            log::info!("expect at line {}: {}", event.line, if mismatch.is_none() { "pass" } else { "fail" });
            expects.push(ExpectResult {
                index,
                line: event.line,
                target: target.index,
                passed: mismatch.is_none(),
                detail: mismatch.unwrap_or_else(|| format!("{} as expected", x.status)),
            });
            continue;
        }
        let outcome = execute(&stack, &event.spec);
        log::trace!("event {index} {}: {}", event.spec.kind(), outcome.status);
        entries.push(TraceEntry {
            index,
            line: event.line,
            kind: event.spec.kind().to_owned(),
            outcome,
            decisions: stack.framework().take_decisions(),
        });
    }
    let module_stats = stack.module().map(|m| m.stats()).unwrap_or_default();
    if let Err(e) = stack.shutdown() {
        log::warn!("module shutdown failed: {e}");
    }
    let report = RunReport {
        scenario: scenario.name.clone(),
        seed: flags.seed.unwrap_or(scenario.seed),
        module: manifest.map(|m| m.name.clone()),
        hooks_enabled: flags.hooks_enabled,
        passed: expects.iter().all(|e: &ExpectResult| e.passed),
        entries,
        expects,
        module_stats,
    };
    Ok(ScenarioRun { report, stack })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expects_are_evaluated() {
        let text = r#"{"name":"t","events":[
            {"kind":"install","package":{"name":"a","permissions":["INTERNET"]}},
            {"kind":"expect","status":"ok","value":{"uid":10000,"replaced":false}},
            {"kind":"spawn","package":"a"},
            {"kind":"get_location","app":"a"},
            {"kind":"expect","status":"error","reason_contains":"no location fix"},
            {"kind":"get_device_id","app":"a"},
            {"kind":"expect","status":"ok","value":"nope"}
        ]}"#;
        let s = Scenario::parse(text).unwrap();
        let run = run_scenario(&s, &StackConfig::default(), None, &RunFlags::default()).unwrap();
        let r = &run.report;
        assert_eq!(r.entries.len(), 4);
        assert_eq!(r.expects.iter().map(|e| e.passed).collect::<Vec<_>>(), [true, true, false]);
        assert!(!r.passed);
    }
}
