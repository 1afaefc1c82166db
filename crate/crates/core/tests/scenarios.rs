use std::path::PathBuf;

use monitord_core::framework::ModuleManifest;
use monitord_core::middleware::StackConfig;
use monitord_core::scenario::gen::{daily_tasks_scenario, random_scenario, standard_stack_config};
use monitord_core::scenario::report::{emit_report, ReportFormat};
use monitord_core::scenario::runner::{run_scenario, RunFlags, RunReport};
use monitord_core::scenario::Scenario;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stack_config() -> StackConfig {
    StackConfig::from_file(&configs().join("standard_stack.json")).unwrap()
}

fn run_fixture(name: &str) -> RunReport {
    let scenario = Scenario::from_file(&configs().join(format!("scenarios/{name}.json"))).unwrap();
    let manifest = ModuleManifest::from_file(&configs().join(format!("modules/{name}.json"))).unwrap();
    run_scenario(&scenario, &stack_config(), Some(&manifest), &RunFlags::default()).unwrap().report
}

#[test]
fn fixtures_pass() {
    for name in ["kirin", "xmandroid", "flaskdroid", "shadow"] {
        let report = run_fixture(name);
        assert!(report.passed, "{name}: {}", emit_report(&report, ReportFormat::Text));
        assert!(!report.expects.is_empty());
    }
}

#[test]
fn shipped_configs_match_generators() {
    assert_eq!(stack_config(), standard_stack_config());
    let daily = Scenario::from_file(&configs().join("scenarios/daily_tasks.json")).unwrap();
    let generated = daily_tasks_scenario();
    assert_eq!((&daily.name, daily.seed), (&generated.name, generated.seed));
    let specs = |s: &Scenario| s.events.iter().map(|e| e.spec.clone()).collect::<Vec<_>>();
    assert_eq!(specs(&daily), specs(&generated));
}

#[test]
fn reports_are_reproducible() {
    let a = emit_report(&run_fixture("xmandroid"), ReportFormat::Json);
    let b = emit_report(&run_fixture("xmandroid"), ReportFormat::Json);
    assert_eq!(a, b);
    let parsed: RunReport = serde_json::from_str(&a).unwrap();
    assert_eq!(emit_report(&parsed, ReportFormat::Json), a);
}

#[test]
fn text_report_lists_expects() {
    let text = emit_report(&run_fixture("kirin"), ReportFormat::Text);
    assert!(text.starts_with("scenario kirin-install-gate"));
    assert!(text.contains("PASS expect"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn runs_do_not_share_state() {
    let config = standard_stack_config();
    let manifest = ModuleManifest::default_allow();
    let scenario = random_scenario(7, 30);
    let first = run_scenario(&scenario, &config, Some(&manifest), &RunFlags::default()).unwrap();
    let _ = run_scenario(&random_scenario(8, 30), &config, Some(&manifest), &RunFlags::default()).unwrap();
    let again = run_scenario(&scenario, &config, Some(&manifest), &RunFlags::default()).unwrap();
    assert_eq!(first.stack.trace().observable(), again.stack.trace().observable());
    assert_eq!(first.report.module_stats, again.report.module_stats);
}

#[test]
fn failed_expect_is_reported() {
    let text = r#"{ "name": "t", "seed": 0, "events": [
        { "kind": "install", "package": { "name": "com.a" } },
        { "kind": "expect", "status": "denied" }
    ] }"#;
    let scenario = Scenario::parse(text).unwrap();
    let report = run_scenario(&scenario, &StackConfig::default(), None, &RunFlags::default()).unwrap().report;
    assert!(!report.passed);
    assert_eq!(report.failed_expects(), 1);
}

#[test]
fn malformed_scenarios_are_rejected() {
    assert!(Scenario::parse(r#"{ "name": "t", "seed": 0, "events": [{ "kind": "expect", "status": "ok" }] }"#).is_err());
    assert!(Scenario::parse(r#"{ "name": "t", "seed": 0, "events": [{ "kind": "fly" }] }"#).is_err());
    let unknown = Scenario::parse(r#"{ "name": "t", "seed": 0, "events": [{ "kind": "spawn", "package": "x" }] }"#);
    let err = run_scenario(&unknown.unwrap(), &StackConfig::default(), None, &RunFlags::default());
    assert!(err.is_err());
}
