use std::path::PathBuf;
use std::process::{Command, Output};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cfg(rel: &str) -> String {
    configs().join(rel).to_string_lossy().into_owned()
}

fn monitord(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monitord")).args(args).env("MONITORD_LOG", "off").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn fixtures_run_clean() {
    let stack = cfg("standard_stack.json");
    for name in ["kirin", "xmandroid", "flaskdroid", "shadow"] {
        let scenario = cfg(&format!("scenarios/{name}.json"));
        let module = cfg(&format!("modules/{name}.json"));
        let out = monitord(&["run", "--scenario", &scenario, "--stack", &stack, "--module", &module]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", stdout(&out));
        assert!(stdout(&out).contains(" 0 failed"));
    }
}

#[test]
fn failed_expects_exit_one() {
    // without the install gate the rejected install succeeds
    let out = monitord(&["run", "--scenario", &cfg("scenarios/kirin.json"), "--stack", &cfg("standard_stack.json")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL expect"));
}

#[test]
fn config_errors_exit_two() {
    let out = monitord(&["run", "--scenario", "/nonexistent.json", "--stack", &cfg("standard_stack.json")]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "name": "x", "entry_point": "no.Such" }"#).unwrap();
    let out = monitord(&["call-module", "--module", bad.to_str().unwrap(), "--bundle", r#"{"cmd":"getOps"}"#]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn json_report_parses() {
    let out = monitord(&[
        "run",
        "--scenario",
        &cfg("scenarios/shadow.json"),
        "--stack",
        &cfg("standard_stack.json"),
        "--module",
        &cfg("modules/shadow.json"),
        "--report",
        "json",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], serde_json::json!(true));
    assert_eq!(report["module"], serde_json::json!("Shadow"));
}

#[test]
fn bench_writes_outputs_and_compares() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let (scenario, stack) = (cfg("scenarios/daily_tasks.json"), cfg("standard_stack.json"));
    let common = ["--scenario", &scenario, "--stack", &stack, "--iterations", "12", "--warmup", "0"];

    let (off_csv, off_summary) = (p("off.csv"), p("off.json"));
    let mut off = vec!["bench", "--mode", "disabled", "--out", &off_csv];
    off.extend(common);
    off.extend(["--summary", &off_summary]);
    assert_eq!(monitord(&off).status.code(), Some(0));

    let (on_csv, on_summary, on_cfd) = (p("on.csv"), p("on.json"), p("on_cfd.csv"));
    let mut on = vec!["bench", "--mode", "enabled", "--out", &on_csv];
    on.extend(common);
    on.extend(["--summary", &on_summary, "--cfd", &on_cfd, "--baseline", &off_summary]);
    let out = monitord(&on);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("overhead "));

    let csv = std::fs::read_to_string(&on_csv).unwrap();
    assert!(csv.starts_with("hook_id,mode,frequency,mean_us,margin_us\n"));
    assert!(csv.contains(",hooks_enabled_noop_module,"));
    let cfd = std::fs::read_to_string(&on_cfd).unwrap();
    assert!(cfd.trim_end().ends_with(",1.000000"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&on_summary).unwrap()).unwrap();
    assert!(summary["overhead_ratio"].is_f64());

    let cmp = monitord(&["compare", "--enabled", &on_summary, "--disabled", &off_summary]);
    assert_eq!(cmp.status.code(), Some(0));
    let cmp: serde_json::Value = serde_json::from_slice(&cmp.stdout).unwrap();
    assert_eq!(cmp["overhead_ratio"], summary["overhead_ratio"]);
    let swapped = monitord(&["compare", "--enabled", &off_summary, "--disabled", &on_summary]);
    assert_eq!(swapped.status.code(), Some(2));
}

#[test]
fn call_module_as_shell() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("ops.json");
    let text = r#"{ "name": "ops", "entry_point": "monitord.AppOps",
        "config": { "opmap": [{ "uid": 10001, "package": "com.x", "ops": ["READ_CLIPBOARD"] }] } }"#;
    std::fs::write(&manifest, text).unwrap();
    let request = dir.path().join("req.json");
    std::fs::write(&request, r#"{ "cmd": "getOps" }"#).unwrap();
    let arg = format!("@{}", request.display());
    let out = monitord(&["call-module", "--module", manifest.to_str().unwrap(), "--bundle", &arg]);
    assert_eq!(out.status.code(), Some(0));
    let reply: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reply["status"], "ok");

    let out = monitord(&["call-module", "--module", manifest.to_str().unwrap(), "--bundle", r#"{"cmd":"nope"}"#]);
    let reply: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reply["status"], "unsupported");
}
