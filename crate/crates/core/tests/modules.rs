use monitord_core::bundle::Bundle;
use monitord_core::bundle::Value;
use monitord_core::framework::hooks::*;
use monitord_core::framework::ModuleManifest;
use monitord_core::irm::monitors::{OPEN_CONNECTION, SEND_TEXT_MESSAGE};
use monitord_core::irm::IrmEvent;
use monitord_core::middleware::{BootOptions, ContentStoreConfig, ServiceError, Stack, StackConfig};
use monitord_core::model::{Component, ComponentKind, Credentials, Intent, LocationFix, PackageInfo, SHELL_UID};
use monitord_core::modules::*;
use serde_json::json;

const OFFICE: (f64, f64) = (52.52, 13.40);

fn config() -> StackConfig {
    StackConfig::default().with_fix(LocationFix::new(48.0, 11.0, 1)).with_store(ContentStoreConfig {
        name: "contacts".into(),
        columns: vec!["name".into(), "group".into()],
        rows: vec![vec![json!("ann"), json!("work")], vec![json!("bob"), json!("private")]],
    })
}

fn boot(manifest: ModuleManifest) -> Stack {
    Stack::boot(&config(), Some(&manifest), BootOptions::default()).unwrap()
}

fn start(stack: &Stack, pkg: PackageInfo) -> u32 {
    let name = pkg.name.clone();
    stack.install_package(pkg).unwrap();
    stack.launch_app_process(&name, &[]).unwrap().pid
}

fn denied<T: std::fmt::Debug>(r: Result<T, ServiceError>) -> bool {
    matches!(r, Err(ServiceError::Denied(_)))
}

fn context_manifest(store: Option<&std::path::Path>) -> ModuleManifest {
    let mut cfg = json!({
        "regions": [{ "name": "office", "latitude": OFFICE.0, "longitude": OFFICE.1, "radius_m": 500.0 }],
        "grants": [
            { "context": "office", "key": GET_LAST_LOCATION, "decision": "deny" },
            { "context": "office", "key": "CAMERA", "decision": "deny" }
        ]
    });
    if let Some(p) = store {
        cfg["store_path"] = json!(p);
    }
    ModuleManifest::new("ctx", CONTEXT_ENTRY)
        .with_hooks([REPORT_LOCATION, GET_LAST_LOCATION, CHECK_COMPONENT_PERMISSION])
        .with_config(cfg)
}

#[test]
fn context_switch_gates_location_and_permissions() {
    let stack = boot(context_manifest(None));
    let pid = start(&stack, PackageInfo::new("com.app").with_permissions(["CAMERA"]));
    let creds = stack.app(pid).unwrap().credentials();
    assert!(stack.get_last_location(pid).is_ok());
    assert!(stack.check_component_permission("CAMERA", &creds, 1000, true).unwrap());

    stack.report_location(LocationFix::new(OFFICE.0 + 0.001, OFFICE.1, 5)).unwrap();
    assert!(denied(stack.get_last_location(pid)));
    assert!(!stack.check_component_permission("CAMERA", &creds, 1000, true).unwrap());
    // system callers are not gated
    let system = Credentials::new(1000, 1);
    assert!(stack.check_component_permission("CAMERA", &system, 1000, true).unwrap());

    stack.report_location(LocationFix::new(0.0, 0.0, 6)).unwrap();
    assert!(stack.get_last_location(pid).is_ok());
}

#[test]
fn context_policy_is_admin_only_and_persists() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ctx.json");
    let shell = Credentials::new(SHELL_UID, 0);

    let stack = boot(context_manifest(Some(&path)));
    let pid = start(&stack, PackageInfo::new("com.app"));
    let app = stack.app(pid).unwrap().credentials();
    let policy = json!({ "grants": [{ "context": "default", "key": GET_LAST_LOCATION, "decision": "deny" }] });
    let set = Bundle::new().with("cmd", "setPolicy").with("policy", policy.to_string());
    assert_eq!(stack.call_module(&app, &set).unwrap().get_str("status"), Some("denied"));
    assert!(stack.get_last_location(pid).is_ok());
    assert_eq!(stack.call_module(&shell, &set).unwrap().get_str("status"), Some("ok"));
    assert!(denied(stack.get_last_location(pid)));
    stack.shutdown().unwrap();
    assert!(path.exists());

    let again = boot(context_manifest(Some(&path)));
    let pid = start(&again, PackageInfo::new("com.app"));
    assert!(denied(again.get_last_location(pid)));
    let got = again.call_module(&shell, &Bundle::new().with("cmd", "getPolicy")).unwrap();
    let stored: serde_json::Value = serde_json::from_str(got.get_str("policy").unwrap()).unwrap();
    assert_eq!(stored["grants"], policy["grants"]);
    assert!(stored["regions"].as_array().unwrap().is_empty());
}

#[test]
fn appops_denies_unlisted_ops() {
    let manifest = ModuleManifest::new("ops", APPOPS_ENTRY)
        .with_hooks([GET_DEVICE_ID, GET_PRIMARY_CLIP, PRE_QUERY])
        .with_config(json!({ "opmap": [{ "uid": 10000, "package": "com.app", "ops": ["READ_CLIPBOARD"] }] }));
    let stack = boot(manifest);
    let pid = start(&stack, PackageInfo::new("com.app"));
    let other = start(&stack, PackageInfo::new("com.other"));
    assert!(denied(stack.get_device_id(pid)));
    assert!(stack.get_primary_clip(pid).is_ok());
    assert!(denied(stack.query_content(pid, "contacts", &Bundle::new())));
    assert!(stack.get_device_id(other).is_ok());

    let ops = stack.call_module(&Credentials::new(SHELL_UID, 0), &Bundle::new().with("cmd", "getOps")).unwrap();
    assert_eq!(ops.get_str("status"), Some("ok"));
    assert!(ops.get("opmap").is_some());
}

#[test]
fn intent_firewall_blocks_matching_calls() {
    let manifest = ModuleManifest::new("fw", APPOPS_ENTRY)
        .with_hooks(IPC_HOOKS)
        .with_config(json!({ "firewall": [{ "caller": "com.spy*", "action": "VIEW" }] }));
    let stack = boot(manifest);
    let viewer = PackageInfo::new("com.viewer")
        .with_component(Component::new(ComponentKind::Activity, "Main").with_actions(["VIEW", "MAIN"]));
    start(&stack, viewer);
    let spy = start(&stack, PackageInfo::new("com.spyware"));
    let good = start(&stack, PackageInfo::new("com.good"));
    assert!(denied(stack.start_activity(spy, &Intent::new("VIEW"))));
    assert!(stack.start_activity(spy, &Intent::new("MAIN")).is_ok());
    assert_eq!(stack.start_activity(good, &Intent::new("VIEW")).unwrap(), "com.viewer/Main");
}

#[test]
fn saint_runtime_rule_checks_caller_permissions() {
    let policies = Bundle::from_plain_json(&json!({
        "runtime": [{ "action": "VIEW", "caller_permissions": ["CAMERA"] }]
    }))
    .unwrap();
    let callee = PackageInfo::new("com.callee")
        .with_component(Component::new(ComponentKind::Activity, "Main").with_actions(["VIEW", "MAIN"]))
        .with_policies(policies);
    let stack = boot(ModuleManifest::new("saint", SAINT_ENTRY).with_hooks(IPC_HOOKS));
    start(&stack, callee);
    let without = start(&stack, PackageInfo::new("com.plain"));
    let with = start(&stack, PackageInfo::new("com.camera").with_permissions(["CAMERA"]));
    assert!(denied(stack.start_activity(without, &Intent::new("VIEW"))));
    assert!(stack.start_activity(without, &Intent::new("MAIN")).is_ok());
    assert!(stack.start_activity(with, &Intent::new("VIEW")).is_ok());
}

#[test]
fn saint_install_rule_rejects_packages() {
    let policies = Bundle::from_plain_json(&json!({
        "install": [{ "permission": "com.owner.DATA", "required_permissions": ["INTERNET"] }]
    }))
    .unwrap();
    let stack = boot(ModuleManifest::new("saint", SAINT_ENTRY).with_hooks([SCAN_PACKAGE]));
    stack.install_package(PackageInfo::new("com.owner").with_policies(policies)).unwrap();
    let bad = stack.install_package(PackageInfo::new("com.bad").with_permissions(["com.owner.DATA"]));
    assert!(matches!(bad, Err(ServiceError::Rejected(_))));
    assert!(stack.package("com.bad").is_none());
    stack.install_package(PackageInfo::new("com.ok").with_permissions(["com.owner.DATA", "INTERNET"])).unwrap();
}

fn appguard_manifest() -> ModuleManifest {
    ModuleManifest::new("guard", APPGUARD_ENTRY)
        .with_hooks([INSTRUMENT_APP])
        .with_config(json!({ "packages": ["com.guarded*"], "deny_methods": [SEND_TEXT_MESSAGE] }))
}

#[test]
fn appguard_instruments_selected_apps() {
    let stack = boot(appguard_manifest());
    let guarded = start(&stack, PackageInfo::new("com.guarded.app"));
    let free = start(&stack, PackageInfo::new("com.free"));

    let trace = stack.irm().trace();
    let setup = trace.iter().position(|e| matches!(e, IrmEvent::MonitorSetup { pid, .. } if *pid == guarded));
    let started = trace.iter().position(|e| matches!(e, IrmEvent::AppStart { pid } if *pid == guarded));
    assert!(setup.unwrap() < started.unwrap());
    assert!(!trace.iter().any(|e| matches!(e, IrmEvent::MonitorSetup { pid, .. } if *pid == free)));

    let url = [Value::from("http://example.org")];
    assert_eq!(stack.invoke(guarded, OPEN_CONNECTION, &url).unwrap(), Value::from("connected:https://example.org"));
    assert_eq!(stack.invoke(free, OPEN_CONNECTION, &url).unwrap(), Value::from("connected:http://example.org"));
    let sms = [Value::from("+1"), Value::from("hi")];
    assert!(denied(stack.invoke(guarded, SEND_TEXT_MESSAGE, &sms)));
    assert!(stack.invoke(free, SEND_TEXT_MESSAGE, &sms).is_ok());
}

#[test]
fn appguard_policy_only_for_system() {
    let stack = boot(appguard_manifest());
    let req = Bundle::new()
        .with("cmd", "monitorPolicy")
        .with("monitor", "appguard.Monitor")
        .with("package", "com.guarded.app");
    let shell = stack.call_module(&Credentials::new(SHELL_UID, 0), &req).unwrap();
    assert_eq!(shell.get_str("status"), Some("denied"));
    let system = stack.call_module(&Credentials::new(1000, 1), &req).unwrap();
    assert_eq!(system.get_str("status"), Some("ok"));
    assert_eq!(system.get_bundle("policy").unwrap().get_bool("https_upgrade"), Some(true));
}

#[test]
fn type_enforcement_empty_list_and_pre_query() {
    let manifest = ModuleManifest::new("te", TYPE_ENFORCEMENT_ENTRY)
        .with_hooks([GET_INSTALLED_PACKAGES, PRE_QUERY, POST_QUERY])
        .with_config(json!({
            "rules": [{ "subject": "trusted_t", "object": "packageService_c", "class": "service", "op": "list" }],
            "package_overrides": { "com.trusted": "trusted_t" },
            "hook_objects": {
                GET_INSTALLED_PACKAGES: { "object": "packageService_c", "class": "service", "op": "list" }
            },
            "empty_list_on_deny": true
        }));
    let stack = boot(manifest);
    let trusted = start(&stack, PackageInfo::new("com.trusted"));
    let other = start(&stack, PackageInfo::new("com.other"));
    assert_eq!(stack.get_installed_packages(trusted).unwrap().len(), 2);
    assert!(stack.get_installed_packages(other).unwrap().is_empty());

    assert!(denied(stack.query_content(other, "contacts", &Bundle::new())));
    let module = stack.module().unwrap();
    assert_eq!(module.counter(PRE_QUERY), 1);
    assert_eq!(module.counter(POST_QUERY), 0);
}

#[test]
fn kirin_rejects_dangerous_combination() {
    let manifest = ModuleManifest::new("kirin", KIRIN_ENTRY)
        .with_hooks([SCAN_PACKAGE])
        .with_config(json!({ "rules": [{ "permissions": ["RECEIVE_SMS", "INTERNET"] }] }));
    let stack = boot(manifest);
    let bad = stack.install_package(PackageInfo::new("com.sms.leak").with_permissions(["RECEIVE_SMS", "INTERNET"]));
    assert!(matches!(bad, Err(ServiceError::Rejected(_))));
    stack.install_package(PackageInfo::new("com.sms").with_permissions(["RECEIVE_SMS"])).unwrap();
}

#[test]
fn chinese_wall_blocks_second_side() {
    let manifest = ModuleManifest::new("cw", CHINESE_WALL_ENTRY)
        .with_hooks(IPC_HOOKS)
        .with_config(json!({ "forbidden_pairs": [["READ_CONTACTS", "INTERNET"]] }));
    let stack = boot(manifest);
    let contacts = PackageInfo::new("com.contacts")
        .with_permissions(["READ_CONTACTS"])
        .with_component(Component::new(ComponentKind::Service, "Sync").with_actions(["SYNC"]));
    let net = PackageInfo::new("com.net")
        .with_permissions(["INTERNET"])
        .with_component(Component::new(ComponentKind::Service, "Up").with_actions(["UPLOAD"]));
    let middle = start(&stack, PackageInfo::new("com.middle"));
    start(&stack, contacts);
    start(&stack, net);
    stack.bind_service(middle, &Intent::new("SYNC")).unwrap();
    assert!(denied(stack.bind_service(middle, &Intent::new("UPLOAD"))));
}

fn composed(strategy: &str) -> ModuleManifest {
    let shadow = json!({
        "name": "shadow", "entry_point": SHADOW_ENTRY, "hooks": [GET_DEVICE_ID],
        "config": { "entries": [{ "package": "com.app", "kind": "device_id", "mode": "fake" }] }
    });
    let ops = json!({
        "name": "ops", "entry_point": APPOPS_ENTRY, "hooks": [GET_DEVICE_ID],
        "config": { "opmap": [{ "uid": 10000, "package": "com.app", "ops": [] }] }
    });
    let kirin = json!({
        "name": "kirin", "entry_point": KIRIN_ENTRY, "hooks": [SCAN_PACKAGE],
        "config": { "rules": [{ "permissions": ["CAMERA", "INTERNET"] }] }
    });
    ModuleManifest::new("combo", COMPOSITION_ENTRY)
        .with_hooks([GET_DEVICE_ID, SCAN_PACKAGE])
        .with_config(json!({ "strategy": strategy, "children": [shadow, ops, kirin] }))
}

#[test]
fn composition_reconciles_children() {
    let consensus = boot(composed("consensus"));
    let pid = start(&consensus, PackageInfo::new("com.app"));
    assert!(denied(consensus.get_device_id(pid)));
    let bad = consensus.install_package(PackageInfo::new("com.cam").with_permissions(["CAMERA", "INTERNET"]));
    assert!(matches!(bad, Err(ServiceError::Rejected(_))));

    let priority = boot(composed("priority"));
    let pid = start(&priority, PackageInfo::new("com.app"));
    assert_eq!(priority.get_device_id(pid).unwrap(), shadow::FAKE_DEVICE_ID);
    let other = start(&priority, PackageInfo::new("com.other"));
    assert_eq!(priority.get_device_id(other).unwrap(), monitord_core::middleware::DEFAULT_DEVICE_ID);
}
