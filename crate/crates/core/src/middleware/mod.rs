//! Simulated middleware services instrumented with enforcement hooks.
//!
//! Each service operation consults its hook through the framework, then the
//! kernel where it touches kernel objects. No service lock is held while a
//! module runs, so modules may call back into the registries.

pub mod config;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use indexmap::IndexMap;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::bundle::{Bundle, List, Value};
use crate::framework::hooks::*;
use crate::framework::{
    EditOutcome, Framework, FrameworkCallbacks, FrameworkError, ModuleCatalog, ModuleHandle, ModuleManifest,
    PackageEvent, Verdict,
};
use crate::irm::{IrmError, IrmRuntime, MethodRef};
use crate::kernel::{Kernel, KernelError, ObjectRef, SpawnRequest, SYSTEM_SERVER_PID, ZYGOTE_PID};
use crate::model::{
    ComponentKind, Credentials, Intent, LocationFix, PackageInfo, ResultSet, FIRST_APP_UID, SYSTEM_UID,
};

pub use config::{ContentStoreConfig, KernelPolicySource, StackConfig, DEFAULT_DEVICE_ID};
pub use trace::{EventRecord, ObservableTrace, OpRecord, Trace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServiceError {
    #[error("denied: {0}")]
    Denied(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("malformed package: {0}")]
    MalformedPackage(String),
    #[error("malformed intent: {0}")]
    MalformedIntent(String),
    #[error("unknown package `{0}`")]
    UnknownPackage(String),
    #[error("unknown component `{0}`")]
    UnknownComponent(String),
    #[error("unknown content store `{0}`")]
    UnknownStore(String),
    #[error("unknown location provider `{0}`")]
    UnknownProvider(String),
    #[error("unknown pid {0}")]
    UnknownPid(u32),
    #[error("no location fix available")]
    NoLocationFix,
    #[error("invalid location fix")]
    InvalidLocation,
    #[error("spawn denied by {0}")]
    SpawnDenied(String),
    #[error("monitor bootstrap failed: {0}")]
    MonitorBootstrap(String),
    #[error("kernel: {0}")]
    Kernel(KernelError),
    #[error("framework: {0}")]
    Framework(#[from] FrameworkError),
    #[error("irm: {0}")]
    Irm(IrmError),
    #[error("configuration: {0}")]
    Config(String),
}

impl From<KernelError> for ServiceError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::SpawnDenied(h) => ServiceError::SpawnDenied(h),
            other => ServiceError::Kernel(other),
        }
    }
}

impl From<IrmError> for ServiceError {
    fn from(e: IrmError) -> Self {
        match e {
            IrmError::Denied(r) => ServiceError::Denied(r),
            other => ServiceError::Irm(other),
        }
    }
}

impl ServiceError {
    /// Short status word for traces and scenario outcomes.
    pub fn status(&self) -> &'static str {
        match self {
            ServiceError::Denied(_) | ServiceError::SpawnDenied(_) => "denied",
            ServiceError::Rejected(_) => "rejected",
            _ => "error",
        }
    }
}

/// A running app.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimApp {
    pub package: String,
    pub pid: u32,
    pub uid: u32,
    pub registered_receivers: BTreeSet<String>,
}

impl SimApp {
    pub fn credentials(&self) -> Credentials {
        Credentials::with_package(self.uid, self.pid, self.package.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallOutcome {
    pub uid: u32,
    pub replaced: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub delivered: Vec<String>,
    pub suppressed: Vec<(String, String)>,
}

#[derive(Debug, Default)]
struct Registry {
    packages: IndexMap<String, PackageInfo>,
    shared_uids: BTreeMap<String, u32>,
    next_uid: u32,
    apps: BTreeMap<u32, SimApp>,
}

impl Registry {
    fn uid_in_use(&self, uid: u32) -> bool {
        self.packages.values().any(|p| p.uid == uid)
    }
}

#[derive(Debug, Default)]
struct Services {
    current_fix: Option<LocationFix>,
    providers: Vec<String>,
    stores: IndexMap<String, ResultSet>,
    clip: String,
    device_id: String,
}

/// Framework callbacks backed by the stack registries.
struct StackCallbacks {
    registry: Arc<RwLock<Registry>>,
    kernel: Arc<Kernel>,
}

impl FrameworkCallbacks for StackCallbacks {
    fn package_for_pid(&self, pid: u32) -> Option<String> {
        if let Some(app) = self.registry.read().apps.get(&pid) {
            return Some(app.package.clone());
        }
        self.kernel.process(pid).map(|p| p.package)
    }

    fn installed_packages(&self) -> Vec<PackageInfo> {
        self.registry.read().packages.values().cloned().collect()
    }

    fn package(&self, name: &str) -> Option<PackageInfo> {
        self.registry.read().packages.get(name).cloned()
    }
}

#[derive(Debug, Clone)]
pub struct BootOptions {
    pub hooks_enabled: bool,
    pub catalog: ModuleCatalog,
    /// Keep the in-memory trace and decision log (off for benchmarking).
    pub record: bool,
}

impl Default for BootOptions {
    fn default() -> Self {
        BootOptions { hooks_enabled: true, catalog: crate::modules::builtin_catalog(), record: true }
    }
}

/// A booted simulated device.
pub struct Stack {
    framework: Arc<Framework>,
    kernel: Arc<Kernel>,
    irm: Arc<IrmRuntime>,
    registry: Arc<RwLock<Registry>>,
    services: Mutex<Services>,
    trace: Trace,
    module: Option<ModuleHandle>,
}

impl std::fmt::Debug for Stack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stack")
            .field("module", &self.module)
            .field("packages", &self.registry.read().packages.len())
            .finish()
    }
}

fn system_creds() -> Credentials {
    Credentials::with_package(SYSTEM_UID, SYSTEM_SERVER_PID, "system_server")
}

fn ok_json(value: Json) -> Json {
    json!({ "status": "ok", "value": value })
}

fn err_json(e: &ServiceError) -> Json {
    json!({ "status": e.status(), "reason": e.to_string() })
}

fn fix_json(f: &LocationFix) -> Json {
    serde_json::to_value(f).unwrap_or(Json::Null)
}

impl Stack {
    /// Boots kernel, framework, module and preinstalled packages.
    pub fn boot(
        config: &StackConfig,
        manifest: Option<&ModuleManifest>,
        options: BootOptions,
    ) -> Result<Stack, ServiceError> {
        let policy = config.inline_kernel_policy().map_err(ServiceError::Config)?;
        let kernel = Arc::new(Kernel::new(policy));
        kernel.kmac_init();
        let framework = Arc::new(Framework::with_standard_hooks(options.catalog));
        framework.set_hooks_enabled(options.hooks_enabled);
        framework.set_decision_logging(options.record);
        let registry = Arc::new(RwLock::new(Registry { next_uid: FIRST_APP_UID, ..Registry::default() }));
        let callbacks: Arc<dyn FrameworkCallbacks> =
            Arc::new(StackCallbacks { registry: registry.clone(), kernel: kernel.clone() });
        framework.set_callbacks(callbacks.clone());
        let module = manifest.map(|m| framework.load_module(m)).transpose()?;

        let mut stores = IndexMap::new();
        for s in &config.content_stores {
            stores.insert(s.name.clone(), s.to_result_set().map_err(ServiceError::Config)?);
        }
        if let Some(bad) = config.location_seed.iter().find(|f| !f.is_valid()) {
            return Err(ServiceError::Config(format!("invalid seed fix {bad:?}")));
        }
        let stack = Stack {
            framework,
            kernel,
            irm: Arc::new(IrmRuntime::standard()),
            registry,
            services: Mutex::new(Services {
                current_fix: config.location_seed.first().copied(),
                providers: config.providers.clone(),
                stores,
                clip: String::new(),
                device_id: config.device_id.clone(),
            }),
            trace: Trace::default(),
            module,
        };
        stack.trace.set_enabled(options.record);
        for pkg in &config.preinstalled_packages {
            stack
                .install_package(pkg.clone())
                .map_err(|e| ServiceError::Config(format!("preinstalled package `{}`: {e}", pkg.name)))?;
        }
        if let Some(m) = &stack.module {
            stack.framework.init_module(m, callbacks)?;
        }
        Ok(stack)
    }

    pub fn framework(&self) -> &Arc<Framework> {
        &self.framework
    }

    pub fn kernel(&self) -> &Arc<Kernel> {
        &self.kernel
    }

    pub fn irm(&self) -> &Arc<IrmRuntime> {
        &self.irm
    }

    pub fn module(&self) -> Option<&ModuleHandle> {
        self.module.as_ref()
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Shuts the module down if it is running.
    pub fn shutdown(&self) -> Result<(), ServiceError> {
        if let Some(m) = &self.module {
            if m.is_initialized() {
                self.framework.shutdown_module(m)?;
            }
        }
        Ok(())
    }

    pub fn packages(&self) -> Vec<PackageInfo> {
        self.registry.read().packages.values().cloned().collect()
    }

    pub fn package(&self, name: &str) -> Option<PackageInfo> {
        self.registry.read().packages.get(name).cloned()
    }

    pub fn apps(&self) -> Vec<SimApp> {
        self.registry.read().apps.values().cloned().collect()
    }

    pub fn app(&self, pid: u32) -> Option<SimApp> {
        self.registry.read().apps.get(&pid).cloned()
    }

    /// Lowest live pid running `package`.
    pub fn app_for_package(&self, package: &str) -> Option<SimApp> {
        self.registry.read().apps.values().find(|a| a.package == package).cloned()
    }

    pub fn current_fix(&self) -> Option<LocationFix> {
        self.services.lock().current_fix
    }

    pub fn clip(&self) -> String {
        self.services.lock().clip.clone()
    }

    fn caller(&self, pid: u32) -> Result<Credentials, ServiceError> {
        if let Some(app) = self.registry.read().apps.get(&pid) {
            return Ok(app.credentials());
        }
        self.kernel.process(pid).map(|p| p.credentials()).ok_or(ServiceError::UnknownPid(pid))
    }

    fn finish<T>(
        &self,
        op_id: u64,
        op: &str,
        caller: Option<&Credentials>,
        detail: Json,
        result: &Result<T, ServiceError>,
        render: impl FnOnce(&T) -> Json,
    ) {
        let outcome = match result {
            Ok(v) => ok_json(render(v)),
            Err(e) => err_json(e),
        };
        self.trace.complete(op_id, op, caller.map(|c| (c.uid, c.pid)), detail, outcome);
    }

    fn truncate(&self, hook: &str, creds: &Credentials, args: &Bundle) -> Result<(), ServiceError> {
        match self.framework.dispatch_truncation(hook, creds, args)? {
            Verdict::Allow => Ok(()),
            Verdict::Deny(r) => Err(ServiceError::Denied(r)),
        }
    }

    fn edit(&self, hook: &str, creds: &Credentials, args: &Bundle, candidate: Value) -> Result<Value, ServiceError> {
        self.framework.dispatch_edit(hook, creds, args, candidate)?.into_result().map_err(ServiceError::Denied)
    }

    fn report_interaction(&self, caller: &Credentials, callee_uid: u32, channel: &str) -> Result<(), ServiceError> {
        let args = Bundle::new().with("caller_uid", caller.uid).with("callee_uid", callee_uid).with("channel", channel);
        self.framework.dispatch_observe(REPORT_INTERACTION, caller, &args)?;
        Ok(())
    }

    fn notify(&self, op_id: u64, event: PackageEvent) {
        let delivered = self.framework.notify_package_event(&event);
        self.trace.event(op_id, event.kind(), event.package_name(), delivered);
    }

    // ---- package manager -------------------------------------------------

    /// Scans and registers a package; reinstalling a name replaces it.
    pub fn install_package(&self, pkg: PackageInfo) -> Result<InstallOutcome, ServiceError> {
        let op_id = self.trace.begin();
        let detail = json!({ "package": pkg.name });
        let result = self.install_inner(op_id, pkg);
        self.finish(op_id, "install", None, detail, &result, |o| json!({ "uid": o.uid, "replaced": o.replaced }));
        result
    }

    fn install_inner(&self, op_id: u64, mut pkg: PackageInfo) -> Result<InstallOutcome, ServiceError> {
        pkg.is_well_formed().map_err(ServiceError::MalformedPackage)?;
        let (existing, uid) = {
            let reg = self.registry.read();
            let existing = reg.packages.get(&pkg.name).cloned();
            let uid = match (&existing, &pkg.shared_user) {
                (Some(old), _) => old.uid,
                (None, Some(shared)) => reg.shared_uids.get(shared).copied().unwrap_or(reg.next_uid),
                (None, None) => reg.next_uid,
            };
            (existing, uid)
        };
        pkg.uid = uid;
        let args = Bundle::new().with("package", pkg.to_bundle()).with("replacing", existing.is_some());
        match self.framework.dispatch_truncation(SCAN_PACKAGE, &system_creds(), &args)? {
            Verdict::Allow => {}
            Verdict::Deny(r) => return Err(ServiceError::Rejected(r)),
        }
        {
            let mut reg = self.registry.write();
            if uid == reg.next_uid {
                reg.next_uid += 1;
            }
            if let Some(shared) = &pkg.shared_user {
                reg.shared_uids.entry(shared.clone()).or_insert(uid);
            }
            reg.packages.insert(pkg.name.clone(), pkg.clone());
        }
        let data_dir = format!("/data/data/{}", pkg.name);
        if !self.kernel.file_exists(&data_dir) {
            self.kernel.create_file(&data_dir)?;
        }
        let replaced = existing.is_some();
        let event = match existing {
            Some(old) => PackageEvent::Replaced { old, new: pkg },
            None => PackageEvent::Installed(pkg),
        };
        self.notify(op_id, event);
        Ok(InstallOutcome { uid, replaced })
    }

    pub fn uninstall_package(&self, name: &str) -> Result<(), ServiceError> {
        let op_id = self.trace.begin();
        let result = self.uninstall_inner(op_id, name);
        self.finish(op_id, "uninstall", None, json!({ "package": name }), &result, |_| Json::Null);
        result
    }

    fn uninstall_inner(&self, op_id: u64, name: &str) -> Result<(), ServiceError> {
        let (pkg, pids) = {
            let mut reg = self.registry.write();
            let pkg = reg.packages.shift_remove(name).ok_or_else(|| ServiceError::UnknownPackage(name.to_owned()))?;
            let pids: Vec<u32> = reg.apps.values().filter(|a| a.package == name).map(|a| a.pid).collect();
            for pid in &pids {
                reg.apps.remove(pid);
            }
            if let Some(shared) = &pkg.shared_user {
                if !reg.uid_in_use(pkg.uid) {
                    reg.shared_uids.remove(shared);
                }
            }
            (pkg, pids)
        };
        for pid in pids {
            let _ = self.kernel.kill_process(pid);
            self.irm.destroy_process(pid);
        }
        self.kernel.remove_tree(&format!("/data/data/{name}"));
        self.notify(op_id, PackageEvent::Removed { name: pkg.name, uid: pkg.uid });
        Ok(())
    }

    pub fn get_installed_packages(&self, caller_pid: u32) -> Result<Vec<PackageInfo>, ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(caller_pid);
        let result = caller.clone().and_then(|c| {
            let list = List::of_bundles(self.packages().iter().map(PackageInfo::to_bundle));
            let out = self.edit(GET_INSTALLED_PACKAGES, &c, &Bundle::new(), Value::List(list))?;
            let list = out.as_list().cloned().unwrap_or_else(List::empty);
            Ok(list.iter().filter_map(|v| v.as_bundle().and_then(PackageInfo::from_bundle)).collect::<Vec<_>>())
        });
        self.finish(op_id, "get_installed", caller.as_ref().ok(), json!({}), &result, |pkgs| {
            json!(pkgs.iter().map(|p| p.name.clone()).collect::<Vec<_>>())
        });
        result
    }

    // ---- processes -------------------------------------------------------

    /// Starts a process for an installed package.
    ///
    /// `receivers` adds dynamically registered broadcast actions.
    pub fn launch_app_process(&self, name: &str, receivers: &[String]) -> Result<SimApp, ServiceError> {
        let op_id = self.trace.begin();
        let result = self.launch_inner(name, receivers);
        self.finish(
            op_id,
            "spawn",
            None,
            json!({ "package": name }),
            &result,
            |a| json!({ "pid": a.pid, "uid": a.uid }),
        );
        result
    }

    fn launch_inner(&self, name: &str, receivers: &[String]) -> Result<SimApp, ServiceError> {
        let pkg = self.package(name).ok_or_else(|| ServiceError::UnknownPackage(name.to_owned()))?;
        let args = Bundle::new().with("package", name).with("uid", pkg.uid);
        let monitor = self.edit(INSTRUMENT_APP, &system_creds(), &args, Value::from(""))?;
        let monitor = monitor.as_str().unwrap_or_default().to_owned();
        let zygote = Credentials::with_package(0, ZYGOTE_PID, "zygote");
        let proc = self
            .kernel
            .spawn_process(&zygote, &SpawnRequest { uid: pkg.uid, package: name.to_owned(), label_hint: None })?;
        self.irm.create_process(proc.pid);
        if !monitor.is_empty() {
            let policy = self.monitor_policy(name, &monitor);
            if let Err(e) = self.irm.bootstrap_monitor(proc.pid, &monitor, &policy) {
                let _ = self.kernel.kill_process(proc.pid);
                self.irm.destroy_process(proc.pid);
                return Err(ServiceError::MonitorBootstrap(e.to_string()));
            }
        }
        self.irm.mark_app_start(proc.pid);
        let mut registered: BTreeSet<String> = pkg.receiver_actions().map(str::to_owned).collect();
        registered.extend(receivers.iter().cloned());
        let app = SimApp { package: name.to_owned(), pid: proc.pid, uid: pkg.uid, registered_receivers: registered };
        self.registry.write().apps.insert(app.pid, app.clone());
        Ok(app)
    }

    /// Policy bundle the module wants a monitor to run with.
    fn monitor_policy(&self, package: &str, monitor: &str) -> Bundle {
        let request = Bundle::new().with("cmd", "monitorPolicy").with("package", package).with("monitor", monitor);
        match self.framework.call_module(&system_creds(), &request) {
            Ok(resp) if resp.get_str("status") == Some("ok") => resp.get_bundle("policy").cloned().unwrap_or_default(),
            _ => Bundle::new(),
        }
    }

    pub fn exit_app(&self, pid: u32) -> Result<(), ServiceError> {
        self.registry.write().apps.remove(&pid).ok_or(ServiceError::UnknownPid(pid))?;
        self.kernel.kill_process(pid)?;
        self.irm.destroy_process(pid);
        Ok(())
    }

    /// App code calling an API method through its process table.
    pub fn invoke(&self, pid: u32, method: &str, args: &[Value]) -> Result<Value, ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(pid);
        let result = caller.clone().and_then(|_| {
            let m = MethodRef::parse(method)?;
            Ok(self.irm.invoke(pid, &m, args)?)
        });
        self.finish(op_id, "invoke", caller.as_ref().ok(), json!({ "method": method }), &result, |v| v.to_plain_json());
        result
    }

    /// Kernel-mediated file access by a process.
    pub fn file_access(&self, pid: u32, path: &str, operation: &str) -> Result<(), ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(pid);
        let result = caller.clone().and_then(|_| {
            match self.kernel.kernel_mediate(pid, &ObjectRef::File(path.to_owned()), operation)? {
                Verdict::Allow => Ok(()),
                Verdict::Deny(r) => Err(ServiceError::Denied(r)),
            }
        });
        self.finish(
            op_id,
            "file_access",
            caller.as_ref().ok(),
            json!({ "path": path, "op": operation }),
            &result,
            |_| Json::Null,
        );
        result
    }

    // ---- broadcasts and components ----------------------------------------

    fn ipc_args(
        &self,
        caller: &Credentials,
        intent: &Intent,
        component: &str,
        target: &PackageInfo,
        target_pid: Option<u32>,
    ) -> Bundle {
        let mut b = Bundle::new()
            .with("intent", intent.to_bundle())
            .with("target_component", component)
            .with("target_package", target.name.as_str())
            .with("target_uid", target.uid);
        if let Some(pid) = target_pid {
            b = b.with("target_pid", pid);
        }
        if let Some(p) = &caller.package {
            b = b.with("caller_package", p.as_str());
        }
        if let Some(p) = &intent.required_permission {
            b = b.with("required_permission", p.as_str());
        }
        b
    }

    /// Delivers an intent to every matching registered receiver, in pid order.
    pub fn send_broadcast(&self, sender_pid: u32, intent: &Intent) -> Result<DeliveryReport, ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(sender_pid);
        let result = caller.clone().and_then(|c| self.broadcast_inner(&c, intent));
        let detail = json!({ "action": intent.action, "target": intent.target_component });
        self.finish(
            op_id,
            "broadcast",
            caller.as_ref().ok(),
            detail,
            &result,
            |r| json!({ "delivered": r.delivered, "suppressed": r.suppressed }),
        );
        result
    }

    fn broadcast_inner(&self, sender: &Credentials, intent: &Intent) -> Result<DeliveryReport, ServiceError> {
        if intent.action.is_empty() {
            return Err(ServiceError::MalformedIntent("empty action".into()));
        }
        let receivers: Vec<(SimApp, PackageInfo)> = {
            let reg = self.registry.read();
            reg.apps
                .values()
                .filter(|a| a.registered_receivers.contains(&intent.action))
                .filter_map(|a| reg.packages.get(&a.package).map(|p| (a.clone(), p.clone())))
                .collect()
        };
        let mut report = DeliveryReport::default();
        for (app, pkg) in receivers {
            let component = pkg
                .components
                .iter()
                .find(|c| c.kind == ComponentKind::Receiver && c.actions.contains(&intent.action))
                .map(|c| pkg.component_ref(&c.name))
                .unwrap_or_else(|| pkg.component_ref("DynamicReceiver"));
            if intent.target_component.as_ref().is_some_and(|t| *t != component) {
                continue;
            }
            if let Some(perm) = &intent.required_permission {
                if !pkg.requested_permissions.contains(perm) {
                    report.suppressed.push((component, format!("receiver lacks {perm}")));
                    continue;
                }
            }
            let args = self.ipc_args(sender, intent, &component, &pkg, Some(app.pid));
            match self.framework.dispatch_truncation(DELIVER_TO_RECEIVER, sender, &args)? {
                Verdict::Allow => {
                    self.report_interaction(sender, app.uid, "broadcast")?;
                    report.delivered.push(component);
                }
                Verdict::Deny(r) => report.suppressed.push((component, r)),
            }
        }
        Ok(report)
    }

    /// Resolves an explicit `pkg/Name` target or the first component of
    /// `kind` whose actions include the intent's action.
    fn resolve_component(&self, intent: &Intent, kind: ComponentKind) -> Result<(PackageInfo, String), ServiceError> {
        let reg = self.registry.read();
        if let Some(target) = &intent.target_component {
            let (pkg_name, comp) =
                target.split_once('/').ok_or_else(|| ServiceError::UnknownComponent(target.clone()))?;
            let pkg = reg.packages.get(pkg_name).ok_or_else(|| ServiceError::UnknownComponent(target.clone()))?;
            return match pkg.find_component(comp) {
                Some(c) if c.kind == kind => Ok((pkg.clone(), target.clone())),
                _ => Err(ServiceError::UnknownComponent(target.clone())),
            };
        }
        reg.packages
            .values()
            .find_map(|p| {
                p.components
                    .iter()
                    .find(|c| c.kind == kind && c.actions.contains(&intent.action))
                    .map(|c| (p.clone(), p.component_ref(&c.name)))
            })
            .ok_or_else(|| ServiceError::UnknownComponent(format!("<{} for {}>", kind.as_str(), intent.action)))
    }

    fn component_call(
        &self,
        op: &str,
        hook: &str,
        kind: ComponentKind,
        channel: &str,
        caller_pid: u32,
        intent: &Intent,
    ) -> Result<String, ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(caller_pid);
        let result = caller.clone().and_then(|c| {
            let (pkg, component) = self.resolve_component(intent, kind)?;
            let target_pid = self.app_for_package(&pkg.name).map(|a| a.pid);
            let args = self.ipc_args(&c, intent, &component, &pkg, target_pid);
            self.truncate(hook, &c, &args)?;
            self.report_interaction(&c, pkg.uid, channel)?;
            Ok(component)
        });
        let detail = json!({ "action": intent.action, "target": intent.target_component });
        self.finish(op_id, op, caller.as_ref().ok(), detail, &result, |c| json!(c));
        result
    }

    pub fn start_activity(&self, caller_pid: u32, intent: &Intent) -> Result<String, ServiceError> {
        self.component_call("start_activity", START_ACTIVITY, ComponentKind::Activity, "activity", caller_pid, intent)
    }

    pub fn bind_service(&self, caller_pid: u32, intent: &Intent) -> Result<String, ServiceError> {
        self.component_call("bind_service", BIND_SERVICE, ComponentKind::Service, "bind", caller_pid, intent)
    }

    /// Stock rule: granted iff the caller's packages request the permission
    /// or the caller owns the component. The module's answer is authoritative.
    pub fn check_component_permission(
        &self,
        permission: &str,
        caller: &Credentials,
        owner_uid: u32,
        exported: bool,
    ) -> Result<bool, ServiceError> {
        let op_id = self.trace.begin();
        let stock = caller.uid == owner_uid
            || self
                .registry
                .read()
                .packages
                .values()
                .any(|p| p.uid == caller.uid && p.requested_permissions.contains(permission));
        let args = Bundle::new().with("permission", permission).with("owner_uid", owner_uid).with("exported", exported);
        let candidate = Value::Int(if stock { 0 } else { -1 });
        let result = match self.framework.dispatch_edit(CHECK_COMPONENT_PERMISSION, caller, &args, candidate) {
            Ok(EditOutcome::Unchanged(v) | EditOutcome::Replaced(v)) => Ok(v.as_int() == Some(0)),
            Ok(EditOutcome::Denied(_)) => Ok(false),
            Err(e) => Err(ServiceError::from(e)),
        };
        let detail = json!({ "permission": permission, "owner_uid": owner_uid, "exported": exported });
        self.finish(op_id, "check_permission", Some(caller), detail, &result, |g| json!(g));
        result
    }

    // ---- location ----------------------------------------------------------

    pub fn get_last_location(&self, caller_pid: u32) -> Result<LocationFix, ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(caller_pid);
        let result = caller.clone().and_then(|c| {
            let fix = self.services.lock().current_fix.ok_or(ServiceError::NoLocationFix)?;
            let out = self.edit(GET_LAST_LOCATION, &c, &Bundle::new(), fix.to_value())?;
            LocationFix::from_value(&out).ok_or(ServiceError::InvalidLocation)
        });
        self.finish(op_id, "get_location", caller.as_ref().ok(), json!({}), &result, fix_json);
        result
    }

    pub fn get_all_providers(&self, caller_pid: u32) -> Result<Vec<String>, ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(caller_pid);
        let result = caller.clone().and_then(|c| {
            let providers = self.services.lock().providers.clone();
            let out = self.edit(GET_ALL_PROVIDERS, &c, &Bundle::new(), Value::List(List::of_text(providers)))?;
            Ok(out.as_text_list().unwrap_or_default())
        });
        self.finish(op_id, "get_providers", caller.as_ref().ok(), json!({}), &result, |p| json!(p));
        result
    }

    /// Feeds a new fix into the location service. Returns the stored fix, or
    /// `None` when the module suppressed it.
    pub fn report_location(&self, fix: LocationFix) -> Result<Option<LocationFix>, ServiceError> {
        let op_id = self.trace.begin();
        let result = self.report_inner(fix);
        self.finish(op_id, "report_location", None, fix_json(&fix), &result, |f| {
            f.as_ref().map_or(Json::Null, fix_json)
        });
        result
    }

    fn report_inner(&self, fix: LocationFix) -> Result<Option<LocationFix>, ServiceError> {
        if !fix.is_valid() {
            return Err(ServiceError::InvalidLocation);
        }
        match self.framework.dispatch_edit(REPORT_LOCATION, &system_creds(), &Bundle::new(), fix.to_value())? {
            EditOutcome::Denied(_) => Ok(None),
            EditOutcome::Unchanged(v) | EditOutcome::Replaced(v) => {
                let stored = LocationFix::from_value(&v).ok_or(ServiceError::InvalidLocation)?;
                self.services.lock().current_fix = Some(stored);
                Ok(Some(stored))
            }
        }
    }

    pub fn request_location_updates(&self, caller_pid: u32, provider: &str) -> Result<(), ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(caller_pid);
        let result = caller.clone().and_then(|c| {
            if !self.services.lock().providers.iter().any(|p| p == provider) {
                return Err(ServiceError::UnknownProvider(provider.to_owned()));
            }
            self.truncate(REQUEST_LOCATION_UPDATES, &c, &Bundle::new().with("provider", provider))
        });
        self.finish(
            op_id,
            "request_location_updates",
            caller.as_ref().ok(),
            json!({ "provider": provider }),
            &result,
            |_| Json::Null,
        );
        result
    }

    // ---- content, device info, clipboard ---------------------------------

    /// Equality-filter query; `selection` maps column names to required values.
    pub fn query_content(&self, caller_pid: u32, store: &str, selection: &Bundle) -> Result<ResultSet, ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(caller_pid);
        let result = caller.clone().and_then(|c| {
            let data = self
                .services
                .lock()
                .stores
                .get(store)
                .cloned()
                .ok_or_else(|| ServiceError::UnknownStore(store.to_owned()))?;
            let args = Bundle::new().with("store", store).with("selection", selection.clone());
            self.truncate(PRE_QUERY, &c, &args)?;
            let rows = data
                .rows
                .iter()
                .filter(|row| {
                    selection.iter().all(|(col, want)| data.column_index(col).is_some_and(|i| &row[i] == want))
                })
                .cloned()
                .collect();
            let candidate = ResultSet { columns: data.columns.clone(), rows };
            let out = self.edit(POST_QUERY, &c, &args, candidate.to_value())?;
            ResultSet::from_value(&out).ok_or_else(|| ServiceError::Denied("module-fault:schema".into()))
        });
        let detail = json!({ "store": store, "selection": selection.to_plain_json() });
        self.finish(op_id, "query_content", caller.as_ref().ok(), detail, &result, |rs| {
            json!({ "columns": rs.columns, "rows": rs.rows.iter().map(|r| r.iter().map(Value::to_plain_json).collect::<Vec<_>>()).collect::<Vec<_>>() })
        });
        result
    }

    pub fn get_device_id(&self, caller_pid: u32) -> Result<String, ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(caller_pid);
        let result = caller.clone().and_then(|c| {
            let id = self.services.lock().device_id.clone();
            let out = self.edit(GET_DEVICE_ID, &c, &Bundle::new(), Value::from(id))?;
            Ok(out.as_str().unwrap_or_default().to_owned())
        });
        self.finish(op_id, "get_device_id", caller.as_ref().ok(), json!({}), &result, |s| json!(s));
        result
    }

    pub fn get_primary_clip(&self, caller_pid: u32) -> Result<String, ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(caller_pid);
        let result = caller.clone().and_then(|c| {
            let clip = self.services.lock().clip.clone();
            let out = self.edit(GET_PRIMARY_CLIP, &c, &Bundle::new(), Value::from(clip))?;
            Ok(out.as_str().unwrap_or_default().to_owned())
        });
        self.finish(op_id, "clip_get", caller.as_ref().ok(), json!({}), &result, |s| json!(s));
        result
    }

    pub fn set_primary_clip(&self, caller_pid: u32, text: &str) -> Result<(), ServiceError> {
        let op_id = self.trace.begin();
        let caller = self.caller(caller_pid);
        let result = caller.clone().and_then(|c| {
            self.truncate(SET_PRIMARY_CLIP, &c, &Bundle::new().with("text", text))?;
            self.services.lock().clip = text.to_owned();
            Ok(())
        });
        self.finish(op_id, "clip_set", caller.as_ref().ok(), json!({ "text": text }), &result, |_| Json::Null);
        result
    }

    /// Front-end channel to the active module.
    pub fn call_module(&self, caller: &Credentials, request: &Bundle) -> Result<Bundle, ServiceError> {
        let op_id = self.trace.begin();
        let result = self.framework.call_module(caller, request).map_err(ServiceError::from);
        self.finish(op_id, "call_module", Some(caller), request.to_plain_json(), &result, |b| b.to_plain_json());
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Component;

    fn boot(manifest: Option<ModuleManifest>) -> Stack {
        let cfg = StackConfig::default().with_fix(LocationFix::new(52.1, 13.4, 1)).with_store(ContentStoreConfig {
            name: "contacts".into(),
            columns: vec!["name".into(), "group".into()],
            rows: vec![
                vec![json!("ann"), json!("work")],
                vec![json!("bob"), json!("private")],
                vec![json!("cy"), json!("work")],
            ],
        });
        Stack::boot(&cfg, manifest.as_ref(), BootOptions::default()).unwrap()
    }

    fn app(stack: &Stack, name: &str, perms: &[&str], receivers: &[&str]) -> SimApp {
        let pkg = PackageInfo::new(name)
            .with_permissions(perms.iter().copied())
            .with_component(Component::new(ComponentKind::Activity, "Main").with_actions(["MAIN"]))
            .with_component(Component::new(ComponentKind::Service, "Svc").with_actions(["BIND"]));
        stack.install_package(pkg).unwrap();
        let r: Vec<String> = receivers.iter().map(|s| s.to_string()).collect();
        stack.launch_app_process(name, &r).unwrap()
    }

    #[test]
    fn default_allow_services() {
        let s = boot(Some(ModuleManifest::default_allow()));
        let a = app(&s, "com.example.a", &["INTERNET"], &["PING"]);
        let b = app(&s, "com.example.b", &[], &["PING"]);
        assert_eq!(a.uid, 10000);
        assert_eq!(a.pid, 100);
        assert_eq!(s.framework().resolve_package_for_pid(b.pid).unwrap(), "com.example.b");
        let report = s.send_broadcast(a.pid, &Intent::new("PING")).unwrap();
        assert_eq!(report.delivered.len(), 2);
        assert_eq!(s.get_last_location(a.pid).unwrap(), LocationFix::new(52.1, 13.4, 1));
        assert_eq!(s.get_all_providers(a.pid).unwrap(), ["gps", "network"]);
        assert_eq!(s.query_content(a.pid, "contacts", &Bundle::new()).unwrap().rows.len(), 3);
        let work = s.query_content(a.pid, "contacts", &Bundle::new().with("group", "work")).unwrap();
        assert_eq!(work.rows.len(), 2);
        s.set_primary_clip(a.pid, "hello").unwrap();
        assert_eq!(s.get_primary_clip(b.pid).unwrap(), "hello");
        assert_eq!(s.get_device_id(a.pid).unwrap(), DEFAULT_DEVICE_ID);
        assert_eq!(
            s.bind_service(a.pid, &Intent::new("BIND").targeting("com.example.b/Svc")).unwrap(),
            "com.example.b/Svc"
        );
        assert!(matches!(
            s.start_activity(a.pid, &Intent::new("MAIN").targeting("com.example.b/Nope")),
            Err(ServiceError::UnknownComponent(_))
        ));
        assert!(s.check_component_permission("INTERNET", &a.credentials(), 4242, true).unwrap());
        assert!(!s.check_component_permission("CAMERA", &a.credentials(), 4242, true).unwrap());
        assert!(s.check_component_permission("CAMERA", &a.credentials(), a.uid, false).unwrap());
    }

    #[test]
    fn reinstall_preserves_uid_and_uninstall_cleans_up() {
        let s = boot(None);
        let a = app(&s, "com.example.a", &[], &[]);
        let again = s.install_package(PackageInfo::new("com.example.a")).unwrap();
        assert_eq!(again, InstallOutcome { uid: a.uid, replaced: true });
        s.uninstall_package("com.example.a").unwrap();
        assert!(s.packages().is_empty());
        assert_eq!(s.framework().resolve_package_for_pid(a.pid).unwrap_err(), FrameworkError::UnknownPid(a.pid));
        assert_eq!(
            s.uninstall_package("com.example.a").unwrap_err(),
            ServiceError::UnknownPackage("com.example.a".into())
        );
        let kinds: Vec<_> = s.trace().events().iter().map(|e| e.kind).collect();
        use crate::framework::PackageEventKind::*;
        assert_eq!(kinds, [Installed, Replaced, Removed]);
    }

    #[test]
    fn shared_user_shares_uid() {
        let s = boot(None);
        let a = s.install_package(PackageInfo::new("p1").with_shared_user("team")).unwrap();
        let b = s.install_package(PackageInfo::new("p2").with_shared_user("team")).unwrap();
        let c = s.install_package(PackageInfo::new("p3")).unwrap();
        assert_eq!(a.uid, b.uid);
        assert_eq!(c.uid, a.uid + 1);
    }

    #[test]
    fn report_location_updates_fix() {
        let s = boot(None);
        let fix = LocationFix::new(10.0, 20.0, 5);
        assert_eq!(s.report_location(fix).unwrap(), Some(fix));
        assert_eq!(s.current_fix(), Some(fix));
        assert_eq!(s.report_location(LocationFix::new(95.0, 0.0, 6)).unwrap_err(), ServiceError::InvalidLocation);
    }
}
