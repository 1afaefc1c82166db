//! Hook registry, module lifecycle and decision dispatch.

pub mod decision;
pub mod hook;
pub mod hooks;
pub mod module;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::bundle::{Bundle, Value};
use crate::model::Credentials;

pub use decision::{DecisionRecord, EditOutcome, PolicyDecision, Verdict, MODULE_FAULT_PREFIX};
pub use hook::{ArgSpec, HookCategory, HookDescriptor, HookRegistry, Layer, SemanticType};
pub use module::{
    unsupported_response, Consultation, DefaultAllow, DispatchMode, FrameworkCallbacks, HookCall, LoadEnv,
    ModuleCatalog, ModuleContext, ModuleFactory, ModuleFault, ModuleHandle, ModuleManifest, ModuleResource,
    ModuleState, PackageEvent, PackageEventKind, SecurityModule, StaticCallbacks, DEFAULT_ALLOW_ENTRY,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameworkError {
    #[error("hook `{0}` is already registered")]
    DuplicateHookId(String),
    #[error("malformed schema for hook `{hook}`: {reason}")]
    MalformedSchema { hook: String, reason: String },
    #[error("unknown hook `{0}`")]
    UnknownHook(String),
    #[error("hook `{hook}` is {actual}, not usable for this dispatch")]
    WrongCategory { hook: String, actual: HookCategory },
    #[error("malformed arguments for `{hook}`: {reason}")]
    MalformedArgs { hook: String, reason: String },
    #[error("no module implementation for entry point `{0}`")]
    UnresolvableEntryPoint(String),
    #[error("module declares unregistered hook `{0}`")]
    UnknownDeclaredHook(String),
    #[error("module `{module}` rejected its configuration: {reason}")]
    ModuleConfig { module: String, reason: String },
    #[error("module is {actual}, expected {expected}")]
    WrongState { expected: ModuleState, actual: ModuleState },
    #[error("a module is already loaded")]
    ModuleSlotOccupied,
    #[error("no module loaded")]
    NoModuleLoaded,
    #[error("module reloading is disabled")]
    FeatureDisabled,
    #[error("module `{0}` refused to initialize")]
    InitRefused(String),
    #[error("module fault: {0}")]
    ModuleFault(String),
    #[error("unknown pid {0}")]
    UnknownPid(u32),
}

/// Reference-monitor core shared by every simulated layer.
pub struct Framework {
    hooks: HookRegistry,
    catalog: ModuleCatalog,
    active: RwLock<Option<ModuleHandle>>,
    callbacks: RwLock<Option<Arc<dyn FrameworkCallbacks>>>,
    hooks_enabled: AtomicBool,
    reload_enabled: AtomicBool,
    mode_generation: AtomicU64,
    log_decisions: AtomicBool,
    decisions: Mutex<Vec<DecisionRecord>>,
}

impl std::fmt::Debug for Framework {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Framework")
            .field("hooks", &self.hooks.len())
            .field("active", &*self.active.read())
            .field("hooks_enabled", &self.hooks_enabled())
            .finish()
    }
}

impl Default for Framework {
    fn default() -> Self {
        Framework::new(ModuleCatalog::new())
    }
}

impl Framework {
    /// Empty registry; nothing is dispatchable until hooks are registered.
    pub fn new(catalog: ModuleCatalog) -> Framework {
        Framework {
            hooks: HookRegistry::new(),
            catalog,
            active: RwLock::new(None),
            callbacks: RwLock::new(None),
            hooks_enabled: AtomicBool::new(true),
            reload_enabled: AtomicBool::new(false),
            mode_generation: AtomicU64::new(0),
            log_decisions: AtomicBool::new(true),
            decisions: Mutex::new(Vec::new()),
        }
    }

    /// Registry pre-populated with the standard hook table.
    pub fn with_standard_hooks(catalog: ModuleCatalog) -> Framework {
        let fw = Framework::new(catalog);
        for descriptor in hooks::standard_hooks() {
            fw.register_hook(descriptor).expect("standard hook table is well-formed");
        }
        fw
    }

    pub fn register_hook(&self, descriptor: HookDescriptor) -> Result<String, FrameworkError> {
        self.hooks.register(descriptor)
    }

    pub fn hooks(&self) -> &HookRegistry {
        &self.hooks
    }

    pub fn catalog(&self) -> &ModuleCatalog {
        &self.catalog
    }

    pub fn set_callbacks(&self, callbacks: Arc<dyn FrameworkCallbacks>) {
        *self.callbacks.write() = Some(callbacks);
    }

    pub fn callbacks(&self) -> Option<Arc<dyn FrameworkCallbacks>> {
        self.callbacks.read().clone()
    }

    pub fn resolve_package_for_pid(&self, pid: u32) -> Result<String, FrameworkError> {
        self.callbacks().and_then(|cb| cb.package_for_pid(pid)).ok_or(FrameworkError::UnknownPid(pid))
    }

    /// Instantiates a module into the (single) active slot.
    pub fn load_module(&self, manifest: &ModuleManifest) -> Result<ModuleHandle, FrameworkError> {
        let handle = self.catalog.instantiate(manifest, &self.hooks)?;
        let mut slot = self.active.write();
        if slot.is_some() {
            return Err(FrameworkError::ModuleSlotOccupied);
        }
        *slot = Some(handle.clone());
        log::info!("loaded module {} ({})", manifest.name, manifest.entry_point);
        Ok(handle)
    }

    pub fn init_module(
        &self,
        handle: &ModuleHandle,
        callbacks: Arc<dyn FrameworkCallbacks>,
    ) -> Result<bool, FrameworkError> {
        let ok = handle.init(callbacks)?;
        if !ok {
            log::warn!("module {} declined initialization; it will be bypassed", handle.name());
        }
        Ok(ok)
    }

    pub fn shutdown_module(&self, handle: &ModuleHandle) -> Result<(), FrameworkError> {
        handle.shutdown()
    }

    pub fn active_module(&self) -> Option<ModuleHandle> {
        self.active.read().clone()
    }

    pub fn set_reload_enabled(&self, flag: bool) {
        self.reload_enabled.store(flag, Ordering::SeqCst);
    }

    /// Replaces a shut-down module with a freshly initialized one.
    ///
    /// The new module is fully initialized before it becomes visible, so a
    /// concurrent dispatch sees either the old (bypassed) or the new module.
    pub fn reload_module(&self, manifest: &ModuleManifest) -> Result<ModuleHandle, FrameworkError> {
        if !self.reload_enabled.load(Ordering::SeqCst) {
            return Err(FrameworkError::FeatureDisabled);
        }
        self.check_slot_reloadable()?;
        let handle = self.catalog.instantiate(manifest, &self.hooks)?;
        let callbacks = self.callbacks().unwrap_or_else(|| Arc::new(StaticCallbacks::default()));
        if !handle.init(callbacks)? {
            return Err(FrameworkError::InitRefused(manifest.name.clone()));
        }
        let mut slot = self.active.write();
        if let Some(old) = slot.as_ref() {
            if old.state() != ModuleState::ShutDown {
                return Err(FrameworkError::WrongState { expected: ModuleState::ShutDown, actual: old.state() });
            }
        }
        *slot = Some(handle.clone());
        log::info!("reloaded module {}", manifest.name);
        Ok(handle)
    }

    fn check_slot_reloadable(&self) -> Result<(), FrameworkError> {
        match self.active.read().as_ref() {
            Some(old) if old.state() != ModuleState::ShutDown => {
                Err(FrameworkError::WrongState { expected: ModuleState::ShutDown, actual: old.state() })
            }
            _ => Ok(()),
        }
    }

    pub fn set_hooks_enabled(&self, flag: bool) {
        let prev = self.hooks_enabled.swap(flag, Ordering::SeqCst);
        if prev != flag {
            self.mode_generation.fetch_add(1, Ordering::SeqCst);
        }
    }

    pub fn hooks_enabled(&self) -> bool {
        self.hooks_enabled.load(Ordering::SeqCst)
    }

    /// Bumped on every effective hooks-enabled toggle.
    pub fn mode_generation(&self) -> u64 {
        self.mode_generation.load(Ordering::SeqCst)
    }

    pub fn set_decision_logging(&self, flag: bool) {
        self.log_decisions.store(flag, Ordering::Relaxed);
    }

    pub fn take_decisions(&self) -> Vec<DecisionRecord> {
        std::mem::take(&mut *self.decisions.lock())
    }

    fn record(&self, hook: &str, creds: &Credentials, invoked: bool, outcome: impl FnOnce() -> String) {
        if self.log_decisions.load(Ordering::Relaxed) {
            let record = DecisionRecord {
                hook: hook.to_owned(),
                uid: creds.uid,
                pid: creds.pid,
                module_invoked: invoked,
                outcome: outcome(),
            };
            self.decisions.lock().push(record);
        }
    }

    fn lookup(&self, hook_id: &str) -> Result<Arc<HookDescriptor>, FrameworkError> {
        self.hooks.get(hook_id).ok_or_else(|| FrameworkError::UnknownHook(hook_id.to_owned()))
    }

    fn consult(&self, call: &HookCall<'_>) -> Consultation {
        if !self.hooks_enabled() {
            return Consultation::Bypassed;
        }
        let module = self.active.read().clone();
        match module {
            Some(m) => m.consult(call),
            None => Consultation::Bypassed,
        }
    }

    fn check_args(&self, descriptor: &HookDescriptor, args: &Bundle) -> Result<(), FrameworkError> {
        descriptor
            .check_args(args)
            .map_err(|reason| FrameworkError::MalformedArgs { hook: descriptor.id.clone(), reason })
    }

    /// Dispatches a boolean- or error-truncation hook.
    pub fn dispatch_truncation(
        &self,
        hook_id: &str,
        creds: &Credentials,
        args: &Bundle,
    ) -> Result<Verdict, FrameworkError> {
        let descriptor = self.lookup(hook_id)?;
        if !descriptor.category.is_truncation() {
            return Err(FrameworkError::WrongCategory { hook: hook_id.to_owned(), actual: descriptor.category });
        }
        self.check_args(&descriptor, args)?;
        let call = HookCall { hook: &descriptor, creds, args, candidate: None };
        let (verdict, invoked) = match self.consult(&call) {
            Consultation::Bypassed => (Verdict::Allow, false),
            Consultation::Decided(decision) => (truncation_verdict(decision), true),
        };
        self.record(hook_id, creds, invoked, || format!("{verdict:?}"));
        Ok(verdict)
    }

    /// Dispatches an edit-return or list-filter hook.
    pub fn dispatch_edit(
        &self,
        hook_id: &str,
        creds: &Credentials,
        args: &Bundle,
        candidate: Value,
    ) -> Result<EditOutcome, FrameworkError> {
        let descriptor = self.lookup(hook_id)?;
        if !descriptor.category.allows_edit() {
            return Err(FrameworkError::WrongCategory { hook: hook_id.to_owned(), actual: descriptor.category });
        }
        self.check_args(&descriptor, args)?;
        let consultation = {
            let call = HookCall { hook: &descriptor, creds, args, candidate: Some(&candidate) };
            self.consult(&call)
        };
        let (outcome, invoked) = match consultation {
            Consultation::Bypassed => (EditOutcome::Unchanged(candidate), false),
            Consultation::Decided(PolicyDecision::Allow) => (EditOutcome::Unchanged(candidate), true),
            Consultation::Decided(PolicyDecision::Deny(r)) => (EditOutcome::Denied(r), true),
            Consultation::Decided(PolicyDecision::Edit(v)) => {
                if descriptor.accepts_return(&v) {
                    (EditOutcome::Replaced(v), true)
                } else {
                    log::warn!("module edit at {hook_id} violates return schema");
                    (EditOutcome::Denied(format!("{MODULE_FAULT_PREFIX}schema")), true)
                }
            }
        };
        self.record(hook_id, creds, invoked, || match &outcome {
            EditOutcome::Unchanged(_) => "Unchanged".to_owned(),
            EditOutcome::Replaced(v) => format!("Replaced({})", v.to_plain_json()),
            EditOutcome::Denied(r) => format!("Denied({r})"),
        });
        Ok(outcome)
    }

    /// Feeds an observe-only hook. The module's decision is discarded.
    pub fn dispatch_observe(&self, hook_id: &str, creds: &Credentials, args: &Bundle) -> Result<(), FrameworkError> {
        let descriptor = self.lookup(hook_id)?;
        if descriptor.category != HookCategory::ObserveOnly {
            return Err(FrameworkError::WrongCategory { hook: hook_id.to_owned(), actual: descriptor.category });
        }
        self.check_args(&descriptor, args)?;
        let call = HookCall { hook: &descriptor, creds, args, candidate: None };
        if let Consultation::Decided(PolicyDecision::Deny(r)) = self.consult(&call) {
            log::debug!("observe-only hook {hook_id} ignored module denial: {r}");
        }
        Ok(())
    }

    /// Delivers a package event synchronously. Returns whether a module saw it.
    pub fn notify_package_event(&self, event: &PackageEvent) -> bool {
        if !self.hooks_enabled() {
            return false;
        }
        let module = self.active.read().clone();
        module.is_some_and(|m| m.deliver_event(event))
    }

    /// Forwards an opaque request to the active module.
    pub fn call_module(&self, caller: &Credentials, request: &Bundle) -> Result<Bundle, FrameworkError> {
        let module = self.active.read().clone();
        match module {
            Some(m) if m.is_initialized() => m.call(caller, request).map_err(|f| FrameworkError::ModuleFault(f.0)),
            _ => Err(FrameworkError::NoModuleLoaded),
        }
    }
}

/// Edits are not legal on truncation hooks; treat one as a module fault.
fn truncation_verdict(decision: PolicyDecision) -> Verdict {
    match decision {
        PolicyDecision::Allow => Verdict::Allow,
        PolicyDecision::Deny(r) => Verdict::Deny(r),
        PolicyDecision::Edit(_) => Verdict::Deny(format!("{MODULE_FAULT_PREFIX}edit-on-truncation-hook")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Panicky;
    impl SecurityModule for Panicky {
        fn enforce(&self, _call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
            panic!("boom")
        }
    }

    struct Refuses;
    impl SecurityModule for Refuses {
        fn init(&self, _ctx: &ModuleContext) -> Result<bool, ModuleFault> {
            Ok(false)
        }
        fn enforce(&self, _call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
            Ok(PolicyDecision::deny("never"))
        }
    }

    struct WrongEdit;
    impl SecurityModule for WrongEdit {
        fn enforce(&self, _call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
            Ok(PolicyDecision::Edit(Value::Int(7)))
        }
    }

    fn framework() -> Framework {
        let mut catalog = ModuleCatalog::new();
        catalog.register("t.Panicky", |_, _| Ok(Box::new(Panicky)));
        catalog.register("t.Refuses", |_, _| Ok(Box::new(Refuses)));
        catalog.register("t.WrongEdit", |_, _| Ok(Box::new(WrongEdit)));
        Framework::with_standard_hooks(catalog)
    }

    fn up(fw: &Framework, entry: &str, hooks: &[&str]) -> ModuleHandle {
        let m = ModuleManifest::new(entry, entry).with_hooks(hooks.iter().copied());
        let h = fw.load_module(&m).unwrap();
        fw.init_module(&h, Arc::new(StaticCallbacks::default())).unwrap();
        h
    }

    fn creds() -> Credentials {
        Credentials::new(10000, 100)
    }

    #[test]
    fn default_allow_lifecycle() {
        let fw = framework();
        let h = fw.load_module(&ModuleManifest::default_allow()).unwrap();
        assert_eq!(h.state(), ModuleState::Loaded);
        assert!(fw.init_module(&h, Arc::new(StaticCallbacks::default())).unwrap());
        assert!(matches!(
            fw.init_module(&h, Arc::new(StaticCallbacks::default())),
            Err(FrameworkError::WrongState { .. })
        ));
        fw.shutdown_module(&h).unwrap();
        assert_eq!(h.state(), ModuleState::ShutDown);
        assert!(fw.shutdown_module(&h).is_err());
    }

    #[test]
    fn unknown_declared_hook_rejected() {
        let fw = framework();
        let m = ModuleManifest::default_allow().with_hooks(["no.such.hook"]);
        assert_eq!(fw.load_module(&m).unwrap_err(), FrameworkError::UnknownDeclaredHook("no.such.hook".into()));
        let m = ModuleManifest::new("x", "nowhere.Module");
        assert!(matches!(fw.load_module(&m), Err(FrameworkError::UnresolvableEntryPoint(_))));
    }

    #[test]
    fn panic_fails_closed() {
        let fw = framework();
        let h = up(&fw, "t.Panicky", &["clip.setPrimaryClip"]);
        let args = Bundle::new().with("text", "hi");
        let v = fw.dispatch_truncation("clip.setPrimaryClip", &creds(), &args).unwrap();
        assert!(v.deny_reason().unwrap().starts_with("module-fault:"));
        assert_eq!(h.counter("clip.setPrimaryClip"), 1);
    }

    #[test]
    fn hooks_disabled_bypasses_module() {
        let fw = framework();
        let h = up(&fw, "t.Panicky", &["clip.setPrimaryClip"]);
        fw.set_hooks_enabled(false);
        let args = Bundle::new().with("text", "hi");
        assert_eq!(fw.dispatch_truncation("clip.setPrimaryClip", &creds(), &args).unwrap(), Verdict::Allow);
        assert_eq!(h.counter("clip.setPrimaryClip"), 0);
        fw.set_hooks_enabled(true);
        assert!(!fw.dispatch_truncation("clip.setPrimaryClip", &creds(), &args).unwrap().is_allow());
    }

    #[test]
    fn refused_init_is_bypassed() {
        let fw = framework();
        let h = up(&fw, "t.Refuses", &["clip.setPrimaryClip"]);
        assert_eq!(h.state(), ModuleState::Loaded);
        let args = Bundle::new().with("text", "hi");
        assert_eq!(fw.dispatch_truncation("clip.setPrimaryClip", &creds(), &args).unwrap(), Verdict::Allow);
        assert_eq!(fw.call_module(&creds(), &Bundle::new()).unwrap_err(), FrameworkError::NoModuleLoaded);
    }

    #[test]
    fn schema_violating_edit_denied() {
        let fw = framework();
        up(&fw, "t.WrongEdit", &["phonesubinfo.getDeviceId"]);
        let out = fw
            .dispatch_edit("phonesubinfo.getDeviceId", &creds(), &Bundle::new(), Value::from("490154203237518"))
            .unwrap();
        assert_eq!(out, EditOutcome::Denied("module-fault:schema".into()));
    }

    #[test]
    fn reload_requires_flag_and_shutdown() {
        let fw = framework();
        let h = up(&fw, DEFAULT_ALLOW_ENTRY, &[]);
        let next = ModuleManifest::new("next", "t.WrongEdit").with_hooks(["phonesubinfo.getDeviceId"]);
        assert_eq!(fw.reload_module(&next).unwrap_err(), FrameworkError::FeatureDisabled);
        fw.set_reload_enabled(true);
        assert!(matches!(fw.reload_module(&next), Err(FrameworkError::WrongState { .. })));
        fw.shutdown_module(&h).unwrap();
        let nh = fw.reload_module(&next).unwrap();
        assert!(nh.is_initialized());
        assert!(fw.active_module().unwrap().same_instance(&nh));
    }

    #[test]
    fn call_module_base_response() {
        let fw = framework();
        assert_eq!(fw.call_module(&creds(), &Bundle::new()).unwrap_err(), FrameworkError::NoModuleLoaded);
        up(&fw, DEFAULT_ALLOW_ENTRY, &[]);
        let resp = fw.call_module(&creds(), &Bundle::new().with("cmd", "ping")).unwrap();
        assert_eq!(resp.get_str("status"), Some("unsupported"));
    }
}
