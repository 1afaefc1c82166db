//! Security-module contract, manifests, handles and the entry-point catalog.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{decode_base64, Bundle};
use crate::model::{Credentials, PackageInfo};

use super::decision::PolicyDecision;
use super::hook::{HookDescriptor, HookRegistry};
use super::FrameworkError;

/// Internal failure inside a module. Never silently allows.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ModuleFault(pub String);

impl ModuleFault {
    pub fn new(detail: impl Into<String>) -> ModuleFault {
        ModuleFault(detail.into())
    }
}

/// One hook invocation as seen by an enforcement function.
#[derive(Debug, Clone, Copy)]
pub struct HookCall<'a> {
    pub hook: &'a HookDescriptor,
    pub creds: &'a Credentials,
    pub args: &'a Bundle,
    /// Present for edit-return and list-filter hooks.
    pub candidate: Option<&'a crate::bundle::Value>,
}

impl HookCall<'_> {
    pub fn id(&self) -> &str {
        &self.hook.id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PackageEvent {
    Installed(PackageInfo),
    Replaced { old: PackageInfo, new: PackageInfo },
    Removed { name: String, uid: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackageEventKind {
    Installed,
    Replaced,
    Removed,
}

impl PackageEvent {
    pub fn kind(&self) -> PackageEventKind {
        match self {
            PackageEvent::Installed(_) => PackageEventKind::Installed,
            PackageEvent::Replaced { .. } => PackageEventKind::Replaced,
            PackageEvent::Removed { .. } => PackageEventKind::Removed,
        }
    }

    pub fn package_name(&self) -> &str {
        match self {
            PackageEvent::Installed(p) => &p.name,
            PackageEvent::Replaced { new, .. } => &new.name,
            PackageEvent::Removed { name, .. } => name,
        }
    }
}

/// Direct access to framework-internal registries for modules.
pub trait FrameworkCallbacks: Send + Sync {
    fn package_for_pid(&self, pid: u32) -> Option<String>;

    fn installed_packages(&self) -> Vec<PackageInfo>;

    fn package(&self, name: &str) -> Option<PackageInfo> {
        self.installed_packages().into_iter().find(|p| p.name == name)
    }

    fn packages_for_uid(&self, uid: u32) -> Vec<PackageInfo> {
        self.installed_packages().into_iter().filter(|p| p.uid == uid).collect()
    }
}

/// Fixed package/process tables; handy for tests and for the CLI's
/// stand-alone `call-module` mode.
#[derive(Debug, Clone, Default)]
pub struct StaticCallbacks {
    pub packages: Vec<PackageInfo>,
    pub pids: BTreeMap<u32, String>,
}

impl FrameworkCallbacks for StaticCallbacks {
    fn package_for_pid(&self, pid: u32) -> Option<String> {
        self.pids.get(&pid).cloned()
    }

    fn installed_packages(&self) -> Vec<PackageInfo> {
        self.packages.clone()
    }
}

/// What a module sees at `init`.
pub struct ModuleContext {
    pub callbacks: Arc<dyn FrameworkCallbacks>,
    pub manifest: ModuleManifest,
}

/// Response every module gives to protocol requests it does not understand.
pub fn unsupported_response() -> Bundle {
    Bundle::new().with("status", "unsupported")
}

/// Loadable policy logic.
///
/// Every method has a permissive default, so a module overrides only what it
/// enforces. Methods take `&self`: modules declared `concurrent` must cope with
/// parallel calls, `serialized` ones are called under a framework-held lock.
pub trait SecurityModule: Send + Sync {
    fn init(&self, _ctx: &ModuleContext) -> Result<bool, ModuleFault> {
        Ok(true)
    }

    fn shutdown(&self) -> Result<(), ModuleFault> {
        Ok(())
    }

    fn enforce(&self, _call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
        Ok(PolicyDecision::Allow)
    }

    fn on_package_event(&self, _event: &PackageEvent) -> Result<(), ModuleFault> {
        Ok(())
    }

    fn call_module(&self, _caller: &Credentials, _request: &Bundle) -> Result<Bundle, ModuleFault> {
        Ok(unsupported_response())
    }
}

/// The default-allow base module.
#[derive(Debug, Default)]
pub struct DefaultAllow;

impl SecurityModule for DefaultAllow {}

pub const DEFAULT_ALLOW_ENTRY: &str = "monitord.DefaultAllow";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchMode {
    #[default]
    Serialized,
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleResource {
    pub name: String,
    #[serde(with = "resource_bytes")]
    pub bytes: Vec<u8>,
}

mod resource_bytes {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        super::decode_base64(&text).map_err(serde::de::Error::custom)
    }
}

/// Module manifest as stored in manifest files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleManifest {
    pub name: String,
    #[serde(default)]
    pub author: String,
    #[serde(default = "default_version")]
    pub version: String,
    pub entry_point: String,
    #[serde(default)]
    pub dispatch_mode: DispatchMode,
    #[serde(default, rename = "hooks")]
    pub declared_hooks: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resources: Vec<ModuleResource>,
    /// Free-form configuration handed to the module factory.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

fn default_version() -> String {
    "1.0".to_owned()
}

impl ModuleManifest {
    pub fn new(name: impl Into<String>, entry_point: impl Into<String>) -> ModuleManifest {
        ModuleManifest {
            name: name.into(),
            author: String::new(),
            version: default_version(),
            entry_point: entry_point.into(),
            dispatch_mode: DispatchMode::Serialized,
            declared_hooks: Vec::new(),
            resources: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    /// The no-op module, declared on every standard hook.
    pub fn default_allow() -> ModuleManifest {
        let hooks: Vec<String> = super::hooks::standard_hooks().into_iter().map(|d| d.id).collect();
        ModuleManifest::new("DefaultAllow", DEFAULT_ALLOW_ENTRY).with_hooks(hooks)
    }

    pub fn with_hooks<S: Into<String>>(mut self, hooks: impl IntoIterator<Item = S>) -> ModuleManifest {
        self.declared_hooks = hooks.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_config(mut self, config: serde_json::Value) -> ModuleManifest {
        self.config = config;
        self
    }

    pub fn with_dispatch_mode(mut self, mode: DispatchMode) -> ModuleManifest {
        self.dispatch_mode = mode;
        self
    }

    pub fn from_json(text: &str) -> Result<ModuleManifest, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Reads a manifest file. A string-valued `config` is a path (relative to
    /// the manifest) of a JSON config file, which is inlined. Child manifests
    /// of a composition config are resolved the same way.
    pub fn from_file(path: &Path) -> Result<ModuleManifest, String> {
        let text =
            std::fs::read_to_string(path).map_err(|e| format!("cannot read manifest {}: {e}", path.display()))?;
        let mut manifest =
            ModuleManifest::from_json(&text).map_err(|e| format!("invalid manifest {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        manifest.resolve_config_paths(base)?;
        Ok(manifest)
    }

    fn resolve_config_paths(&mut self, base: &Path) -> Result<(), String> {
        if let serde_json::Value::String(rel) = &self.config {
            let cfg_path = base.join(rel);
            let text = std::fs::read_to_string(&cfg_path)
                .map_err(|e| format!("cannot read module config {}: {e}", cfg_path.display()))?;
            self.config = serde_json::from_str(&text)
                .map_err(|e| format!("invalid module config {}: {e}", cfg_path.display()))?;
        }
        if let Some(children) = self.config.get_mut("children").and_then(|c| c.as_array_mut()) {
            for child in children.iter_mut() {
                let child_manifest = match &*child {
                    serde_json::Value::String(rel) => ModuleManifest::from_file(&base.join(rel.as_str()))?,
                    other => {
                        let mut m: ModuleManifest = serde_json::from_value(other.clone())
                            .map_err(|e| format!("invalid child manifest: {e}"))?;
                        m.resolve_config_paths(base)?;
                        m
                    }
                };
                *child = serde_json::to_value(&child_manifest).map_err(|e| e.to_string())?;
            }
        }
        Ok(())
    }

    pub fn resource(&self, name: &str) -> Option<&[u8]> {
        self.resources.iter().find(|r| r.name == name).map(|r| r.bytes.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleState {
    Loaded,
    Initialized,
    ShutDown,
}

impl fmt::Display for ModuleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModuleState::Loaded => "loaded",
            ModuleState::Initialized => "initialized",
            ModuleState::ShutDown => "shut_down",
        };
        f.write_str(s)
    }
}

/// What the loader hands a module factory.
pub struct LoadEnv<'a> {
    pub catalog: &'a ModuleCatalog,
    pub hooks: &'a HookRegistry,
}

pub type ModuleFactory =
    Arc<dyn Fn(&ModuleManifest, &LoadEnv<'_>) -> Result<Box<dyn SecurityModule>, ModuleFault> + Send + Sync>;

/// Maps manifest entry points to module implementations.
#[derive(Clone)]
pub struct ModuleCatalog {
    factories: BTreeMap<String, ModuleFactory>,
}

impl fmt::Debug for ModuleCatalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModuleCatalog").field("entry_points", &self.factories.keys().collect::<Vec<_>>()).finish()
    }
}

impl Default for ModuleCatalog {
    fn default() -> Self {
        let mut catalog = ModuleCatalog { factories: BTreeMap::new() };
        catalog.register(DEFAULT_ALLOW_ENTRY, |_, _| Ok(Box::new(DefaultAllow)));
        catalog
    }
}

impl ModuleCatalog {
    /// Catalog containing only the default-allow base.
    pub fn new() -> ModuleCatalog {
        ModuleCatalog::default()
    }

    pub fn register<F>(&mut self, entry_point: impl Into<String>, factory: F)
    where
        F: Fn(&ModuleManifest, &LoadEnv<'_>) -> Result<Box<dyn SecurityModule>, ModuleFault> + Send + Sync + 'static,
    {
        self.factories.insert(entry_point.into(), Arc::new(factory));
    }

    pub fn contains(&self, entry_point: &str) -> bool {
        self.factories.contains_key(entry_point)
    }

    pub fn entry_points(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    /// Validates a manifest against the registry and instantiates its module.
    pub fn instantiate(&self, manifest: &ModuleManifest, hooks: &HookRegistry) -> Result<ModuleHandle, FrameworkError> {
        let factory = self
            .factories
            .get(&manifest.entry_point)
            .ok_or_else(|| FrameworkError::UnresolvableEntryPoint(manifest.entry_point.clone()))?;
        if let Some(unknown) = manifest.declared_hooks.iter().find(|h| !hooks.contains(h)) {
            return Err(FrameworkError::UnknownDeclaredHook(unknown.clone()));
        }
        let env = LoadEnv { catalog: self, hooks };
        let module = factory(manifest, &env)
            .map_err(|f| FrameworkError::ModuleConfig { module: manifest.name.clone(), reason: f.0 })?;
        Ok(ModuleHandle::new(manifest.clone(), module))
    }
}

/// Result of consulting a module at one hook.
#[derive(Debug, Clone, PartialEq)]
pub enum Consultation {
    /// The module was not invoked (not initialized, or hook not declared).
    Bypassed,
    Decided(PolicyDecision),
}

pub(crate) struct LoadedModule {
    manifest: ModuleManifest,
    module: Box<dyn SecurityModule>,
    state: Mutex<ModuleState>,
    declared: BTreeSet<String>,
    stats: BTreeMap<String, AtomicU64>,
    gate: Mutex<()>,
}

/// Shared handle to one loaded module instance.
#[derive(Clone)]
pub struct ModuleHandle(Arc<LoadedModule>);

impl fmt::Debug for ModuleHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModuleHandle").field("name", &self.0.manifest.name).field("state", &self.state()).finish()
    }
}

fn panic_detail(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = payload.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_owned()
    }
}

impl ModuleHandle {
    pub fn new(manifest: ModuleManifest, module: Box<dyn SecurityModule>) -> ModuleHandle {
        let declared: BTreeSet<String> = manifest.declared_hooks.iter().cloned().collect();
        let stats = declared.iter().map(|h| (h.clone(), AtomicU64::new(0))).collect();
        ModuleHandle(Arc::new(LoadedModule {
            manifest,
            module,
            state: Mutex::new(ModuleState::Loaded),
            declared,
            stats,
            gate: Mutex::new(()),
        }))
    }

    pub fn manifest(&self) -> &ModuleManifest {
        &self.0.manifest
    }

    pub fn name(&self) -> &str {
        &self.0.manifest.name
    }

    pub fn state(&self) -> ModuleState {
        *self.0.state.lock()
    }

    pub fn is_initialized(&self) -> bool {
        self.state() == ModuleState::Initialized
    }

    pub fn declares(&self, hook: &str) -> bool {
        self.0.declared.contains(hook)
    }

    /// Per-hook invocation counters, one per declared hook.
    pub fn stats(&self) -> BTreeMap<String, u64> {
        self.0.stats.iter().map(|(k, v)| (k.clone(), v.load(Ordering::Relaxed))).collect()
    }

    pub fn counter(&self, hook: &str) -> u64 {
        self.0.stats.get(hook).map_or(0, |c| c.load(Ordering::Relaxed))
    }

    pub fn same_instance(&self, other: &ModuleHandle) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Runs `f` against the module honoring the dispatch mode, converting
    /// panics into faults.
    fn guarded<T>(&self, f: impl FnOnce(&dyn SecurityModule) -> Result<T, ModuleFault>) -> Result<T, ModuleFault> {
        let _gate = match self.0.manifest.dispatch_mode {
            DispatchMode::Serialized => Some(self.0.gate.lock()),
            DispatchMode::Concurrent => None,
        };
        match catch_unwind(AssertUnwindSafe(|| f(self.0.module.as_ref()))) {
            Ok(r) => r,
            Err(payload) => Err(ModuleFault(panic_detail(payload))),
        }
    }

    pub(crate) fn transition(&self, from: ModuleState, to: ModuleState) -> Result<(), FrameworkError> {
        let mut state = self.0.state.lock();
        if *state != from {
            return Err(FrameworkError::WrongState { expected: from, actual: *state });
        }
        *state = to;
        Ok(())
    }

    /// Calls the module's `init`. A fault counts as refusal.
    pub fn init(&self, callbacks: Arc<dyn FrameworkCallbacks>) -> Result<bool, FrameworkError> {
        let state = self.state();
        if state != ModuleState::Loaded {
            return Err(FrameworkError::WrongState { expected: ModuleState::Loaded, actual: state });
        }
        let ctx = ModuleContext { callbacks, manifest: self.0.manifest.clone() };
        let accepted = match self.guarded(|m| m.init(&ctx)) {
            Ok(ok) => ok,
            Err(fault) => {
                log::warn!("module {} failed to initialize: {fault}", self.name());
                false
            }
        };
        if accepted {
            self.transition(ModuleState::Loaded, ModuleState::Initialized)?;
        }
        Ok(accepted)
    }

    pub fn shutdown(&self) -> Result<(), FrameworkError> {
        self.transition(ModuleState::Initialized, ModuleState::ShutDown)?;
        if let Err(fault) = self.guarded(|m| m.shutdown()) {
            log::warn!("module {} faulted during shutdown: {fault}", self.name());
        }
        Ok(())
    }

    /// Consults the enforcement function for one hook.
    ///
    /// Undeclared hooks and uninitialized modules are bypassed; faults become
    /// `Deny("module-fault:…")`.
    pub fn consult(&self, call: &HookCall<'_>) -> Consultation {
        if !self.is_initialized() {
            return Consultation::Bypassed;
        }
        let Some(counter) = self.0.stats.get(call.id()) else {
            return Consultation::Bypassed;
        };
        counter.fetch_add(1, Ordering::Relaxed);
        match self.guarded(|m| m.enforce(call)) {
            Ok(decision) => Consultation::Decided(decision),
            Err(fault) => Consultation::Decided(PolicyDecision::fault(fault)),
        }
    }

    /// Delivers a package event. Returns `false` when the module was not
    /// initialized; faults are logged and the event still counts as delivered.
    pub fn deliver_event(&self, event: &PackageEvent) -> bool {
        if !self.is_initialized() {
            return false;
        }
        if let Err(fault) = self.guarded(|m| m.on_package_event(event)) {
            log::warn!("module {} faulted on {:?} event: {fault}", self.name(), event.kind());
        }
        true
    }

    pub fn call(&self, caller: &Credentials, request: &Bundle) -> Result<Bundle, ModuleFault> {
        self.guarded(|m| m.call_module(caller, request))
    }
}
