//! Policy modules shipped with the framework.

pub mod appguard;
pub mod appops;
pub mod chinese_wall;
pub mod composition;
pub mod context;
pub mod kirin;
pub mod saint;
pub mod shadow;
pub mod type_enforcement;

use std::collections::BTreeSet;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::de::DeserializeOwned;

use crate::bundle::Bundle;
use crate::framework::{FrameworkCallbacks, ModuleCatalog, ModuleFault, ModuleManifest};
use crate::model::{Credentials, PackageInfo};

pub const CHINESE_WALL_ENTRY: &str = "monitord.ChineseWall";
pub const TYPE_ENFORCEMENT_ENTRY: &str = "monitord.TypeEnforcement";
pub const CONTEXT_ENTRY: &str = "monitord.ContextAccess";
pub const KIRIN_ENTRY: &str = "monitord.InstallGate";
pub const SHADOW_ENTRY: &str = "monitord.DataShadow";
pub const APPOPS_ENTRY: &str = "monitord.AppOps";
pub const SAINT_ENTRY: &str = "monitord.Saint";
pub const COMPOSITION_ENTRY: &str = "monitord.Composition";
pub const APPGUARD_ENTRY: &str = "monitord.AppGuard";

/// Catalog with the default-allow base and every example module.
pub fn builtin_catalog() -> ModuleCatalog {
    let mut c = ModuleCatalog::new();
    c.register(CHINESE_WALL_ENTRY, |m, _| Ok(Box::new(chinese_wall::ChineseWallModule::from_manifest(m)?)));
    c.register(TYPE_ENFORCEMENT_ENTRY, |m, _| Ok(Box::new(type_enforcement::TypeEnforcementModule::from_manifest(m)?)));
    c.register(CONTEXT_ENTRY, |m, _| Ok(Box::new(context::ContextModule::from_manifest(m)?)));
    c.register(KIRIN_ENTRY, |m, _| Ok(Box::new(kirin::KirinModule::from_manifest(m)?)));
    c.register(SHADOW_ENTRY, |m, _| Ok(Box::new(shadow::ShadowModule::from_manifest(m)?)));
    c.register(APPOPS_ENTRY, |m, _| Ok(Box::new(appops::AppOpsModule::from_manifest(m)?)));
    c.register(SAINT_ENTRY, |m, _| Ok(Box::new(saint::SaintModule::from_manifest(m)?)));
    c.register(COMPOSITION_ENTRY, |m, env| Ok(Box::new(composition::CompositionModule::from_manifest(m, env)?)));
    c.register(APPGUARD_ENTRY, |m, _| Ok(Box::new(appguard::AppGuardModule::from_manifest(m)?)));
    c
}

/// Deserializes a manifest's `config` object; `null` means all defaults.
pub(crate) fn parse_config<T: DeserializeOwned + Default>(manifest: &ModuleManifest) -> Result<T, ModuleFault> {
    if manifest.config.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(manifest.config.clone())
        .map_err(|e| ModuleFault::new(format!("invalid config for {}: {e}", manifest.name)))
}

/// `*` matches anything, a trailing `*` matches a prefix, otherwise literal.
pub fn pattern_matches(pattern: &str, value: &str) -> bool {
    if pattern == "*" {
        return true;
    }
    match pattern.strip_suffix('*') {
        Some(prefix) => value.starts_with(prefix),
        None => pattern == value,
    }
}

/// Framework callbacks captured at init.
#[derive(Default)]
pub(crate) struct CallbackSlot(RwLock<Option<Arc<dyn FrameworkCallbacks>>>);

impl CallbackSlot {
    pub fn set(&self, cb: Arc<dyn FrameworkCallbacks>) {
        *self.0.write() = Some(cb);
    }

    pub fn get(&self) -> Result<Arc<dyn FrameworkCallbacks>, ModuleFault> {
        self.0.read().clone().ok_or_else(|| ModuleFault::new("callbacks unavailable"))
    }

    /// Package of the calling process, preferring the credentials' own field.
    pub fn caller_package(&self, creds: &Credentials) -> Option<String> {
        creds.package.clone().or_else(|| self.get().ok()?.package_for_pid(creds.pid))
    }

    pub fn packages_for_uid(&self, uid: u32) -> Vec<PackageInfo> {
        self.get().map(|cb| cb.packages_for_uid(uid)).unwrap_or_default()
    }

    /// Union of permissions requested by every package under `uid`.
    pub fn uid_permissions(&self, uid: u32) -> BTreeSet<String> {
        self.packages_for_uid(uid).into_iter().flat_map(|p| p.requested_permissions).collect()
    }
}

/// Package carried by a `scanPackage` call.
pub(crate) fn scanned_package(args: &Bundle) -> Result<PackageInfo, ModuleFault> {
    args.get_bundle("package")
        .and_then(PackageInfo::from_bundle)
        .ok_or_else(|| ModuleFault::new("scanPackage without a package"))
}

/// Shell and system callers may administer module policy.
pub(crate) fn is_admin_caller(caller: &Credentials) -> bool {
    caller.uid == crate::model::SHELL_UID || caller.uid == crate::model::SYSTEM_UID
}

pub(crate) fn status(word: &str) -> Bundle {
    Bundle::new().with("status", word)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns() {
        assert!(pattern_matches("*", "anything"));
        assert!(pattern_matches("com.example.*", "com.example.a"));
        assert!(!pattern_matches("com.example.*", "org.example"));
        assert!(pattern_matches("SEND", "SEND"));
        assert!(!pattern_matches("SEND", "SENDTO"));
    }

    #[test]
    fn catalog_lists_all_modules() {
        let c = builtin_catalog();
        for e in [
            CHINESE_WALL_ENTRY,
            TYPE_ENFORCEMENT_ENTRY,
            CONTEXT_ENTRY,
            KIRIN_ENTRY,
            SHADOW_ENTRY,
            APPOPS_ENTRY,
            SAINT_ENTRY,
            COMPOSITION_ENTRY,
            APPGUARD_ENTRY,
        ] {
            assert!(c.contains(e), "{e}");
        }
    }
}
