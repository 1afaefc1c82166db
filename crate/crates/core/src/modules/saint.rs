//! Saint-style install-time and runtime policies attached by packages.
//!
//! A package's `attached_policies` bundle may carry two lists:
//!
//! * `runtime`: bundles `{action?, caller_permissions?, caller_package?}`.
//!   A caller reaching this package with a matching action must hold every
//!   listed permission and match the package pattern.
//! * `install`: bundles `{permission, required_permissions?, package_pattern?}`.
//!   A later package requesting `permission` must also request the required
//!   permissions and match the pattern, or its install is rejected.

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::Mutex;
use thiserror::Error;

use crate::bundle::Bundle;
use crate::framework::hooks::{IPC_HOOKS, SCAN_PACKAGE};
use crate::framework::{
    HookCall, ModuleContext, ModuleFault, ModuleManifest, PackageEvent, PolicyDecision, SecurityModule,
};
use crate::model::PackageInfo;

use super::{pattern_matches, scanned_package, CallbackSlot};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed rule: {0}")]
pub struct MalformedRule(pub String);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuntimeRule {
    pub action: Option<String>,
    pub caller_permissions: BTreeSet<String>,
    pub caller_package: Option<String>,
}

impl RuntimeRule {
    /// Whether the rule forbids this caller for this action.
    pub fn violated_by(&self, caller_pkg: &str, caller_perms: &BTreeSet<String>, action: &str) -> bool {
        if self.action.as_ref().is_some_and(|a| a != action) {
            return false;
        }
        !self.caller_permissions.is_subset(caller_perms)
            || self.caller_package.as_ref().is_some_and(|p| !pattern_matches(p, caller_pkg))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstallRule {
    pub permission: String,
    pub required_permissions: BTreeSet<String>,
    pub package_pattern: Option<String>,
}

impl InstallRule {
    pub fn violated_by(&self, pkg: &PackageInfo) -> bool {
        pkg.requested_permissions.contains(&self.permission)
            && (!self.required_permissions.is_subset(&pkg.requested_permissions)
                || self.package_pattern.as_ref().is_some_and(|p| !pattern_matches(p, &pkg.name)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SaintPolicy {
    pub runtime: Vec<RuntimeRule>,
    pub install: Vec<InstallRule>,
}

const RUNTIME_KEYS: [&str; 3] = ["action", "caller_permissions", "caller_package"];
const INSTALL_KEYS: [&str; 3] = ["permission", "required_permissions", "package_pattern"];

fn check_keys(b: &Bundle, allowed: &[&str]) -> Result<(), MalformedRule> {
    match b.keys().find(|k| !allowed.contains(k)) {
        Some(k) => Err(MalformedRule(format!("unknown key `{k}`"))),
        None => Ok(()),
    }
}

fn opt_text(b: &Bundle, key: &str) -> Result<Option<String>, MalformedRule> {
    match b.get(key) {
        None => Ok(None),
        Some(v) => v.as_str().map(|s| Some(s.to_owned())).ok_or_else(|| MalformedRule(format!("`{key}` must be text"))),
    }
}

fn text_set(b: &Bundle, key: &str) -> Result<BTreeSet<String>, MalformedRule> {
    match b.get(key) {
        None => Ok(BTreeSet::new()),
        Some(v) => v
            .as_text_list()
            .map(|l| l.into_iter().collect())
            .ok_or_else(|| MalformedRule(format!("`{key}` must be a text list"))),
    }
}

fn rule_bundles<'a>(policies: &'a Bundle, key: &str) -> Result<Vec<&'a Bundle>, MalformedRule> {
    let Some(v) = policies.get(key) else { return Ok(Vec::new()) };
    let list = v.as_list().ok_or_else(|| MalformedRule(format!("`{key}` must be a list")))?;
    list.iter()
        .map(|r| r.as_bundle().ok_or_else(|| MalformedRule(format!("`{key}` entries must be bundles"))))
        .collect()
}

impl SaintPolicy {
    pub fn parse(policies: &Bundle) -> Result<SaintPolicy, MalformedRule> {
        check_keys(policies, &["runtime", "install"])?;
        let mut out = SaintPolicy::default();
        for r in rule_bundles(policies, "runtime")? {
            check_keys(r, &RUNTIME_KEYS)?;
            let rule = RuntimeRule {
                action: opt_text(r, "action")?,
                caller_permissions: text_set(r, "caller_permissions")?,
                caller_package: opt_text(r, "caller_package")?,
            };
            if rule.caller_permissions.is_empty() && rule.caller_package.is_none() {
                return Err(MalformedRule("runtime rule without conditions".into()));
            }
            out.runtime.push(rule);
        }
        for r in rule_bundles(policies, "install")? {
            check_keys(r, &INSTALL_KEYS)?;
            let permission =
                opt_text(r, "permission")?.ok_or_else(|| MalformedRule("install rule without permission".into()))?;
            out.install.push(InstallRule {
                permission,
                required_permissions: text_set(r, "required_permissions")?,
                package_pattern: opt_text(r, "package_pattern")?,
            });
        }
        Ok(out)
    }
}

/// Install decision for `pkg` against the protections of installed packages.
pub fn saint_install_check(pkg: &PackageInfo, installed: &BTreeMap<String, SaintPolicy>) -> PolicyDecision {
    if let Some(p) = &pkg.attached_policies {
        if let Err(e) = SaintPolicy::parse(p) {
            return PolicyDecision::deny(format!("saint: {e}"));
        }
    }
    for (owner, policy) in installed.iter().filter(|(n, _)| **n != pkg.name) {
        if let Some(rule) = policy.install.iter().find(|r| r.violated_by(pkg)) {
            return PolicyDecision::deny(format!("saint: {owner} protects {}", rule.permission));
        }
    }
    PolicyDecision::Allow
}

pub fn saint_runtime_check(
    callee: &str,
    policy: &SaintPolicy,
    caller_pkg: &str,
    caller_perms: &BTreeSet<String>,
    action: &str,
) -> PolicyDecision {
    match policy.runtime.iter().position(|r| r.violated_by(caller_pkg, caller_perms, action)) {
        Some(i) => PolicyDecision::deny(format!("saint: {callee} runtime rule {i}")),
        None => PolicyDecision::Allow,
    }
}

#[derive(Default)]
pub struct SaintModule {
    policies: Mutex<BTreeMap<String, SaintPolicy>>,
    callbacks: CallbackSlot,
}

impl SaintModule {
    pub fn from_manifest(_manifest: &ModuleManifest) -> Result<SaintModule, ModuleFault> {
        Ok(SaintModule::default())
    }

    fn track(&self, pkg: &PackageInfo) -> Result<(), ModuleFault> {
        let policy = match &pkg.attached_policies {
            Some(b) => SaintPolicy::parse(b).map_err(|e| ModuleFault::new(e.to_string()))?,
            None => SaintPolicy::default(),
        };
        self.policies.lock().insert(pkg.name.clone(), policy);
        Ok(())
    }
}

impl SecurityModule for SaintModule {
    fn init(&self, ctx: &ModuleContext) -> Result<bool, ModuleFault> {
        for p in ctx.callbacks.installed_packages() {
            self.track(&p)?;
        }
        self.callbacks.set(ctx.callbacks.clone());
        Ok(true)
    }

    fn enforce(&self, call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
        if call.id() == SCAN_PACKAGE {
            return Ok(saint_install_check(&scanned_package(call.args)?, &self.policies.lock()));
        }
        if IPC_HOOKS.contains(&call.id()) {
            let callee = call.args.get_str("target_package").unwrap_or_default();
            let Some(policy) = self.policies.lock().get(callee).cloned() else {
                return Ok(PolicyDecision::Allow);
            };
            let caller_pkg = self.callbacks.caller_package(call.creds).unwrap_or_default();
            let perms = self.callbacks.uid_permissions(call.creds.uid);
            let action = call.args.get_bundle("intent").and_then(|i| i.get_str("action")).unwrap_or_default();
            return Ok(saint_runtime_check(callee, &policy, &caller_pkg, &perms, action));
        }
        Ok(PolicyDecision::Allow)
    }

    fn on_package_event(&self, event: &PackageEvent) -> Result<(), ModuleFault> {
        match event {
            PackageEvent::Installed(p) | PackageEvent::Replaced { new: p, .. } => self.track(p),
            PackageEvent::Removed { name, .. } => {
                self.policies.lock().remove(name);
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::List;

    fn runtime(perms: &[&str]) -> Bundle {
        Bundle::new().with(
            "runtime",
            List::of_bundles([Bundle::new().with("caller_permissions", List::of_text(perms.iter().copied()))]),
        )
    }

    #[test]
    fn runtime_permission_condition() {
        let policy = SaintPolicy::parse(&runtime(&["P"])).unwrap();
        let none = BTreeSet::new();
        let has: BTreeSet<String> = ["P".to_owned()].into();
        assert!(saint_runtime_check("callee", &policy, "caller", &none, "A").is_deny());
        assert!(saint_runtime_check("callee", &policy, "caller", &has, "A").is_allow());
    }

    #[test]
    fn malformed_payload_rejects_install() {
        let bad = PackageInfo::new("x").with_policies(Bundle::new().with("runtime", 7i64));
        assert!(saint_install_check(&bad, &BTreeMap::new()).is_deny());
        let unknown = PackageInfo::new("y").with_policies(Bundle::new().with("weird", true));
        assert!(saint_install_check(&unknown, &BTreeMap::new()).is_deny());
    }

    #[test]
    fn install_protection() {
        let owner = Bundle::new().with(
            "install",
            List::of_bundles([Bundle::new().with("permission", "com.bank.USE").with("package_pattern", "com.bank.*")]),
        );
        let installed = BTreeMap::from([("com.bank.app".to_owned(), SaintPolicy::parse(&owner).unwrap())]);
        let rogue = PackageInfo::new("org.rogue").with_permissions(["com.bank.USE"]);
        let ok = PackageInfo::new("com.bank.helper").with_permissions(["com.bank.USE"]);
        assert!(saint_install_check(&rogue, &installed).is_deny());
        assert!(saint_install_check(&ok, &installed).is_allow());
    }
}
