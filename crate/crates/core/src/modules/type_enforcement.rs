//! Middleware type enforcement (FlaskDroid style).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{List, Value};
use crate::framework::hooks::*;
use crate::framework::{
    HookCall, HookCategory, ModuleContext, ModuleFault, ModuleManifest, PolicyDecision, SecurityModule,
};
use crate::model::Credentials;

use super::{parse_config, CallbackSlot};

pub const MAC_DENY_REASON: &str = "Denied by MAC policy";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("uid {0} has no security type")]
pub struct UnmappedUid(pub u32);

/// One middleware allow rule.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TeRule {
    pub subject: String,
    pub object: String,
    pub class: String,
    pub op: String,
}

impl TeRule {
    pub fn new(subject: &str, object: &str, class: &str, op: &str) -> TeRule {
        TeRule { subject: subject.into(), object: object.into(), class: class.into(), op: op.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TePolicy {
    #[serde(default)]
    pub rules: BTreeSet<TeRule>,
    #[serde(default)]
    pub uid_types: BTreeMap<u32, String>,
    #[serde(default)]
    pub package_overrides: BTreeMap<String, String>,
}

impl TePolicy {
    pub fn with_rule(mut self, rule: TeRule) -> TePolicy {
        self.rules.insert(rule);
        self
    }

    /// Subject type of a process: its package's override wins over the
    /// uid's entry, so packages sharing a uid may be typed apart.
    pub fn label_for(&self, uid: u32, package: Option<&str>) -> Result<&str, UnmappedUid> {
        package
            .and_then(|p| self.package_overrides.get(p))
            .or_else(|| self.uid_types.get(&uid))
            .map(String::as_str)
            .ok_or(UnmappedUid(uid))
    }

    pub fn allows(&self, subject: &str, object: &str, class: &str, op: &str) -> bool {
        // Avoids allocating a probe rule per check.
        self.rules.iter().any(|r| r.subject == subject && r.object == object && r.class == class && r.op == op)
    }

    pub fn check(&self, subject: &str, object: &str, class: &str, op: &str) -> PolicyDecision {
        if self.allows(subject, object, class, op) {
            PolicyDecision::Allow
        } else {
            PolicyDecision::Deny(MAC_DENY_REASON.to_owned())
        }
    }

    /// Full check from a uid. Unmapped subjects are denied.
    pub fn check_uid(&self, uid: u32, package: Option<&str>, object: &str, class: &str, op: &str) -> PolicyDecision {
        match self.label_for(uid, package) {
            Ok(subject) => self.check(subject, object, class, op),
            Err(_) => PolicyDecision::Deny(MAC_DENY_REASON.to_owned()),
        }
    }
}

/// Object a hook is checked against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookObject {
    pub object: String,
    pub class: String,
    pub op: String,
}

fn service_object(object: &str, op: &str) -> HookObject {
    HookObject { object: object.into(), class: "service".into(), op: op.into() }
}

/// Default mapping from hooks to middleware objects.
pub fn default_hook_map() -> BTreeMap<String, HookObject> {
    [
        (GET_ALL_PROVIDERS, service_object("locationService_c", "getAllProviders")),
        (GET_LAST_LOCATION, service_object("locationService_c", "getLastLocation")),
        (REQUEST_LOCATION_UPDATES, service_object("locationService_c", "requestLocationUpdates")),
        (GET_DEVICE_ID, service_object("phoneSubInfo_c", "getDeviceId")),
        (GET_PRIMARY_CLIP, service_object("clipboardService_c", "getPrimaryClip")),
        (SET_PRIMARY_CLIP, service_object("clipboardService_c", "setPrimaryClip")),
    ]
    .into_iter()
    .map(|(h, o)| (h.to_owned(), o))
    .collect()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TeConfig {
    #[serde(default)]
    rules: Vec<TeRule>,
    #[serde(default)]
    uid_types: BTreeMap<u32, String>,
    #[serde(default)]
    package_overrides: BTreeMap<String, String>,
    #[serde(default)]
    hook_objects: BTreeMap<String, HookObject>,
    /// Answer denied list queries with an empty list instead of an error.
    #[serde(default)]
    empty_list_on_deny: bool,
}

/// Checks service hooks against their mapped objects, component IPC against
/// the callee's type (classes `broadcast`, `activity`, `service`), and
/// content queries against `<store>_provider` objects.
pub struct TypeEnforcementModule {
    policy: TePolicy,
    hook_objects: BTreeMap<String, HookObject>,
    empty_list_on_deny: bool,
    callbacks: CallbackSlot,
}

impl TypeEnforcementModule {
    pub fn new(policy: TePolicy) -> TypeEnforcementModule {
        TypeEnforcementModule {
            policy,
            hook_objects: default_hook_map(),
            empty_list_on_deny: false,
            callbacks: CallbackSlot::default(),
        }
    }

    pub fn from_manifest(manifest: &ModuleManifest) -> Result<TypeEnforcementModule, ModuleFault> {
        let cfg: TeConfig = parse_config(manifest)?;
        let policy = TePolicy {
            rules: cfg.rules.into_iter().collect(),
            uid_types: cfg.uid_types,
            package_overrides: cfg.package_overrides,
        };
        let mut m = TypeEnforcementModule::new(policy);
        m.hook_objects.extend(cfg.hook_objects);
        m.empty_list_on_deny = cfg.empty_list_on_deny;
        Ok(m)
    }

    pub fn policy(&self) -> &TePolicy {
        &self.policy
    }

    fn subject(&self, creds: &Credentials) -> Option<String> {
        let pkg = self.callbacks.caller_package(creds);
        self.policy.label_for(creds.uid, pkg.as_deref()).ok().map(str::to_owned)
    }

    fn ipc_object(&self, call: &HookCall<'_>) -> Result<HookObject, ModuleFault> {
        let uid = call.args.get_int("target_uid").ok_or_else(|| ModuleFault::new("target_uid missing"))? as u32;
        let pkg = call.args.get_str("target_package");
        let object = self.policy.label_for(uid, pkg).unwrap_or("unlabeled_t").to_owned();
        let (class, op) = match call.id() {
            DELIVER_TO_RECEIVER => ("broadcast", "receive"),
            START_ACTIVITY => ("activity", "start"),
            _ => ("service", "bind"),
        };
        Ok(HookObject { object, class: class.into(), op: op.into() })
    }

    fn object_for(&self, call: &HookCall<'_>) -> Result<Option<HookObject>, ModuleFault> {
        let id = call.id();
        if let Some(o) = self.hook_objects.get(id) {
            return Ok(Some(o.clone()));
        }
        if IPC_HOOKS.contains(&id) {
            return self.ipc_object(call).map(Some);
        }
        if id == PRE_QUERY {
            let store = call.args.get_str("store").unwrap_or_default();
            return Ok(Some(HookObject {
                object: format!("{store}_provider"),
                class: "provider".into(),
                op: "query".into(),
            }));
        }
        Ok(None)
    }
}

impl SecurityModule for TypeEnforcementModule {
    fn init(&self, ctx: &ModuleContext) -> Result<bool, ModuleFault> {
        self.callbacks.set(ctx.callbacks.clone());
        Ok(true)
    }

    fn enforce(&self, call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
        let Some(obj) = self.object_for(call)? else {
            return Ok(PolicyDecision::Allow);
        };
        let decision = match self.subject(call.creds) {
            Some(s) => self.policy.check(&s, &obj.object, &obj.class, &obj.op),
            None => PolicyDecision::Deny(MAC_DENY_REASON.to_owned()),
        };
        if decision.is_deny() && self.empty_list_on_deny && call.hook.category == HookCategory::ListFilter {
            return Ok(PolicyDecision::Edit(Value::List(List::empty())));
        }
        Ok(decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy() -> TePolicy {
        let mut p = TePolicy::default().with_rule(TeRule::new(
            "trusted_app_t",
            "locationService_c",
            "service",
            "getAllProviders",
        ));
        p.uid_types.insert(10000, "trusted_app_t".into());
        p.uid_types.insert(10001, "untrusted_app_t".into());
        p.uid_types.insert(10005, "type_a".into());
        p.package_overrides.insert("p1".into(), "type_a".into());
        p.package_overrides.insert("p2".into(), "type_b".into());
        p
    }

    #[test]
    fn rule_lookup() {
        let p = policy();
        assert!(p.check_uid(10000, None, "locationService_c", "service", "getAllProviders").is_allow());
        assert_eq!(
            p.check_uid(10001, None, "locationService_c", "service", "getAllProviders"),
            PolicyDecision::Deny(MAC_DENY_REASON.into())
        );
        assert_eq!(
            p.check_uid(4242, None, "locationService_c", "service", "getAllProviders"),
            PolicyDecision::Deny(MAC_DENY_REASON.into())
        );
    }

    #[test]
    fn shared_uid_packages_typed_apart() {
        let p = policy();
        assert_eq!(p.label_for(10005, Some("p1")).unwrap(), "type_a");
        assert_eq!(p.label_for(10005, Some("p2")).unwrap(), "type_b");
        assert_eq!(p.label_for(10000, Some("other")).unwrap(), "trusted_app_t");
        assert_eq!(p.label_for(3, None).unwrap_err(), UnmappedUid(3));
    }
}
