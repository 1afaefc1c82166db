//! AppOps operation map plus IntentFirewall rules.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, List};
use crate::framework::hooks::*;
use crate::framework::{
    unsupported_response, HookCall, ModuleContext, ModuleFault, ModuleManifest, PolicyDecision, SecurityModule,
};
use crate::model::Credentials;

use super::{parse_config, pattern_matches, status, CallbackSlot};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpEntry {
    pub uid: u32,
    pub package: String,
    pub ops: BTreeSet<String>,
}

/// Allowed operations per (uid, package). Unlisted pairs may do anything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpMap(BTreeMap<(u32, String), BTreeSet<String>>);

impl OpMap {
    pub fn from_entries(entries: impl IntoIterator<Item = OpEntry>) -> OpMap {
        let mut m = BTreeMap::new();
        for e in entries {
            m.entry((e.uid, e.package)).or_insert_with(BTreeSet::new).extend(e.ops);
        }
        OpMap(m)
    }

    pub fn allows(&self, uid: u32, package: &str, op: &str) -> bool {
        self.0.get(&(uid, package.to_owned())).is_none_or(|ops| ops.contains(op))
    }

    pub fn to_bundle(&self) -> Bundle {
        let entries = self.0.iter().map(|((uid, pkg), ops)| {
            Bundle::new()
                .with("uid", *uid)
                .with("package", pkg.as_str())
                .with("ops", List::of_text(ops.iter().cloned()))
        });
        Bundle::new().with("entries", List::of_bundles(entries))
    }
}

/// Literal or `*` patterns over caller package, action and target component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirewallRule {
    #[serde(default = "any")]
    pub caller: String,
    #[serde(default = "any")]
    pub action: String,
    #[serde(default = "any")]
    pub component: String,
}

fn any() -> String {
    "*".to_owned()
}

impl FirewallRule {
    pub fn new(caller: &str, action: &str, component: &str) -> FirewallRule {
        FirewallRule { caller: caller.into(), action: action.into(), component: component.into() }
    }

    pub fn matches(&self, caller: &str, action: &str, component: &str) -> bool {
        pattern_matches(&self.caller, caller)
            && pattern_matches(&self.action, action)
            && pattern_matches(&self.component, component)
    }
}

/// Denies iff some rule matches.
pub fn intent_firewall_check(rules: &[FirewallRule], caller: &str, action: &str, component: &str) -> PolicyDecision {
    match rules.iter().position(|r| r.matches(caller, action, component)) {
        Some(i) => PolicyDecision::deny(format!("intent firewall rule {i}")),
        None => PolicyDecision::Allow,
    }
}

/// Operation names for the hooks the op map covers.
pub fn default_hook_ops() -> BTreeMap<String, String> {
    [
        (GET_LAST_LOCATION, "FINE_LOCATION"),
        (REQUEST_LOCATION_UPDATES, "FINE_LOCATION"),
        (GET_DEVICE_ID, "READ_PHONE_STATE"),
        (GET_PRIMARY_CLIP, "READ_CLIPBOARD"),
        (SET_PRIMARY_CLIP, "WRITE_CLIPBOARD"),
        (PRE_QUERY, "READ_CONTENT"),
    ]
    .into_iter()
    .map(|(h, o)| (h.to_owned(), o.to_owned()))
    .collect()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AppOpsConfig {
    #[serde(default)]
    opmap: Vec<OpEntry>,
    #[serde(default)]
    firewall: Vec<FirewallRule>,
    #[serde(default)]
    hook_ops: BTreeMap<String, String>,
}

pub struct AppOpsModule {
    opmap: OpMap,
    firewall: Vec<FirewallRule>,
    hook_ops: BTreeMap<String, String>,
    callbacks: CallbackSlot,
}

impl AppOpsModule {
    pub fn new(opmap: OpMap, firewall: Vec<FirewallRule>) -> AppOpsModule {
        AppOpsModule { opmap, firewall, hook_ops: default_hook_ops(), callbacks: CallbackSlot::default() }
    }

    pub fn from_manifest(manifest: &ModuleManifest) -> Result<AppOpsModule, ModuleFault> {
        let cfg: AppOpsConfig = parse_config(manifest)?;
        let mut m = AppOpsModule::new(OpMap::from_entries(cfg.opmap), cfg.firewall);
        m.hook_ops.extend(cfg.hook_ops);
        Ok(m)
    }
}

impl SecurityModule for AppOpsModule {
    fn init(&self, ctx: &ModuleContext) -> Result<bool, ModuleFault> {
        self.callbacks.set(ctx.callbacks.clone());
        Ok(true)
    }

    fn enforce(&self, call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
        let caller = self.callbacks.caller_package(call.creds).unwrap_or_default();
        if IPC_HOOKS.contains(&call.id()) {
            let action = call.args.get_bundle("intent").and_then(|i| i.get_str("action")).unwrap_or_default();
            let component = call.args.get_str("target_component").unwrap_or_default();
            return Ok(intent_firewall_check(&self.firewall, &caller, action, component));
        }
        if let Some(op) = self.hook_ops.get(call.id()) {
            if !self.opmap.allows(call.creds.uid, &caller, op) {
                return Ok(PolicyDecision::deny(format!("appops: {op} not allowed for {caller}")));
            }
        }
        Ok(PolicyDecision::Allow)
    }

    fn call_module(&self, _caller: &Credentials, request: &Bundle) -> Result<Bundle, ModuleFault> {
        match request.get_str("cmd") {
            Some("getOps") => Ok(status("ok").with("opmap", self.opmap.to_bundle())),
            Some("getFirewall") => {
                let rules = self.firewall.iter().map(|r| {
                    Bundle::new()
                        .with("caller", r.caller.as_str())
                        .with("action", r.action.as_str())
                        .with("component", r.component.as_str())
                });
                Ok(status("ok").with("rules", List::of_bundles(rules)))
            }
            _ => Ok(unsupported_response()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opmap_default_allows_unlisted() {
        let m = OpMap::from_entries([OpEntry {
            uid: 10000,
            package: "a".into(),
            ops: ["READ_CLIPBOARD".to_owned()].into(),
        }]);
        assert!(m.allows(10000, "a", "READ_CLIPBOARD"));
        assert!(!m.allows(10000, "a", "FINE_LOCATION"));
        assert!(m.allows(10001, "b", "FINE_LOCATION"));
        let b = m.to_bundle();
        assert_eq!(b.get_list("entries").unwrap().len(), 1);
    }

    #[test]
    fn firewall_patterns() {
        let rules = [FirewallRule::new("*", "SEND", "x/Comp")];
        assert!(intent_firewall_check(&rules, "any.pkg", "SEND", "x/Comp").is_deny());
        assert!(intent_firewall_check(&rules, "any.pkg", "VIEW", "x/Comp").is_allow());
    }
}
