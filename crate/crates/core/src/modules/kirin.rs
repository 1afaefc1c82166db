//! Install-time permission rules (Kirin style).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::framework::hooks::SCAN_PACKAGE;
use crate::framework::{HookCall, ModuleFault, ModuleManifest, PolicyDecision, SecurityModule};
use crate::model::PackageInfo;

use super::{parse_config, scanned_package};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallRule {
    pub permissions: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receiver_action: Option<String>,
}

impl InstallRule {
    pub fn new<S: Into<String>>(perms: impl IntoIterator<Item = S>) -> InstallRule {
        InstallRule { permissions: perms.into_iter().map(Into::into).collect(), receiver_action: None }
    }

    pub fn with_receiver(mut self, action: &str) -> InstallRule {
        self.receiver_action = Some(action.to_owned());
        self
    }

    pub fn matches(&self, pkg: &PackageInfo) -> bool {
        self.permissions.is_subset(&pkg.requested_permissions)
            && self.receiver_action.as_ref().is_none_or(|a| pkg.receiver_actions().any(|r| r == a))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallRuleSet {
    #[serde(default)]
    pub rules: Vec<InstallRule>,
}

impl InstallRuleSet {
    /// Index of the first matching rule.
    pub fn first_violation(&self, pkg: &PackageInfo) -> Option<usize> {
        self.rules.iter().position(|r| r.matches(pkg))
    }

    pub fn check(&self, pkg: &PackageInfo) -> PolicyDecision {
        match self.first_violation(pkg) {
            Some(i) => PolicyDecision::deny(format!("install rule {i} violated")),
            None => PolicyDecision::Allow,
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self.rules.iter().position(|r| r.permissions.is_empty() && r.receiver_action.is_none()) {
            Some(i) => Err(format!("install rule {i} is empty")),
            None => Ok(()),
        }
    }
}

pub struct KirinModule {
    rules: InstallRuleSet,
}

impl KirinModule {
    pub fn new(rules: InstallRuleSet) -> KirinModule {
        KirinModule { rules }
    }

    pub fn from_manifest(manifest: &ModuleManifest) -> Result<KirinModule, ModuleFault> {
        let rules: InstallRuleSet = parse_config(manifest)?;
        rules.validate().map_err(ModuleFault::new)?;
        Ok(KirinModule::new(rules))
    }
}

impl SecurityModule for KirinModule {
    fn enforce(&self, call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
        if call.id() != SCAN_PACKAGE {
            return Ok(PolicyDecision::Allow);
        }
        Ok(self.rules.check(&scanned_package(call.args)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Component, ComponentKind};

    #[test]
    fn subset_match_and_receiver_condition() {
        let set = InstallRuleSet {
            rules: vec![
                InstallRule::new(["RECEIVE_SMS", "INTERNET"]),
                InstallRule::new(["INTERNET"]).with_receiver("BOOT_COMPLETED"),
            ],
        };
        let both = PackageInfo::new("a").with_permissions(["RECEIVE_SMS", "INTERNET", "CAMERA"]);
        assert_eq!(set.first_violation(&both), Some(0));
        let net = PackageInfo::new("b").with_permissions(["INTERNET"]);
        assert_eq!(set.first_violation(&net), None);
        let boot =
            net.clone().with_component(Component::new(ComponentKind::Receiver, "R").with_actions(["BOOT_COMPLETED"]));
        assert_eq!(set.first_violation(&boot), Some(1));
    }

    #[test]
    fn empty_rule_is_rejected() {
        let m = ModuleManifest::new("k", crate::modules::KIRIN_ENTRY)
            .with_config(serde_json::json!({"rules":[{"permissions":[]}]}));
        assert!(KirinModule::from_manifest(&m).is_err());
    }
}
