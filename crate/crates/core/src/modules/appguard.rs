//! Selects apps for inlined monitoring and hands their monitor its policy.

use std::collections::BTreeSet;

use serde::Deserialize;

use crate::bundle::{Bundle, List, Value};
use crate::framework::hooks::INSTRUMENT_APP;
use crate::framework::{unsupported_response, HookCall, ModuleFault, ModuleManifest, PolicyDecision, SecurityModule};
use crate::irm::monitors::APPGUARD_MONITOR;
use crate::irm::MethodRef;
use crate::model::{Credentials, SYSTEM_UID};

use super::{parse_config, pattern_matches, status};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AppGuardConfig {
    /// Package patterns to instrument.
    #[serde(default)]
    packages: Vec<String>,
    #[serde(default = "yes")]
    https_upgrade: bool,
    #[serde(default)]
    deny_methods: BTreeSet<String>,
}

fn yes() -> bool {
    true
}

impl Default for AppGuardConfig {
    fn default() -> Self {
        AppGuardConfig { packages: Vec::new(), https_upgrade: true, deny_methods: BTreeSet::new() }
    }
}

pub struct AppGuardModule {
    packages: Vec<String>,
    policy: Bundle,
}

impl AppGuardModule {
    pub fn from_manifest(manifest: &ModuleManifest) -> Result<AppGuardModule, ModuleFault> {
        let cfg: AppGuardConfig = parse_config(manifest)?;
        for m in &cfg.deny_methods {
            MethodRef::parse(m).map_err(|e| ModuleFault::new(e.to_string()))?;
        }
        let policy = Bundle::new()
            .with("https_upgrade", cfg.https_upgrade)
            .with("deny_methods", List::of_text(cfg.deny_methods));
        Ok(AppGuardModule { packages: cfg.packages, policy })
    }

    fn selects(&self, package: &str) -> bool {
        self.packages.iter().any(|p| pattern_matches(p, package))
    }
}

impl SecurityModule for AppGuardModule {
    fn enforce(&self, call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
        if call.id() == INSTRUMENT_APP && self.selects(call.args.get_str("package").unwrap_or_default()) {
            return Ok(PolicyDecision::Edit(Value::from(APPGUARD_MONITOR)));
        }
        Ok(PolicyDecision::Allow)
    }

    fn call_module(&self, caller: &Credentials, request: &Bundle) -> Result<Bundle, ModuleFault> {
        if request.get_str("cmd") != Some("monitorPolicy") {
            return Ok(unsupported_response());
        }
        if caller.uid != SYSTEM_UID {
            return Ok(status("denied"));
        }
        let pkg = request.get_str("package").unwrap_or_default();
        if request.get_str("monitor") != Some(APPGUARD_MONITOR) || !self.selects(pkg) {
            return Ok(unsupported_response());
        }
        Ok(status("ok").with("policy", self.policy.clone()))
    }
}
