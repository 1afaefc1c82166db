//! Stacks several modules behind the single module slot.

use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::framework::{
    unsupported_response, Consultation, HookCall, LoadEnv, ModuleContext, ModuleFault, ModuleHandle, ModuleManifest,
    PackageEvent, PolicyDecision, SecurityModule, MODULE_FAULT_PREFIX,
};
use crate::model::Credentials;

use super::parse_config;

pub const EDIT_CONFLICT: &str = "edit-conflict";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Consensus,
    Priority,
}

/// Reconciles child votes in child order.
pub fn combine(strategy: Strategy, votes: &[PolicyDecision]) -> PolicyDecision {
    match strategy {
        Strategy::Consensus => {
            if let Some(d) = votes.iter().find(|d| d.is_deny()) {
                return d.clone();
            }
            let mut edits = votes.iter().filter(|d| matches!(d, PolicyDecision::Edit(_)));
            match (edits.next(), edits.next()) {
                (Some(e), None) => e.clone(),
                (Some(_), Some(_)) => PolicyDecision::Deny(EDIT_CONFLICT.to_owned()),
                _ => PolicyDecision::Allow,
            }
        }
        Strategy::Priority => votes.iter().find(|d| !d.is_allow()).cloned().unwrap_or(PolicyDecision::Allow),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
struct CompositionConfig {
    #[serde(default)]
    strategy: Strategy,
    children: Vec<serde_json::Value>,
}

/// Children are consulted only at hooks they declare themselves; lifecycle
/// calls and package events fan out to every child in order.
pub struct CompositionModule {
    strategy: Strategy,
    children: Vec<ModuleHandle>,
}

impl CompositionModule {
    pub fn new(strategy: Strategy, children: Vec<ModuleHandle>) -> Result<CompositionModule, ModuleFault> {
        if children.is_empty() {
            return Err(ModuleFault::new("composition needs at least one child"));
        }
        Ok(CompositionModule { strategy, children })
    }

    pub fn from_manifest(manifest: &ModuleManifest, env: &LoadEnv<'_>) -> Result<CompositionModule, ModuleFault> {
        let cfg: CompositionConfig = parse_config(manifest)?;
        let mut children = Vec::new();
        for raw in cfg.children {
            let child: ModuleManifest =
                serde_json::from_value(raw).map_err(|e| ModuleFault::new(format!("invalid child manifest: {e}")))?;
            for h in child.declared_hooks.iter().filter(|h| !manifest.declared_hooks.contains(h)) {
                log::warn!(
                    "child {} declares {h} but {} does not; it will not be reached there",
                    child.name,
                    manifest.name
                );
            }
            let handle = env.catalog.instantiate(&child, env.hooks).map_err(|e| ModuleFault::new(e.to_string()))?;
            children.push(handle);
        }
        CompositionModule::new(cfg.strategy, children)
    }

    pub fn children(&self) -> &[ModuleHandle] {
        &self.children
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }
}

impl SecurityModule for CompositionModule {
    fn init(&self, ctx: &ModuleContext) -> Result<bool, ModuleFault> {
        for c in &self.children {
            if !c.init(ctx.callbacks.clone()).map_err(|e| ModuleFault::new(e.to_string()))? {
                log::warn!("child {} refused init and will be bypassed", c.name());
            }
        }
        Ok(true)
    }

    fn shutdown(&self) -> Result<(), ModuleFault> {
        let mut first_err = None;
        for c in self.children.iter().filter(|c| c.is_initialized()) {
            if let Err(e) = c.shutdown() {
                first_err.get_or_insert(ModuleFault::new(e.to_string()));
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    fn enforce(&self, call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
        let truncation = call.hook.category.is_truncation();
        let votes: Vec<PolicyDecision> = self
            .children
            .iter()
            .filter_map(|c| match c.consult(call) {
                Consultation::Bypassed => None,
                Consultation::Decided(PolicyDecision::Edit(_)) if truncation => {
                    Some(PolicyDecision::Deny(format!("{MODULE_FAULT_PREFIX}edit-on-truncation-hook")))
                }
                Consultation::Decided(d) => Some(d),
            })
            .collect();
        Ok(combine(self.strategy, &votes))
    }

    fn on_package_event(&self, event: &PackageEvent) -> Result<(), ModuleFault> {
        for c in &self.children {
            c.deliver_event(event);
        }
        Ok(())
    }

    /// Routes to the child named by `child`, else to the first child that
    /// understands the request.
    fn call_module(&self, caller: &Credentials, request: &Bundle) -> Result<Bundle, ModuleFault> {
        if let Some(name) = request.get_str("child") {
            let c = self
                .children
                .iter()
                .find(|c| c.name() == name)
                .ok_or_else(|| ModuleFault::new(format!("no child named {name}")))?;
            return c.call(caller, request);
        }
        for c in self.children.iter().filter(|c| c.is_initialized()) {
            let resp = c.call(caller, request)?;
            if resp.get_str("status") != Some("unsupported") {
                return Ok(resp);
            }
        }
        Ok(unsupported_response())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::Value;

    fn edit(x: i64) -> PolicyDecision {
        PolicyDecision::Edit(Value::Int(x))
    }

    #[test]
    fn consensus_rules() {
        use PolicyDecision::Allow;
        let deny = PolicyDecision::Deny("no".into());
        assert_eq!(combine(Strategy::Consensus, &[Allow, deny.clone()]), deny);
        assert_eq!(combine(Strategy::Consensus, &[Allow, edit(1)]), edit(1));
        assert_eq!(combine(Strategy::Consensus, &[edit(1), edit(2)]), PolicyDecision::Deny(EDIT_CONFLICT.into()));
        assert_eq!(combine(Strategy::Consensus, &[]), Allow);
    }

    #[test]
    fn priority_first_non_allow() {
        let deny = PolicyDecision::Deny("no".into());
        assert_eq!(combine(Strategy::Priority, &[PolicyDecision::Allow, edit(7), deny]), edit(7));
    }
}
