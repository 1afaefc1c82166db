//! Location-context access control (CRePE style).

use std::path::PathBuf;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::framework::hooks::{CHECK_COMPONENT_PERMISSION, REPORT_LOCATION};
use crate::framework::{
    unsupported_response, HookCall, ModuleContext, ModuleFault, ModuleManifest, PolicyDecision, SecurityModule,
};
use crate::model::{Credentials, LocationFix, FIRST_APP_UID};

use super::{is_admin_caller, parse_config, status};

pub const DEFAULT_CONTEXT: &str = "default";
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance in meters.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub latitude: f64,
    pub longitude: f64,
    pub radius_m: f64,
}

impl Region {
    pub fn contains(&self, fix: &LocationFix) -> bool {
        haversine_m(self.latitude, self.longitude, fix.latitude, fix.longitude) <= self.radius_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grant {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrantRule {
    pub context: String,
    /// Hook id, or a permission name for component permission checks.
    pub key: String,
    pub decision: Grant,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextPolicy {
    #[serde(default)]
    pub regions: Vec<Region>,
    #[serde(default)]
    pub grants: Vec<GrantRule>,
}

impl ContextPolicy {
    /// Name of the first declared region containing the fix.
    pub fn context_for(&self, fix: &LocationFix) -> &str {
        self.regions.iter().find(|r| r.contains(fix)).map_or(DEFAULT_CONTEXT, |r| r.name.as_str())
    }

    fn grant(&self, context: &str, key: &str) -> Option<Grant> {
        self.grants.iter().find(|g| g.context == context && g.key == key).map(|g| g.decision)
    }

    /// Active context's grant, then the default context's, then allow.
    pub fn lookup(&self, active: &str, key: &str) -> Grant {
        self.grant(active, key).or_else(|| self.grant(DEFAULT_CONTEXT, key)).unwrap_or(Grant::Allow)
    }

    fn validate(&self) -> Result<(), String> {
        for r in &self.regions {
            let fix = LocationFix::new(r.latitude, r.longitude, 0);
            if !fix.is_valid() || !(r.radius_m.is_finite() && r.radius_m >= 0.0) {
                return Err(format!("invalid region `{}`", r.name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextConfig {
    #[serde(default)]
    regions: Vec<Region>,
    #[serde(default)]
    grants: Vec<GrantRule>,
    /// Policy persisted here on shutdown and preferred on init when present.
    #[serde(default)]
    store_path: Option<PathBuf>,
}

struct ContextState {
    policy: ContextPolicy,
    active: String,
    last_fix: Option<LocationFix>,
}

/// Tracks the active context from location reports and gates app access
/// per context. Policy can be replaced at runtime through `call_module`.
pub struct ContextModule {
    state: Mutex<ContextState>,
    store_path: Option<PathBuf>,
}

impl ContextModule {
    pub fn new(policy: ContextPolicy) -> ContextModule {
        ContextModule {
            state: Mutex::new(ContextState { policy, active: DEFAULT_CONTEXT.to_owned(), last_fix: None }),
            store_path: None,
        }
    }

    pub fn from_manifest(manifest: &ModuleManifest) -> Result<ContextModule, ModuleFault> {
        let cfg: ContextConfig = parse_config(manifest)?;
        let policy = ContextPolicy { regions: cfg.regions, grants: cfg.grants };
        policy.validate().map_err(ModuleFault::new)?;
        let mut m = ContextModule::new(policy);
        m.store_path = cfg.store_path;
        Ok(m)
    }

    pub fn active_context(&self) -> String {
        self.state.lock().active.clone()
    }

    /// Updates the active context; returns its name.
    pub fn update(&self, fix: &LocationFix) -> String {
        let mut st = self.state.lock();
        st.active = st.policy.context_for(fix).to_owned();
        st.last_fix = Some(*fix);
        st.active.clone()
    }

    pub fn check(&self, key: &str) -> Grant {
        let st = self.state.lock();
        st.policy.lookup(&st.active, key)
    }

    fn set_policy(&self, policy: ContextPolicy) {
        let mut st = self.state.lock();
        st.policy = policy;
        let fix = st.last_fix;
        st.active = fix.map_or(DEFAULT_CONTEXT.to_owned(), |f| st.policy.context_for(&f).to_owned());
    }
}

impl SecurityModule for ContextModule {
    fn init(&self, _ctx: &ModuleContext) -> Result<bool, ModuleFault> {
        if let Some(path) = self.store_path.as_ref().filter(|p| p.exists()) {
            let text = std::fs::read_to_string(path).map_err(|e| ModuleFault::new(e.to_string()))?;
            let policy: ContextPolicy = serde_json::from_str(&text).map_err(|e| ModuleFault::new(e.to_string()))?;
            policy.validate().map_err(ModuleFault::new)?;
            self.set_policy(policy);
        }
        Ok(true)
    }

    fn shutdown(&self) -> Result<(), ModuleFault> {
        if let Some(path) = &self.store_path {
            let text =
                serde_json::to_string_pretty(&self.state.lock().policy).map_err(|e| ModuleFault::new(e.to_string()))?;
            std::fs::write(path, text).map_err(|e| ModuleFault::new(e.to_string()))?;
        }
        Ok(())
    }

    fn enforce(&self, call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
        if call.id() == REPORT_LOCATION {
            if let Some(fix) = call.candidate.and_then(LocationFix::from_value) {
                self.update(&fix);
            }
            return Ok(PolicyDecision::Allow);
        }
        if call.creds.uid < FIRST_APP_UID {
            return Ok(PolicyDecision::Allow);
        }
        let key = if call.id() == CHECK_COMPONENT_PERMISSION {
            call.args.get_str("permission").unwrap_or_default()
        } else {
            call.id()
        };
        Ok(match self.check(key) {
            Grant::Allow => PolicyDecision::Allow,
            Grant::Deny => PolicyDecision::deny(format!("context {} denies {key}", self.active_context())),
        })
    }

    fn call_module(&self, caller: &Credentials, request: &Bundle) -> Result<Bundle, ModuleFault> {
        let cmd = request.get_str("cmd").unwrap_or_default();
        if !matches!(cmd, "setPolicy" | "getPolicy" | "getContext") {
            return Ok(unsupported_response());
        }
        if !is_admin_caller(caller) {
            return Ok(status("denied").with("reason", "caller may not administer context policy"));
        }
        match cmd {
            "setPolicy" => {
                let raw = request
                    .get_str("policy")
                    .ok_or_else(|| ModuleFault::new("setPolicy needs a `policy` JSON text"))?;
                let policy: ContextPolicy = match serde_json::from_str(raw) {
                    Ok(p) => p,
                    Err(e) => return Ok(status("error").with("reason", e.to_string())),
                };
                if let Err(e) = policy.validate() {
                    return Ok(status("error").with("reason", e));
                }
                self.set_policy(policy);
                Ok(status("ok").with("context", self.active_context()))
            }
            "getPolicy" => {
                let text =
                    serde_json::to_string(&self.state.lock().policy).map_err(|e| ModuleFault::new(e.to_string()))?;
                Ok(status("ok").with("policy", text))
            }
            _ => Ok(status("ok").with("context", self.active_context())),
        }
    }
}
