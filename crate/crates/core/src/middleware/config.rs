//! Stack configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::Value;
use crate::kernel::KernelPolicy;
use crate::model::{LocationFix, PackageInfo, ResultSet};

pub const DEFAULT_DEVICE_ID: &str = "490154203237518";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentStoreConfig {
    pub name: String,
    pub columns: Vec<String>,
    /// Rows as plain JSON scalars, one per column.
    #[serde(default)]
    pub rows: Vec<Vec<serde_json::Value>>,
}

impl ContentStoreConfig {
    pub fn to_result_set(&self) -> Result<ResultSet, String> {
        let rows = self
            .rows
            .iter()
            .map(|row| row.iter().map(|v| Value::from_plain_json(v).map_err(|e| e.to_string())).collect())
            .collect::<Result<Vec<Vec<Value>>, String>>()?;
        ResultSet::new(self.columns.clone(), rows).map_err(|e| format!("store `{}`: {e}", self.name))
    }
}

/// Kernel policy given inline or as a path relative to the stack config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelPolicySource {
    Path(String),
    Inline(KernelPolicy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    #[serde(default = "default_device_id")]
    pub device_id: String,
    /// The first fix becomes the service's current fix.
    #[serde(default)]
    pub location_seed: Vec<LocationFix>,
    #[serde(default = "default_providers")]
    pub providers: Vec<String>,
    #[serde(default)]
    pub content_stores: Vec<ContentStoreConfig>,
    #[serde(default)]
    pub preinstalled_packages: Vec<PackageInfo>,
    /// Absent means no kernel module (pass-through).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_policy: Option<KernelPolicySource>,
}

fn default_device_id() -> String {
    DEFAULT_DEVICE_ID.to_owned()
}

fn default_providers() -> Vec<String> {
    vec!["gps".to_owned(), "network".to_owned()]
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            device_id: default_device_id(),
            location_seed: Vec::new(),
            providers: default_providers(),
            content_stores: Vec::new(),
            preinstalled_packages: Vec::new(),
            kernel_policy: None,
        }
    }
}

impl StackConfig {
    pub fn from_json(text: &str) -> Result<StackConfig, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Reads a config file and inlines a path-valued kernel policy.
    pub fn from_file(path: &Path) -> Result<StackConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut cfg =
            StackConfig::from_json(&text).map_err(|e| format!("invalid stack config {}: {e}", path.display()))?;
        if let Some(KernelPolicySource::Path(rel)) = &cfg.kernel_policy {
            let p = path.parent().unwrap_or_else(|| Path::new(".")).join(rel);
            let text = std::fs::read_to_string(&p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
            let policy =
                KernelPolicy::from_json(&text).map_err(|e| format!("invalid kernel policy {}: {e}", p.display()))?;
            cfg.kernel_policy = Some(KernelPolicySource::Inline(policy));
        }
        Ok(cfg)
    }

    pub fn with_kernel_policy(mut self, policy: KernelPolicy) -> StackConfig {
        self.kernel_policy = Some(KernelPolicySource::Inline(policy));
        self
    }

    pub fn with_store(mut self, store: ContentStoreConfig) -> StackConfig {
        self.content_stores.push(store);
        self
    }

    pub fn with_fix(mut self, fix: LocationFix) -> StackConfig {
        self.location_seed.push(fix);
        self
    }

    pub fn with_package(mut self, pkg: PackageInfo) -> StackConfig {
        self.preinstalled_packages.push(pkg);
        self
    }

    pub fn inline_kernel_policy(&self) -> Result<Option<&KernelPolicy>, String> {
        match &self.kernel_policy {
            None => Ok(None),
            Some(KernelPolicySource::Inline(p)) => Ok(Some(p)),
            Some(KernelPolicySource::Path(p)) => Err(format!("kernel policy path `{p}` was not resolved")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config() {
        let cfg = StackConfig::from_json(
            r#"{"content_stores":[{"name":"contacts","columns":["name","group"],"rows":[["ann","work"]]}],
                "location_seed":[{"latitude":52.1,"longitude":13.4}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.device_id, DEFAULT_DEVICE_ID);
        assert_eq!(cfg.providers, ["gps", "network"]);
        assert_eq!(cfg.content_stores[0].to_result_set().unwrap().rows.len(), 1);
        assert!(cfg.kernel_policy.is_none());
    }

    #[test]
    fn inline_kernel_policy() {
        let cfg = StackConfig::from_json(r#"{"kernel_policy":{"enforcing":false,"rules":[]}}"#).unwrap();
        assert!(!cfg.inline_kernel_policy().unwrap().unwrap().enforcing);
    }
}
