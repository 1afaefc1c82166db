//! Domain records shared by the framework, the simulated services and the
//! policy modules, plus their bundle encodings.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, List, Value};

/// Identity of an API caller.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Credentials {
    pub uid: u32,
    pub pid: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub package: Option<String>,
}

impl Credentials {
    pub fn new(uid: u32, pid: u32) -> Credentials {
        Credentials { uid, pid, package: None }
    }

    pub fn with_package(uid: u32, pid: u32, package: impl Into<String>) -> Credentials {
        Credentials { uid, pid, package: Some(package.into()) }
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new().with("uid", self.uid).with("pid", self.pid);
        if let Some(p) = &self.package {
            b = b.with("package", p.as_str());
        }
        b
    }
}

/// First uid handed to installed apps.
pub const FIRST_APP_UID: u32 = 10_000;
/// uid of the simulated shell (the CLI's front-end channel).
pub const SHELL_UID: u32 = 2000;
/// uid of system_server.
pub const SYSTEM_UID: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Activity,
    Receiver,
    Service,
    Provider,
}

impl ComponentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Activity => "activity",
            ComponentKind::Receiver => "receiver",
            ComponentKind::Service => "service",
            ComponentKind::Provider => "provider",
        }
    }

    pub fn parse(s: &str) -> Option<ComponentKind> {
        Some(match s {
            "activity" => ComponentKind::Activity,
            "receiver" => ComponentKind::Receiver,
            "service" => ComponentKind::Service,
            "provider" => ComponentKind::Provider,
            _ => return None,
        })
    }
}

/// App component. `actions` is its intent filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub kind: ComponentKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<String>,
}

impl Component {
    pub fn new(kind: ComponentKind, name: impl Into<String>) -> Component {
        Component { kind, name: name.into(), actions: Vec::new() }
    }

    pub fn with_actions<S: Into<String>>(mut self, actions: impl IntoIterator<Item = S>) -> Component {
        self.actions = actions.into_iter().map(Into::into).collect();
        self
    }
}

/// Declared app package.
///
/// `uid` is assigned by the package registry at install time; whatever a caller
/// puts there is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageInfo {
    pub name: String,
    #[serde(default)]
    pub uid: u32,
    #[serde(default = "default_version")]
    pub version: String,
    #[serde(default, alias = "permissions")]
    pub requested_permissions: BTreeSet<String>,
    #[serde(default)]
    pub components: Vec<Component>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "plain_bundle_opt")]
    pub attached_policies: Option<Bundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_user: Option<String>,
}

fn default_version() -> String {
    "1".to_owned()
}

impl PackageInfo {
    pub fn new(name: impl Into<String>) -> PackageInfo {
        PackageInfo {
            name: name.into(),
            uid: 0,
            version: default_version(),
            requested_permissions: BTreeSet::new(),
            components: Vec::new(),
            attached_policies: None,
            shared_user: None,
        }
    }

    pub fn with_permissions<S: Into<String>>(mut self, perms: impl IntoIterator<Item = S>) -> PackageInfo {
        self.requested_permissions = perms.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_component(mut self, component: Component) -> PackageInfo {
        self.components.push(component);
        self
    }

    pub fn with_shared_user(mut self, shared: impl Into<String>) -> PackageInfo {
        self.shared_user = Some(shared.into());
        self
    }

    pub fn with_policies(mut self, policies: Bundle) -> PackageInfo {
        self.attached_policies = Some(policies);
        self
    }

    /// `<package>/<component>` reference for one of this package's components.
    pub fn component_ref(&self, name: &str) -> String {
        format!("{}/{}", self.name, name)
    }

    pub fn find_component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Actions declared by receiver components.
    pub fn receiver_actions(&self) -> impl Iterator<Item = &str> {
        self.components
            .iter()
            .filter(|c| c.kind == ComponentKind::Receiver)
            .flat_map(|c| c.actions.iter().map(String::as_str))
    }

    pub fn is_well_formed(&self) -> Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("package name is empty".to_owned());
        }
        if self.name.contains('/') {
            return Err(format!("package name `{}` contains `/`", self.name));
        }
        let mut seen = BTreeSet::new();
        for c in &self.components {
            if c.name.is_empty() || !seen.insert(c.name.as_str()) {
                return Err(format!("bad or duplicate component name `{}`", c.name));
            }
        }
        Ok(())
    }

    pub fn to_bundle(&self) -> Bundle {
        let components = List::of_bundles(self.components.iter().map(|c| {
            Bundle::new()
                .with("kind", c.kind.as_str())
                .with("name", c.name.as_str())
                .with("actions", List::of_text(c.actions.iter().cloned()))
        }));
        let mut b = Bundle::new()
            .with("name", self.name.as_str())
            .with("uid", self.uid)
            .with("version", self.version.as_str())
            .with("permissions", List::of_text(self.requested_permissions.iter().cloned()))
            .with("components", components);
        if let Some(shared) = &self.shared_user {
            b = b.with("shared_user", shared.as_str());
        }
        if let Some(policies) = &self.attached_policies {
            b = b.with("policies", policies.clone());
        }
        b
    }

    pub fn from_bundle(b: &Bundle) -> Option<PackageInfo> {
        let uid = u32::try_from(b.get_int("uid")?).ok()?;
        let mut components = Vec::new();
        for c in b.get_list("components")? {
            let c = c.as_bundle()?;
            components.push(Component {
                kind: ComponentKind::parse(c.get_str("kind")?)?,
                name: c.get_str("name")?.to_owned(),
                actions: c.get_text_list("actions")?,
            });
        }
        Some(PackageInfo {
            name: b.get_str("name")?.to_owned(),
            uid,
            version: b.get_str("version")?.to_owned(),
            requested_permissions: b.get_text_list("permissions")?.into_iter().collect(),
            components,
            attached_policies: match b.get("policies") {
                None => None,
                Some(v) => Some(v.as_bundle()?.clone()),
            },
            shared_user: match b.get("shared_user") {
                None => None,
                Some(v) => Some(v.as_str()?.to_owned()),
            },
        })
    }
}

/// Serde adapter: optional bundle written as plain JSON.
pub(crate) mod plain_bundle_opt {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::bundle::Bundle;

    pub fn serialize<S: Serializer>(b: &Option<Bundle>, s: S) -> Result<S::Ok, S::Error> {
        b.as_ref().map(Bundle::to_plain_json).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Bundle>, D::Error> {
        let json = Option::<serde_json::Value>::deserialize(d)?;
        json.map(|j| Bundle::from_plain_json(&j).map_err(serde::de::Error::custom)).transpose()
    }
}

/// Serde adapter: bundle written as plain JSON.
pub(crate) mod plain_bundle {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::bundle::Bundle;

    pub fn serialize<S: Serializer>(b: &Bundle, s: S) -> Result<S::Ok, S::Error> {
        b.to_plain_json().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Bundle, D::Error> {
        let json = serde_json::Value::deserialize(d)?;
        Bundle::from_plain_json(&json).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_component: Option<String>,
    #[serde(default, with = "plain_bundle")]
    pub extras: Bundle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_permission: Option<String>,
}

impl Intent {
    pub fn new(action: impl Into<String>) -> Intent {
        Intent { action: action.into(), target_component: None, extras: Bundle::new(), required_permission: None }
    }

    pub fn targeting(mut self, component: impl Into<String>) -> Intent {
        self.target_component = Some(component.into());
        self
    }

    pub fn requiring(mut self, permission: impl Into<String>) -> Intent {
        self.required_permission = Some(permission.into());
        self
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new().with("action", self.action.as_str());
        if let Some(t) = &self.target_component {
            b = b.with("component", t.as_str());
        }
        if let Some(p) = &self.required_permission {
            b = b.with("required_permission", p.as_str());
        }
        b.with("extras", self.extras.clone())
    }
}

/// A device location fix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationFix {
    pub latitude: f64,
    pub longitude: f64,
    #[serde(default)]
    pub timestamp: u64,
}

impl LocationFix {
    pub fn new(latitude: f64, longitude: f64, timestamp: u64) -> LocationFix {
        LocationFix { latitude, longitude, timestamp }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.latitude) && (-180.0..=180.0).contains(&self.longitude)
    }

    pub fn to_value(&self) -> Value {
        Value::Bundle(
            Bundle::new()
                .with("latitude", self.latitude)
                .with("longitude", self.longitude)
                .with("timestamp", self.timestamp),
        )
    }

    pub fn from_value(v: &Value) -> Option<LocationFix> {
        let b = v.as_bundle()?;
        if b.len() != 3 {
            return None;
        }
        let fix = LocationFix {
            latitude: b.get_float("latitude")?,
            longitude: b.get_float("longitude")?,
            timestamp: u64::try_from(b.get_int("timestamp")?).ok()?,
        };
        fix.is_valid().then_some(fix)
    }
}

/// Tabular query result. Every row has one value per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl ResultSet {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Value>>) -> Result<ResultSet, String> {
        if let Some(bad) = rows.iter().position(|r| r.len() != columns.len()) {
            return Err(format!("row {bad} has {} values, expected {}", rows[bad].len(), columns.len()));
        }
        Ok(ResultSet { columns, rows })
    }

    pub fn empty_like(&self) -> ResultSet {
        ResultSet { columns: self.columns.clone(), rows: Vec::new() }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_value(&self) -> Value {
        let rows = List::of_bundles(self.rows.iter().map(|row| {
            let mut b = Bundle::new();
            for (col, v) in self.columns.iter().zip(row) {
                b.insert(col.clone(), v.clone()).expect("row values are valid bundle values");
            }
            b
        }));
        Value::Bundle(Bundle::new().with("columns", List::of_text(self.columns.iter().cloned())).with("rows", rows))
    }

    pub fn from_value(v: &Value) -> Option<ResultSet> {
        let b = v.as_bundle()?;
        let columns = b.get_text_list("columns")?;
        let mut rows = Vec::new();
        for row in b.get_list("rows")? {
            let row = row.as_bundle()?;
            if !row.keys().eq(columns.iter().map(String::as_str)) {
                return None;
            }
            rows.push(row.iter().map(|(_, v)| v.clone()).collect());
        }
        Some(ResultSet { columns, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn package_bundle_round_trip() {
        let pkg = PackageInfo::new("com.example.a")
            .with_permissions(["INTERNET", "LOCATION"])
            .with_component(Component::new(ComponentKind::Receiver, "Rx").with_actions(["BOOT"]))
            .with_shared_user("shared.a")
            .with_policies(Bundle::new().with("rules", List::empty()));
        assert_eq!(PackageInfo::from_bundle(&pkg.to_bundle()), Some(pkg));
    }

    #[test]
    fn result_set_rejects_ragged_rows() {
        assert!(ResultSet::new(vec!["a".into()], vec![vec![Value::Int(1), Value::Int(2)]]).is_err());
    }

    #[test]
    fn result_set_value_requires_matching_columns() {
        let rs = ResultSet::new(vec!["name".into(), "group".into()], vec![vec!["ann".into(), "work".into()]]).unwrap();
        assert_eq!(ResultSet::from_value(&rs.to_value()), Some(rs));
        let bad = Value::Bundle(
            Bundle::new()
                .with("columns", List::of_text(["name"]))
                .with("rows", List::of_bundles([Bundle::new().with("other", 1i64)])),
        );
        assert_eq!(ResultSet::from_value(&bad), None);
    }

    #[test]
    fn location_range_checked() {
        assert!(LocationFix::from_value(&LocationFix::new(52.1, 13.4, 7).to_value()).is_some());
        assert!(LocationFix::from_value(&LocationFix::new(95.0, 13.4, 7).to_value()).is_none());
    }
}
