//! Reference type-enforcement kernel module.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;

/// Label key holding the TE type.
pub const TE_TYPE_KEY: &str = "te.type";

/// Kernel security context, carried as a bundle of label components.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SecurityLabel(#[serde(with = "crate::model::plain_bundle")] pub Bundle);

impl SecurityLabel {
    pub fn empty() -> SecurityLabel {
        SecurityLabel(Bundle::new())
    }

    pub fn of_type(te_type: impl Into<String>) -> SecurityLabel {
        SecurityLabel(Bundle::new().with(TE_TYPE_KEY, te_type.into()))
    }

    pub fn te_type(&self) -> Option<&str> {
        self.0.get_str(TE_TYPE_KEY)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_bundle(&self) -> &Bundle {
        &self.0
    }

    pub fn into_bundle(self) -> Bundle {
        self.0
    }
}

impl From<Bundle> for SecurityLabel {
    fn from(b: Bundle) -> Self {
        SecurityLabel(b)
    }
}

/// One allow rule. `when` makes the rule conditional on a named boolean.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AllowRule {
    pub subject: String,
    pub object: String,
    pub class: String,
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<String>,
}

impl AllowRule {
    pub fn new(subject: &str, object: &str, class: &str, op: &str) -> AllowRule {
        AllowRule {
            subject: subject.to_owned(),
            object: object.to_owned(),
            class: class.to_owned(),
            op: op.to_owned(),
            when: None,
        }
    }
}

/// Which objects a label assignment applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAssignment {
    /// Exact path, or a prefix ending in `*`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub package: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uid: Option<u32>,
    pub label: SecurityLabel,
}

/// Kernel policy file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelPolicy {
    #[serde(default = "default_enforcing")]
    pub enforcing: bool,
    #[serde(default)]
    pub rules: Vec<AllowRule>,
    #[serde(default)]
    pub labels: Vec<LabelAssignment>,
    #[serde(default)]
    pub booleans: BTreeMap<String, bool>,
}

fn default_enforcing() -> bool {
    true
}

impl Default for KernelPolicy {
    fn default() -> Self {
        KernelPolicy { enforcing: true, rules: Vec::new(), labels: Vec::new(), booleans: BTreeMap::new() }
    }
}

impl KernelPolicy {
    pub fn from_json(text: &str) -> Result<KernelPolicy, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Rules a stock boot needs: the spawner may pick uids and labels, and
    /// system processes may manage the kernel policy.
    pub fn baseline() -> KernelPolicy {
        KernelPolicy {
            rules: vec![
                AllowRule::new("zygote_t", "zygote_t", "zygote", "specifyids"),
                AllowRule::new("zygote_t", "zygote_t", "zygote", "specifyseinfo"),
                AllowRule::new("system_server_t", "system_server_t", "kmac", "admin"),
                AllowRule::new("init_t", "init_t", "kmac", "admin"),
                AllowRule::new("untrusted_app_t", "app_data_t", "file", "open"),
                AllowRule::new("untrusted_app_t", "app_data_t", "file", "read"),
                AllowRule::new("untrusted_app_t", "app_data_t", "file", "write"),
            ],
            ..KernelPolicy::default()
        }
    }

    pub fn with_rule(mut self, rule: AllowRule) -> KernelPolicy {
        self.rules.push(rule);
        self
    }
}

/// Precompiled rule set, swapped atomically on mutation.
#[derive(Debug, Clone, Default)]
struct RuleSet {
    unconditional: BTreeSet<(String, String, String, String)>,
    conditional: BTreeMap<(String, String, String, String), BTreeSet<String>>,
    booleans: BTreeMap<String, bool>,
}

impl RuleSet {
    fn compile(rules: &[AllowRule], booleans: BTreeMap<String, bool>) -> RuleSet {
        let mut set = RuleSet { booleans, ..RuleSet::default() };
        for r in rules {
            let key = (r.subject.clone(), r.object.clone(), r.class.clone(), r.op.clone());
            match &r.when {
                None => {
                    set.unconditional.insert(key);
                }
                Some(b) => {
                    set.conditional.entry(key).or_default().insert(b.clone());
                }
            }
        }
        set
    }

    fn allows(&self, s: &str, o: &str, c: &str, op: &str) -> bool {
        let key = (s.to_owned(), o.to_owned(), c.to_owned(), op.to_owned());
        if self.unconditional.contains(&key) {
            return true;
        }
        self.conditional
            .get(&key)
            .is_some_and(|conds| conds.iter().any(|b| self.booleans.get(b).copied().unwrap_or(false)))
    }
}

/// TE kernel module: rules keyed on (subject type, object type, class, op).
#[derive(Debug)]
pub struct TeKernelModule {
    rules: RwLock<Arc<RuleSet>>,
    source: RwLock<Vec<AllowRule>>,
    labels: Vec<LabelAssignment>,
}

impl TeKernelModule {
    pub fn new(policy: &KernelPolicy) -> TeKernelModule {
        TeKernelModule {
            rules: RwLock::new(Arc::new(RuleSet::compile(&policy.rules, policy.booleans.clone()))),
            source: RwLock::new(policy.rules.clone()),
            labels: policy.labels.clone(),
        }
    }

    /// Raw rule lookup, ignoring the enforcing mode. Labels without a type
    /// never match a rule.
    pub fn allows(&self, subject: &SecurityLabel, object: &SecurityLabel, class: &str, op: &str) -> bool {
        match (subject.te_type(), object.te_type()) {
            (Some(s), Some(o)) => self.rules.read().allows(s, o, class, op),
            _ => false,
        }
    }

    pub fn allows_types(&self, subject: &str, object: &str, class: &str, op: &str) -> bool {
        self.rules.read().allows(subject, object, class, op)
    }

    pub fn add_rule(&self, rule: AllowRule) {
        let mut source = self.source.write();
        source.push(rule);
        let booleans = self.rules.read().booleans.clone();
        *self.rules.write() = Arc::new(RuleSet::compile(&source, booleans));
    }

    pub fn rules(&self) -> Vec<AllowRule> {
        self.source.read().clone()
    }

    pub fn booleans(&self) -> BTreeMap<String, bool> {
        self.rules.read().booleans.clone()
    }

    pub fn boolean(&self, name: &str) -> Option<bool> {
        self.rules.read().booleans.get(name).copied()
    }

    pub fn set_boolean(&self, name: &str, value: bool) {
        let _source = self.source.write();
        let mut next = (**self.rules.read()).clone();
        next.booleans.insert(name.to_owned(), value);
        *self.rules.write() = Arc::new(next);
    }

    fn assigned(&self, pred: impl Fn(&LabelAssignment) -> bool) -> Option<SecurityLabel> {
        self.labels.iter().find(|a| pred(a)).map(|a| a.label.clone())
    }

    /// Label for a freshly spawned process.
    pub fn process_label(&self, uid: u32, package: &str) -> SecurityLabel {
        self.assigned(|a| a.package.as_deref() == Some(package) && a.path.is_none())
            .or_else(|| self.assigned(|a| a.uid == Some(uid) && a.package.is_none() && a.path.is_none()))
            .unwrap_or_else(|| default_process_label(uid, package))
    }

    /// Policy-declared label of a file path.
    pub fn file_label(&self, path: &str) -> SecurityLabel {
        self.assigned(|a| a.path.as_deref().is_some_and(|p| path_matches(p, path)))
            .unwrap_or_else(|| default_file_label(path))
    }
}

fn path_matches(pattern: &str, path: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => path.starts_with(prefix),
        None => pattern == path,
    }
}

pub fn default_process_label(uid: u32, package: &str) -> SecurityLabel {
    let t = match package {
        "init" => "init_t",
        "zygote" => "zygote_t",
        "system_server" => "system_server_t",
        _ if uid >= crate::model::FIRST_APP_UID => "untrusted_app_t",
        _ => "system_t",
    };
    SecurityLabel::of_type(t)
}

pub fn default_file_label(path: &str) -> SecurityLabel {
    let t = if path.starts_with("/data/data/") {
        "app_data_t"
    } else if path.starts_with("/system/") {
        "system_file_t"
    } else {
        "file_t"
    };
    SecurityLabel::of_type(t)
}
