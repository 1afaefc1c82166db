use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bundle::Value;

/// Reason text used when a module fault is turned into a denial.
pub const MODULE_FAULT_PREFIX: &str = "module-fault:";

/// Outcome of one enforcement function.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyDecision {
    Allow,
    Deny(String),
    Edit(Value),
}

impl PolicyDecision {
    /// Denial with a guaranteed non-empty reason.
    pub fn deny(reason: impl Into<String>) -> PolicyDecision {
        let reason = reason.into();
        if reason.trim().is_empty() {
            PolicyDecision::Deny("denied".to_owned())
        } else {
            PolicyDecision::Deny(reason)
        }
    }

    pub fn is_allow(&self) -> bool {
        matches!(self, PolicyDecision::Allow)
    }

    pub fn is_deny(&self) -> bool {
        matches!(self, PolicyDecision::Deny(_))
    }

    pub fn fault(detail: impl fmt::Display) -> PolicyDecision {
        PolicyDecision::Deny(format!("{MODULE_FAULT_PREFIX}{detail}"))
    }
}

impl fmt::Display for PolicyDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyDecision::Allow => f.write_str("allow"),
            PolicyDecision::Deny(r) => write!(f, "deny({r})"),
            PolicyDecision::Edit(v) => write!(f, "edit({})", v.to_plain_json()),
        }
    }
}

/// Result of a truncation dispatch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Deny(String),
}

impl Verdict {
    pub fn is_allow(&self) -> bool {
        matches!(self, Verdict::Allow)
    }

    pub fn deny_reason(&self) -> Option<&str> {
        match self {
            Verdict::Allow => None,
            Verdict::Deny(r) => Some(r),
        }
    }
}

/// Result of an edit dispatch.
#[derive(Debug, Clone, PartialEq)]
pub enum EditOutcome {
    /// The module allowed; the candidate passes through untouched.
    Unchanged(Value),
    /// The module replaced the candidate with a schema-conforming value.
    Replaced(Value),
    Denied(String),
}

impl EditOutcome {
    /// The value the caller sees, or the denial reason.
    pub fn into_result(self) -> Result<Value, String> {
        match self {
            EditOutcome::Unchanged(v) | EditOutcome::Replaced(v) => Ok(v),
            EditOutcome::Denied(r) => Err(r),
        }
    }

    pub fn is_denied(&self) -> bool {
        matches!(self, EditOutcome::Denied(_))
    }
}

/// One consulted decision, as recorded in the framework's decision log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub hook: String,
    pub uid: u32,
    pub pid: u32,
    /// Whether the module's enforcement function actually ran.
    pub module_invoked: bool,
    pub outcome: String,
}
