//! Enforcement-point descriptors and the hook registry.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use indexmap::IndexMap;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, Value};
use crate::model::{LocationFix, PackageInfo, ResultSet};

use super::FrameworkError;

/// Stack tier a hook lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Kernel,
    Middleware,
    Application,
}

/// What a module may do at a hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HookCategory {
    BooleanTruncation,
    ErrorTruncation,
    EditReturn,
    ListFilter,
    ObserveOnly,
}

impl HookCategory {
    pub const ALL: [HookCategory; 5] = [
        HookCategory::BooleanTruncation,
        HookCategory::ErrorTruncation,
        HookCategory::EditReturn,
        HookCategory::ListFilter,
        HookCategory::ObserveOnly,
    ];

    pub fn is_truncation(self) -> bool {
        matches!(self, HookCategory::BooleanTruncation | HookCategory::ErrorTruncation)
    }

    pub fn allows_edit(self) -> bool {
        matches!(self, HookCategory::EditReturn | HookCategory::ListFilter)
    }
}

impl fmt::Display for HookCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HookCategory::BooleanTruncation => "boolean-truncation",
            HookCategory::ErrorTruncation => "error-truncation",
            HookCategory::EditReturn => "edit-return",
            HookCategory::ListFilter => "list-filter",
            HookCategory::ObserveOnly => "observe-only",
        };
        f.write_str(s)
    }
}

/// Semantic type of a hook argument or return value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SemanticType {
    Any,
    Int,
    Float,
    Bool,
    Text,
    Bytes,
    Bundle,
    Location,
    ResultSet,
    Package,
    Intent,
    List(Box<SemanticType>),
    Optional(Box<SemanticType>),
}

impl SemanticType {
    pub fn list_of(inner: SemanticType) -> SemanticType {
        SemanticType::List(Box::new(inner))
    }

    pub fn is_list(&self) -> bool {
        matches!(self, SemanticType::List(_))
    }

    /// Does `value` conform to this type?
    pub fn accepts(&self, value: &Value) -> bool {
        match self {
            SemanticType::Any => true,
            SemanticType::Int => matches!(value, Value::Int(_)),
            SemanticType::Float => matches!(value, Value::Float(_)),
            SemanticType::Bool => matches!(value, Value::Bool(_)),
            SemanticType::Text => matches!(value, Value::Text(_)),
            SemanticType::Bytes => matches!(value, Value::Bytes(_)),
            SemanticType::Bundle => matches!(value, Value::Bundle(_)),
            SemanticType::Location => LocationFix::from_value(value).is_some(),
            SemanticType::ResultSet => ResultSet::from_value(value).is_some(),
            SemanticType::Package => value.as_bundle().is_some_and(|b| PackageInfo::from_bundle(b).is_some()),
            SemanticType::Intent => value.as_bundle().and_then(|b| b.get_str("action")).is_some_and(|a| !a.is_empty()),
            SemanticType::List(inner) => value.as_list().is_some_and(|l| l.iter().all(|v| inner.accepts(v))),
            SemanticType::Optional(inner) => inner.accepts(value),
        }
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SemanticType::Any => f.write_str("any"),
            SemanticType::Int => f.write_str("int"),
            SemanticType::Float => f.write_str("float"),
            SemanticType::Bool => f.write_str("bool"),
            SemanticType::Text => f.write_str("text"),
            SemanticType::Bytes => f.write_str("bytes"),
            SemanticType::Bundle => f.write_str("bundle"),
            SemanticType::Location => f.write_str("location"),
            SemanticType::ResultSet => f.write_str("result_set"),
            SemanticType::Package => f.write_str("package"),
            SemanticType::Intent => f.write_str("intent"),
            SemanticType::List(inner) => write!(f, "list<{inner}>"),
            SemanticType::Optional(inner) => write!(f, "{inner}?"),
        }
    }
}

impl FromStr for SemanticType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(inner) = s.strip_suffix('?') {
            return Ok(SemanticType::Optional(Box::new(inner.parse()?)));
        }
        if let Some(inner) = s.strip_prefix("list<").and_then(|r| r.strip_suffix('>')) {
            return Ok(SemanticType::list_of(inner.parse()?));
        }
        Ok(match s {
            "any" => SemanticType::Any,
            "int" => SemanticType::Int,
            "float" => SemanticType::Float,
            "bool" => SemanticType::Bool,
            "text" => SemanticType::Text,
            "bytes" => SemanticType::Bytes,
            "bundle" => SemanticType::Bundle,
            "location" => SemanticType::Location,
            "result_set" => SemanticType::ResultSet,
            "package" => SemanticType::Package,
            "intent" => SemanticType::Intent,
            other => return Err(format!("unknown semantic type `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgSpec {
    pub name: String,
    pub ty: SemanticType,
}

/// Identity, tier, category and schema of one enforcement point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookDescriptor {
    pub id: String,
    pub layer: Layer,
    pub category: HookCategory,
    pub arg_schema: Vec<ArgSpec>,
    pub return_schema: Option<SemanticType>,
    /// `false` for hooks that are registered for API coverage only and are
    /// never triggered by the simulated services.
    pub implemented: bool,
}

impl HookDescriptor {
    pub fn new(id: impl Into<String>, layer: Layer, category: HookCategory) -> HookDescriptor {
        HookDescriptor {
            id: id.into(),
            layer,
            category,
            arg_schema: Vec::new(),
            return_schema: None,
            implemented: true,
        }
    }

    pub fn arg(mut self, name: impl Into<String>, ty: SemanticType) -> HookDescriptor {
        self.arg_schema.push(ArgSpec { name: name.into(), ty });
        self
    }

    pub fn returns(mut self, ty: SemanticType) -> HookDescriptor {
        self.return_schema = Some(ty);
        self
    }

    pub fn schema_only(mut self) -> HookDescriptor {
        self.implemented = false;
        self
    }

    pub fn validate(&self) -> Result<(), FrameworkError> {
        let malformed = |why: &str| FrameworkError::MalformedSchema { hook: self.id.clone(), reason: why.to_owned() };
        if self.id.is_empty() || !self.id.contains('.') {
            return Err(malformed("hook id must be a dotted name"));
        }
        match (self.category, &self.return_schema) {
            (HookCategory::EditReturn, None) => Err(malformed("edit-return hook without return schema")),
            (HookCategory::ListFilter, Some(ty)) if !ty.is_list() => {
                Err(malformed("list-filter hook must return a list"))
            }
            (HookCategory::ListFilter, None) => Err(malformed("list-filter hook without return schema")),
            _ => Ok(()),
        }
    }

    /// Checks that `args` carries every non-optional argument with a conforming value.
    pub fn check_args(&self, args: &Bundle) -> Result<(), String> {
        for spec in &self.arg_schema {
            match (args.get(&spec.name), &spec.ty) {
                (None, SemanticType::Optional(_)) => {}
                (None, _) => return Err(format!("missing argument `{}`", spec.name)),
                (Some(v), ty) if !ty.accepts(v) => {
                    return Err(format!("argument `{}` is not a {ty}", spec.name));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Does an edit payload conform to the return schema?
    pub fn accepts_return(&self, value: &Value) -> bool {
        self.return_schema.as_ref().is_some_and(|ty| ty.accepts(value))
    }
}

/// Registry of all known enforcement points, in registration order.
#[derive(Debug, Default)]
pub struct HookRegistry {
    hooks: RwLock<IndexMap<String, Arc<HookDescriptor>>>,
}

impl HookRegistry {
    pub fn new() -> HookRegistry {
        HookRegistry::default()
    }

    pub fn register(&self, descriptor: HookDescriptor) -> Result<String, FrameworkError> {
        descriptor.validate()?;
        let mut hooks = self.hooks.write();
        if hooks.contains_key(&descriptor.id) {
            return Err(FrameworkError::DuplicateHookId(descriptor.id));
        }
        let id = descriptor.id.clone();
        hooks.insert(id.clone(), Arc::new(descriptor));
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<Arc<HookDescriptor>> {
        self.hooks.read().get(id).cloned()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.hooks.read().contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.hooks.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.read().is_empty()
    }

    pub fn all(&self) -> Vec<Arc<HookDescriptor>> {
        self.hooks.read().values().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_edit_return_hook() {
        let reg = HookRegistry::new();
        let id = reg
            .register(
                HookDescriptor::new("location.getLastLocation", Layer::Middleware, HookCategory::EditReturn)
                    .returns(SemanticType::Location),
            )
            .unwrap();
        assert_eq!(id, "location.getLastLocation");
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn duplicate_id_rejected() {
        let reg = HookRegistry::new();
        let d = HookDescriptor::new("a.b", Layer::Middleware, HookCategory::BooleanTruncation);
        reg.register(d.clone()).unwrap();
        assert_eq!(reg.register(d), Err(FrameworkError::DuplicateHookId("a.b".into())));
    }

    #[test]
    fn edit_return_without_schema_is_malformed() {
        let reg = HookRegistry::new();
        let err = reg.register(HookDescriptor::new("a.b", Layer::Middleware, HookCategory::EditReturn)).unwrap_err();
        assert!(matches!(err, FrameworkError::MalformedSchema { .. }));
        assert!(reg.is_empty());
    }

    #[test]
    fn semantic_type_parsing() {
        assert_eq!("list<text>".parse::<SemanticType>().unwrap(), SemanticType::list_of(SemanticType::Text));
        assert_eq!("text?".parse::<SemanticType>().unwrap(), SemanticType::Optional(Box::new(SemanticType::Text)));
        assert!("widget".parse::<SemanticType>().is_err());
    }

    #[test]
    fn args_checked_against_schema() {
        let d = HookDescriptor::new("a.b", Layer::Middleware, HookCategory::BooleanTruncation)
            .arg("uid", SemanticType::Int)
            .arg("note", SemanticType::Optional(Box::new(SemanticType::Text)));
        assert!(d.check_args(&Bundle::new().with("uid", 1i64)).is_ok());
        assert!(d.check_args(&Bundle::new()).is_err());
        assert!(d.check_args(&Bundle::new().with("uid", "x")).is_err());
    }
}
