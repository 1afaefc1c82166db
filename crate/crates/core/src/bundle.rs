//! Ordered heterogeneous key-value records.
//!
//! A [`Bundle`] is the one container every layer of the stack agrees on: hook
//! arguments, kernel security labels, module protocol messages and edit
//! payloads are all bundles (or [`Value`]s held in one). Keys keep insertion
//! order and equality is structural and order-sensitive.
//!
//! Two JSON mappings exist:
//!
//! * the *typed* mapping (serde derive) tags every value with its kind, e.g.
//!   `{"n": {"int": 3}}`, and round-trips exactly;
//! * the *plain* mapping ([`Bundle::from_plain_json`]) accepts ordinary JSON
//!   objects as written in scenario and config files, guessing kinds from the
//!   JSON type.

use std::fmt;

use base64::Engine as _;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum nesting depth of bundles. A bundle without nested bundles has depth 1.
pub const MAX_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BundleError {
    #[error("bundle nesting depth {0} exceeds the limit of {MAX_DEPTH}")]
    TooDeep(usize),
    #[error("list mixes {first} and {other} elements")]
    MixedList { first: ValueKind, other: ValueKind },
    #[error("float value {0} is not finite")]
    NonFinite(f64),
    #[error("unsupported json value for key `{0}`")]
    UnsupportedJson(String),
}

/// Kind tag of a [`Value`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Int,
    Float,
    Bool,
    Text,
    Bytes,
    Bundle,
    List,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::Int => "int",
            ValueKind::Float => "float",
            ValueKind::Bool => "bool",
            ValueKind::Text => "text",
            ValueKind::Bytes => "bytes",
            ValueKind::Bundle => "bundle",
            ValueKind::List => "list",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ValueKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "int" => ValueKind::Int,
            "float" => ValueKind::Float,
            "bool" => ValueKind::Bool,
            "text" => ValueKind::Text,
            "bytes" => ValueKind::Bytes,
            "bundle" => ValueKind::Bundle,
            "list" => ValueKind::List,
            other => return Err(format!("unknown value kind `{other}`")),
        })
    }
}

/// One bundle value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
    Bytes(#[serde(with = "b64")] Vec<u8>),
    Bundle(Bundle),
    List(List),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Int(_) => ValueKind::Int,
            Value::Float(_) => ValueKind::Float,
            Value::Bool(_) => ValueKind::Bool,
            Value::Text(_) => ValueKind::Text,
            Value::Bytes(_) => ValueKind::Bytes,
            Value::Bundle(_) => ValueKind::Bundle,
            Value::List(_) => ValueKind::List,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bundle(&self) -> Option<&Bundle> {
        match self {
            Value::Bundle(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&List> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    /// Text list convenience: `None` unless every element is text.
    pub fn as_text_list(&self) -> Option<Vec<String>> {
        self.as_list()?.iter().map(|v| v.as_str().map(str::to_owned)).collect()
    }

    fn depth(&self) -> usize {
        match self {
            Value::Bundle(b) => b.depth(),
            Value::List(l) => l.iter().map(Value::depth).max().unwrap_or(0),
            _ => 0,
        }
    }

    fn validate(&self) -> Result<(), BundleError> {
        match self {
            Value::Float(f) if !f.is_finite() => Err(BundleError::NonFinite(*f)),
            Value::List(l) => l.validate(),
            Value::Bundle(b) => b.validate(),
            _ => Ok(()),
        }
    }

    /// Plain JSON rendering (kinds are implied by the JSON type; bytes become base64 text).
    pub fn to_plain_json(&self) -> serde_json::Value {
        match self {
            Value::Int(v) => serde_json::Value::from(*v),
            Value::Float(v) => serde_json::Value::from(*v),
            Value::Bool(v) => serde_json::Value::Bool(*v),
            Value::Text(v) => serde_json::Value::String(v.clone()),
            Value::Bytes(v) => serde_json::Value::String(b64::encode(v)),
            Value::Bundle(b) => b.to_plain_json(),
            Value::List(l) => serde_json::Value::Array(l.iter().map(Value::to_plain_json).collect()),
        }
    }

    pub fn from_plain_json(json: &serde_json::Value) -> Result<Value, BundleError> {
        Self::from_plain_json_keyed("", json)
    }

    fn from_plain_json_keyed(key: &str, json: &serde_json::Value) -> Result<Value, BundleError> {
        Ok(match json {
            serde_json::Value::Bool(b) => Value::Bool(*b),
            serde_json::Value::Number(n) => match n.as_i64() {
                Some(i) => Value::Int(i),
                None => Value::Float(n.as_f64().ok_or_else(|| BundleError::UnsupportedJson(key.to_owned()))?),
            },
            serde_json::Value::String(s) => Value::Text(s.clone()),
            serde_json::Value::Array(items) => {
                let values =
                    items.iter().map(|v| Self::from_plain_json_keyed(key, v)).collect::<Result<Vec<_>, _>>()?;
                Value::List(List::new(values)?)
            }
            serde_json::Value::Object(_) => Value::Bundle(Bundle::from_plain_json(json)?),
            serde_json::Value::Null => return Err(BundleError::UnsupportedJson(key.to_owned())),
        })
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<u32> for Value {
    fn from(v: u32) -> Self {
        Value::Int(i64::from(v))
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(v as i64)
    }
}

impl From<i32> for Value {
    fn from(v: i32) -> Self {
        Value::Int(i64::from(v))
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_owned())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

impl From<&String> for Value {
    fn from(v: &String) -> Self {
        Value::Text(v.clone())
    }
}

impl From<Vec<u8>> for Value {
    fn from(v: Vec<u8>) -> Self {
        Value::Bytes(v)
    }
}

impl From<Bundle> for Value {
    fn from(v: Bundle) -> Self {
        Value::Bundle(v)
    }
}

impl From<List> for Value {
    fn from(v: List) -> Self {
        Value::List(v)
    }
}

impl From<Vec<String>> for Value {
    fn from(v: Vec<String>) -> Self {
        Value::List(List(v.into_iter().map(Value::Text).collect()))
    }
}

impl From<&[&str]> for Value {
    fn from(v: &[&str]) -> Self {
        Value::List(List(v.iter().map(|s| Value::from(*s)).collect()))
    }
}

/// Homogeneous list of values. Every element shares one [`ValueKind`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Value>", into = "Vec<Value>")]
pub struct List(Vec<Value>);

impl List {
    pub fn new(values: Vec<Value>) -> Result<List, BundleError> {
        let list = List(values);
        list.check_homogeneous()?;
        Ok(list)
    }

    pub fn empty() -> List {
        List(Vec::new())
    }

    /// List of bundles; always homogeneous.
    pub fn of_bundles(items: impl IntoIterator<Item = Bundle>) -> List {
        List(items.into_iter().map(Value::Bundle).collect())
    }

    pub fn of_text<S: Into<String>>(items: impl IntoIterator<Item = S>) -> List {
        List(items.into_iter().map(|s| Value::Text(s.into())).collect())
    }

    pub fn element_kind(&self) -> Option<ValueKind> {
        self.0.first().map(Value::kind)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Value> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<Value> {
        self.0
    }

    fn check_homogeneous(&self) -> Result<(), BundleError> {
        let mut iter = self.0.iter();
        if let Some(first) = iter.next() {
            let first = first.kind();
            if let Some(other) = iter.map(Value::kind).find(|k| *k != first) {
                return Err(BundleError::MixedList { first, other });
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), BundleError> {
        self.check_homogeneous()?;
        self.0.iter().try_for_each(Value::validate)
    }
}

impl TryFrom<Vec<Value>> for List {
    type Error = BundleError;

    fn try_from(values: Vec<Value>) -> Result<Self, Self::Error> {
        List::new(values)
    }
}

impl From<List> for Vec<Value> {
    fn from(list: List) -> Self {
        list.0
    }
}

impl<'a> IntoIterator for &'a List {
    type Item = &'a Value;
    type IntoIter = std::slice::Iter<'a, Value>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Ordered key-value record with unique keys.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(try_from = "IndexMap<String, Value>", into = "IndexMap<String, Value>")]
pub struct Bundle {
    entries: IndexMap<String, Value>,
}

/// Structural and key-order sensitive.
impl PartialEq for Bundle {
    fn eq(&self, other: &Bundle) -> bool {
        self.entries.len() == other.entries.len() && self.entries.iter().eq(other.entries.iter())
    }
}

impl Bundle {
    pub fn new() -> Bundle {
        Bundle::default()
    }

    /// Inserts or replaces `key`. A replaced key keeps its position.
    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<Value>) -> Result<(), BundleError> {
        let value = value.into();
        value.validate()?;
        let depth = 1 + value.depth();
        if depth > MAX_DEPTH {
            return Err(BundleError::TooDeep(depth));
        }
        self.entries.insert(key.into(), value);
        Ok(())
    }

    /// Builder-style insert.
    ///
    /// Panics if the value would break a bundle invariant; only use it with
    /// statically known shapes.
    pub fn with(mut self, key: impl Into<String>, value: impl Into<Value>) -> Bundle {
        let key = key.into();
        if let Err(e) = self.insert(key.clone(), value) {
            panic!("invalid bundle value for `{key}`: {e}");
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn get_int(&self, key: &str) -> Option<i64> {
        self.get(key).and_then(Value::as_int)
    }

    pub fn get_float(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(Value::as_float)
    }

    pub fn get_bool(&self, key: &str) -> Option<bool> {
        self.get(key).and_then(Value::as_bool)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.get(key).and_then(Value::as_str)
    }

    pub fn get_bundle(&self, key: &str) -> Option<&Bundle> {
        self.get(key).and_then(Value::as_bundle)
    }

    pub fn get_list(&self, key: &str) -> Option<&List> {
        self.get(key).and_then(Value::as_list)
    }

    pub fn get_text_list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key).and_then(Value::as_text_list)
    }

    pub fn remove(&mut self, key: &str) -> Option<Value> {
        self.entries.shift_remove(key)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Nesting depth; a bundle with only scalar values has depth 1.
    pub fn depth(&self) -> usize {
        1 + self.entries.values().map(Value::depth).max().unwrap_or(0)
    }

    fn validate(&self) -> Result<(), BundleError> {
        let depth = self.depth();
        if depth > MAX_DEPTH {
            return Err(BundleError::TooDeep(depth));
        }
        self.entries.values().try_for_each(Value::validate)
    }

    /// Typed JSON encoding.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bundle serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Bundle, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_plain_json(&self) -> serde_json::Value {
        serde_json::Value::Object(self.entries.iter().map(|(k, v)| (k.clone(), v.to_plain_json())).collect())
    }

    /// Builds a bundle from an ordinary JSON object.
    ///
    /// Integers map to `int`, other numbers to `float`, arrays to lists,
    /// objects to nested bundles. `null` is rejected.
    pub fn from_plain_json(json: &serde_json::Value) -> Result<Bundle, BundleError> {
        let serde_json::Value::Object(map) = json else {
            return Err(BundleError::UnsupportedJson("<root>".to_owned()));
        };
        let mut bundle = Bundle::new();
        for (k, v) in map {
            bundle.insert(k.clone(), Value::from_plain_json_keyed(k, v)?)?;
        }
        Ok(bundle)
    }
}

impl TryFrom<IndexMap<String, Value>> for Bundle {
    type Error = BundleError;

    fn try_from(entries: IndexMap<String, Value>) -> Result<Self, Self::Error> {
        let bundle = Bundle { entries };
        bundle.validate()?;
        Ok(bundle)
    }
}

impl From<Bundle> for IndexMap<String, Value> {
    fn from(bundle: Bundle) -> Self {
        bundle.entries
    }
}

impl fmt::Display for Bundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_plain_json())
    }
}

mod b64 {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(bytes: &[u8]) -> String {
        base64::engine::general_purpose::STANDARD.encode(bytes)
    }

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

/// Decodes standard base64 (used by manifest resources).
pub fn decode_base64(text: &str) -> Result<Vec<u8>, String> {
    base64::engine::general_purpose::STANDARD.decode(text.as_bytes()).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn keys_are_unique_and_keep_position() {
        let mut b = Bundle::new().with("a", 1i64).with("b", "x");
        b.insert("a", 2i64).unwrap();
        assert_eq!(b.keys().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(b.get_int("a"), Some(2));
    }

    #[test]
    fn equality_is_order_sensitive() {
        let ab = Bundle::new().with("a", 1i64).with("b", 2i64);
        let ba = Bundle::new().with("b", 2i64).with("a", 1i64);
        assert_ne!(ab, ba);
    }

    #[test]
    fn mixed_list_rejected() {
        let err = List::new(vec![Value::Int(1), Value::Text("x".into())]).unwrap_err();
        assert!(matches!(err, BundleError::MixedList { .. }));
    }

    #[test]
    fn depth_limit_enforced() {
        let mut b = Bundle::new().with("leaf", 1i64);
        for _ in 1..MAX_DEPTH {
            b = Bundle::new().with("n", b);
        }
        assert_eq!(b.depth(), MAX_DEPTH);
        let mut outer = Bundle::new();
        assert_eq!(outer.insert("n", b), Err(BundleError::TooDeep(MAX_DEPTH + 1)));
    }

    #[test]
    fn deserializing_too_deep_fails() {
        let mut text = String::from("{\"leaf\":{\"int\":1}}");
        for _ in 0..MAX_DEPTH {
            text = format!("{{\"n\":{{\"bundle\":{text}}}}}");
        }
        assert!(Bundle::from_json(&text).is_err());
    }

    #[test]
    fn typed_json_shape() {
        let b = Bundle::new().with("n", 3i64).with("raw", vec![1u8, 2, 3]);
        assert_eq!(b.to_json(), r#"{"n":{"int":3},"raw":{"bytes":"AQID"}}"#);
    }

    #[test]
    fn plain_json_import() {
        let json = serde_json::json!({"cmd": "setPolicy", "n": 2, "f": 0.5, "tags": ["a", "b"]});
        let b = Bundle::from_plain_json(&json).unwrap();
        assert_eq!(b.get_str("cmd"), Some("setPolicy"));
        assert_eq!(b.get_int("n"), Some(2));
        assert_eq!(b.get_float("f"), Some(0.5));
        assert_eq!(b.get_text_list("tags").unwrap(), vec!["a", "b"]);
        assert!(Bundle::from_plain_json(&serde_json::json!({"x": null})).is_err());
    }

    fn scalar() -> impl Strategy<Value = Value> {
        prop_oneof![
            any::<i64>().prop_map(Value::Int),
            (-1e12f64..1e12).prop_map(Value::Float),
            any::<bool>().prop_map(Value::Bool),
            "[a-z]{0,8}".prop_map(Value::Text),
            proptest::collection::vec(any::<u8>(), 0..8).prop_map(Value::Bytes),
        ]
    }

    fn value() -> impl Strategy<Value = Value> {
        scalar().prop_recursive(6, 48, 6, |inner| {
            prop_oneof![
                proptest::collection::vec(("[a-z]{1,4}", inner.clone()), 0..4).prop_map(|kv| {
                    let mut b = Bundle::new();
                    for (k, v) in kv {
                        b.insert(k, v).unwrap();
                    }
                    Value::Bundle(b)
                }),
                // homogeneous: repeat the kind of the first element by cloning it
                (inner, 0usize..4).prop_map(|(v, n)| Value::List(List::new(vec![v; n]).unwrap())),
            ]
        })
    }

    proptest! {
        #[test]
        fn typed_json_round_trip(kv in proptest::collection::vec(("[a-z]{1,4}", value()), 0..6)) {
            let mut b = Bundle::new();
            for (k, v) in kv {
                b.insert(k, v).unwrap();
            }
            prop_assert!(b.depth() <= MAX_DEPTH);
            let back = Bundle::from_json(&b.to_json()).unwrap();
            prop_assert_eq!(back, b);
        }
    }
}
