//! Data shadowing (TISSA / AppFence style): per package and data kind, pass
//! real data, return empty or fake data, or filter it.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::Value;
use crate::framework::hooks::{GET_DEVICE_ID, GET_LAST_LOCATION, POST_QUERY};
use crate::framework::{HookCall, ModuleContext, ModuleFault, ModuleManifest, PolicyDecision, SecurityModule};
use crate::model::{LocationFix, ResultSet};

use super::{parse_config, CallbackSlot};

pub const FAKE_DEVICE_ID: &str = "000000000000000";
pub const FAKE_LOCATION: (f64, f64) = (0.0, 0.0);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShadowError {
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("mode {mode} is not defined for {kind}")]
    Unsupported { mode: String, kind: DataKind },
    #[error("candidate does not match the {0} schema")]
    Schema(DataKind),
    #[error("predicate refers to unknown column `{0}`")]
    UnknownColumn(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    DeviceId,
    Location,
    ContentStore,
}

impl std::fmt::Display for DataKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataKind::DeviceId => "device-id",
            DataKind::Location => "location",
            DataKind::ContentStore => "content-store",
        })
    }
}

/// Row or value filters. Text forms: `exclude:col=value`,
/// `include:col=value` and `round:N` (location decimals).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    Exclude { column: String, value: String },
    Include { column: String, value: String },
    Round(u32),
}

impl FromStr for Predicate {
    type Err = ShadowError;

    fn from_str(s: &str) -> Result<Predicate, ShadowError> {
        let unknown = || ShadowError::UnknownPredicate(s.to_owned());
        let (kind, rest) = s.split_once(':').ok_or_else(unknown)?;
        match kind {
            "exclude" | "include" => {
                let (column, value) = rest.split_once('=').ok_or_else(unknown)?;
                if column.is_empty() {
                    return Err(unknown());
                }
                let (column, value) = (column.to_owned(), value.to_owned());
                Ok(if kind == "exclude" {
                    Predicate::Exclude { column, value }
                } else {
                    Predicate::Include { column, value }
                })
            }
            "round" => rest.parse().ok().filter(|n| *n <= 10).map(Predicate::Round).ok_or_else(unknown),
            _ => Err(unknown()),
        }
    }
}

/// Cell compared as text: strings as-is, scalars in display form.
pub fn cell_text(v: &Value) -> String {
    match v {
        Value::Text(s) => s.clone(),
        other => other.to_plain_json().to_string(),
    }
}

impl Predicate {
    /// Whether a row survives the filter.
    pub fn keeps(&self, rs: &ResultSet, row: &[Value]) -> Result<bool, ShadowError> {
        let (column, value, include) = match self {
            Predicate::Exclude { column, value } => (column, value, false),
            Predicate::Include { column, value } => (column, value, true),
            Predicate::Round(_) => {
                return Err(ShadowError::Unsupported { mode: "round".into(), kind: DataKind::ContentStore })
            }
        };
        let i = rs.column_index(column).ok_or_else(|| ShadowError::UnknownColumn(column.clone()))?;
        Ok((cell_text(&row[i]) == *value) == include)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShadowMode {
    Pass,
    Empty,
    Fake,
    Filtered(Predicate),
}

impl ShadowMode {
    pub fn parse(mode: &str, predicate: Option<&str>) -> Result<ShadowMode, ShadowError> {
        match mode {
            "pass" => Ok(ShadowMode::Pass),
            "empty" => Ok(ShadowMode::Empty),
            "fake" => Ok(ShadowMode::Fake),
            "filtered" => Ok(ShadowMode::Filtered(predicate.unwrap_or_default().parse()?)),
            other => Err(ShadowError::UnknownPredicate(other.to_owned())),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            ShadowMode::Pass => "pass",
            ShadowMode::Empty => "empty",
            ShadowMode::Fake => "fake",
            ShadowMode::Filtered(_) => "filtered",
        }
    }

    /// Whether the mode is meaningful for a data kind.
    pub fn supports(&self, kind: DataKind) -> bool {
        match (self, kind) {
            (ShadowMode::Pass, _) => true,
            (ShadowMode::Empty, DataKind::Location) => false,
            (ShadowMode::Empty, _) => true,
            (ShadowMode::Fake, DataKind::ContentStore) => false,
            (ShadowMode::Fake, _) => true,
            (ShadowMode::Filtered(Predicate::Round(_)), k) => k == DataKind::Location,
            (ShadowMode::Filtered(_), k) => k == DataKind::ContentStore,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fakes {
    pub device_id: String,
    pub location: (f64, f64),
}

impl Default for Fakes {
    fn default() -> Self {
        Fakes { device_id: FAKE_DEVICE_ID.to_owned(), location: FAKE_LOCATION }
    }
}

fn round_to(x: f64, decimals: u32) -> f64 {
    let f = 10f64.powi(decimals as i32);
    (x * f).round() / f
}

/// Applies one mode to a candidate of the given kind.
pub fn shadow_transform(
    mode: &ShadowMode,
    kind: DataKind,
    candidate: &Value,
    fakes: &Fakes,
) -> Result<PolicyDecision, ShadowError> {
    if !mode.supports(kind) {
        return Err(ShadowError::Unsupported { mode: mode.name().into(), kind });
    }
    let edit = |v: Value| Ok(PolicyDecision::Edit(v));
    match (mode, kind) {
        (ShadowMode::Pass, _) => Ok(PolicyDecision::Allow),
        (ShadowMode::Empty, DataKind::DeviceId) => edit(Value::from("")),
        (ShadowMode::Fake, DataKind::DeviceId) => edit(Value::from(fakes.device_id.as_str())),
        (ShadowMode::Fake, DataKind::Location) => {
            let real = LocationFix::from_value(candidate).ok_or(ShadowError::Schema(kind))?;
            edit(LocationFix::new(fakes.location.0, fakes.location.1, real.timestamp).to_value())
        }
        (ShadowMode::Filtered(Predicate::Round(n)), DataKind::Location) => {
            let real = LocationFix::from_value(candidate).ok_or(ShadowError::Schema(kind))?;
            edit(LocationFix::new(round_to(real.latitude, *n), round_to(real.longitude, *n), real.timestamp).to_value())
        }
        (ShadowMode::Empty, DataKind::ContentStore) => {
            let rs = ResultSet::from_value(candidate).ok_or(ShadowError::Schema(kind))?;
            edit(rs.empty_like().to_value())
        }
        (ShadowMode::Filtered(p), DataKind::ContentStore) => {
            let rs = ResultSet::from_value(candidate).ok_or(ShadowError::Schema(kind))?;
            let mut rows = Vec::new();
            for row in &rs.rows {
                if p.keeps(&rs, row)? {
                    rows.push(row.clone());
                }
            }
            edit(ResultSet { columns: rs.columns.clone(), rows }.to_value())
        }
        _ => Err(ShadowError::Unsupported { mode: mode.name().into(), kind }),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryConfig {
    package: String,
    kind: DataKind,
    mode: String,
    #[serde(default)]
    predicate: Option<String>,
    /// Content stores only; absent means every store.
    #[serde(default)]
    store: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShadowConfig {
    #[serde(default)]
    entries: Vec<EntryConfig>,
    #[serde(default)]
    fake_device_id: Option<String>,
    #[serde(default)]
    fake_location: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowEntry {
    pub package: String,
    pub kind: DataKind,
    pub store: Option<String>,
    pub mode: ShadowMode,
}

pub struct ShadowModule {
    entries: Vec<ShadowEntry>,
    fakes: Fakes,
    callbacks: CallbackSlot,
}

impl ShadowModule {
    pub fn new(entries: Vec<ShadowEntry>, fakes: Fakes) -> ShadowModule {
        ShadowModule { entries, fakes, callbacks: CallbackSlot::default() }
    }

    pub fn from_manifest(manifest: &ModuleManifest) -> Result<ShadowModule, ModuleFault> {
        let cfg: ShadowConfig = parse_config(manifest)?;
        let mut entries = Vec::new();
        for e in cfg.entries {
            let mode =
                ShadowMode::parse(&e.mode, e.predicate.as_deref()).map_err(|err| ModuleFault::new(err.to_string()))?;
            if !mode.supports(e.kind) {
                return Err(ModuleFault::new(ShadowError::Unsupported { mode: e.mode, kind: e.kind }.to_string()));
            }
            entries.push(ShadowEntry { package: e.package, kind: e.kind, store: e.store, mode });
        }
        let mut fakes = Fakes::default();
        if let Some(id) = cfg.fake_device_id {
            fakes.device_id = id;
        }
        if let Some(loc) = cfg.fake_location {
            if !LocationFix::new(loc.0, loc.1, 0).is_valid() {
                return Err(ModuleFault::new("invalid fake_location"));
            }
            fakes.location = loc;
        }
        Ok(ShadowModule::new(entries, fakes))
    }

    /// First entry for the pair wins; unlisted pairs pass.
    pub fn mode_for(&self, package: &str, kind: DataKind, store: Option<&str>) -> &ShadowMode {
        self.entries
            .iter()
            .find(|e| e.package == package && e.kind == kind && (e.store.is_none() || e.store.as_deref() == store))
            .map_or(&ShadowMode::Pass, |e| &e.mode)
    }
}

impl SecurityModule for ShadowModule {
    fn init(&self, ctx: &ModuleContext) -> Result<bool, ModuleFault> {
        self.callbacks.set(ctx.callbacks.clone());
        Ok(true)
    }

    fn enforce(&self, call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
        let kind = match call.id() {
            GET_DEVICE_ID => DataKind::DeviceId,
            GET_LAST_LOCATION => DataKind::Location,
            POST_QUERY => DataKind::ContentStore,
            _ => return Ok(PolicyDecision::Allow),
        };
        let (Some(candidate), Some(package)) = (call.candidate, self.callbacks.caller_package(call.creds)) else {
            return Ok(PolicyDecision::Allow);
        };
        let mode = self.mode_for(&package, kind, call.args.get_str("store"));
        shadow_transform(mode, kind, candidate, &self.fakes).map_err(|e| ModuleFault::new(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contacts() -> ResultSet {
        ResultSet::new(
            vec!["name".into(), "group".into()],
            vec![
                vec![Value::from("ann"), Value::from("work")],
                vec![Value::from("bob"), Value::from("private")],
                vec![Value::from("cy"), Value::from("work")],
            ],
        )
        .unwrap()
    }

    #[test]
    fn empty_keeps_columns() {
        let out =
            shadow_transform(&ShadowMode::Empty, DataKind::ContentStore, &contacts().to_value(), &Fakes::default())
                .unwrap();
        let PolicyDecision::Edit(v) = out else { panic!("expected edit") };
        let rs = ResultSet::from_value(&v).unwrap();
        assert_eq!(rs.columns, ["name", "group"]);
        assert!(rs.rows.is_empty());
    }

    #[test]
    fn fake_device_id() {
        let out =
            shadow_transform(&ShadowMode::Fake, DataKind::DeviceId, &Value::from("123"), &Fakes::default()).unwrap();
        assert_eq!(out, PolicyDecision::Edit(Value::from(FAKE_DEVICE_ID)));
    }

    #[test]
    fn filter_removes_private_rows() {
        let mode = ShadowMode::parse("filtered", Some("exclude:group=private")).unwrap();
        let PolicyDecision::Edit(v) =
            shadow_transform(&mode, DataKind::ContentStore, &contacts().to_value(), &Fakes::default()).unwrap()
        else {
            panic!("expected edit")
        };
        assert_eq!(ResultSet::from_value(&v).unwrap().rows.len(), 2);
    }

    #[test]
    fn predicate_parsing() {
        assert!(matches!("nope:x".parse::<Predicate>(), Err(ShadowError::UnknownPredicate(_))));
        assert!(matches!("exclude:group".parse::<Predicate>(), Err(ShadowError::UnknownPredicate(_))));
        assert_eq!("round:2".parse::<Predicate>().unwrap(), Predicate::Round(2));
        assert!(!ShadowMode::Empty.supports(DataKind::Location));
    }

    #[test]
    fn round_location() {
        let mode = ShadowMode::parse("filtered", Some("round:1")).unwrap();
        let fix = LocationFix::new(52.123, 13.456, 9);
        let PolicyDecision::Edit(v) =
            shadow_transform(&mode, DataKind::Location, &fix.to_value(), &Fakes::default()).unwrap()
        else {
            panic!("expected edit")
        };
        assert_eq!(LocationFix::from_value(&v).unwrap(), LocationFix::new(52.1, 13.5, 9));
    }
}
