//! Simulated kernel object layer with MAC mediation behind the KMAC adapter.
//!
//! Without a kernel module the layer runs in pass-through mode: every check
//! allows and every label is empty.

pub mod te;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{Bundle, List, Value};
use crate::framework::{hooks, Verdict};
use crate::model::Credentials;

pub use te::{AllowRule, KernelPolicy, LabelAssignment, SecurityLabel, TeKernelModule, TE_TYPE_KEY};

pub const INIT_PID: u32 = 1;
pub const ZYGOTE_PID: u32 = 2;
pub const SYSTEM_SERVER_PID: u32 = 3;
pub const FIRST_APP_PID: u32 = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("malformed KMAC arguments: {0}")]
    MalformedArgs(String),
    #[error("unknown connection {0}")]
    UnknownConnection(u64),
    #[error("unknown kernel object `{0}`")]
    UnknownObject(String),
    #[error("kernel object `{0}` already exists")]
    DuplicateObject(String),
    #[error("caller is not privileged for KMAC management")]
    PrivilegeDenied,
    #[error("unknown pid {0}")]
    UnknownPid(u32),
    #[error("spawn denied by {0}")]
    SpawnDenied(String),
    #[error("pid {0} is not the spawner")]
    NotSpawner(u32),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    File,
    Connection,
    Process,
}

impl ObjectKind {
    /// TE object class of objects of this kind.
    pub fn class(self) -> &'static str {
        match self {
            ObjectKind::File => "file",
            ObjectKind::Connection => "connection",
            ObjectKind::Process => "process",
        }
    }
}

/// Reference to a kernel object.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectRef {
    File(String),
    Connection(u64),
    Process(u32),
}

impl ObjectRef {
    pub fn kind(&self) -> ObjectKind {
        match self {
            ObjectRef::File(_) => ObjectKind::File,
            ObjectRef::Connection(_) => ObjectKind::Connection,
            ObjectRef::Process(_) => ObjectKind::Process,
        }
    }

    fn describe(&self) -> String {
        match self {
            ObjectRef::File(p) => p.clone(),
            ObjectRef::Connection(c) => format!("connection:{c}"),
            ObjectRef::Process(p) => format!("process:{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelObject {
    pub kind: ObjectKind,
    pub id: String,
    pub label: SecurityLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub pid: u32,
    pub uid: u32,
    pub package: String,
    pub label: SecurityLabel,
    pub parent_pid: u32,
}

impl ProcessRecord {
    pub fn credentials(&self) -> Credentials {
        Credentials::with_package(self.uid, self.pid, self.package.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpawnRequest {
    pub uid: u32,
    pub package: String,
    /// Requested TE type; overrides the policy's label function.
    #[serde(default)]
    pub label_hint: Option<String>,
}

/// One kernel denial, enforced or merely audited.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AuditRecord {
    pub subject: String,
    pub object: String,
    pub class: String,
    pub op: String,
    pub enforced: bool,
}

impl AuditRecord {
    /// The access quadruple, without the mode flag.
    pub fn access(&self) -> (String, String, String, String) {
        (self.subject.clone(), self.object.clone(), self.class.clone(), self.op.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Connection {
    from_pid: u32,
    to_pid: u32,
}

#[derive(Debug, Default)]
struct Objects {
    files: BTreeMap<String, SecurityLabel>,
    processes: BTreeMap<u32, ProcessRecord>,
    connections: BTreeMap<u64, Connection>,
    next_pid: u32,
    next_conn: u64,
}

/// Kernel object tables plus the KMAC adapter.
#[derive(Debug)]
pub struct Kernel {
    module: Option<TeKernelModule>,
    objects: RwLock<Objects>,
    enforcing: AtomicBool,
    ready: AtomicBool,
    audit: Mutex<Vec<AuditRecord>>,
}

fn label_text(label: &SecurityLabel) -> String {
    label.te_type().map(str::to_owned).unwrap_or_else(|| label.as_bundle().to_plain_json().to_string())
}

impl Kernel {
    /// Kernel with the TE reference module, or pass-through when `policy` is `None`.
    pub fn new(policy: Option<&KernelPolicy>) -> Kernel {
        let kernel = Kernel {
            module: policy.map(TeKernelModule::new),
            objects: RwLock::new(Objects { next_pid: FIRST_APP_PID, next_conn: 1, ..Objects::default() }),
            enforcing: AtomicBool::new(policy.is_none_or(|p| p.enforcing)),
            ready: AtomicBool::new(false),
            audit: Mutex::new(Vec::new()),
        };
        kernel.boot_processes();
        kernel
    }

    pub fn pass_through() -> Kernel {
        Kernel::new(None)
    }

    fn boot_processes(&self) {
        let mut objs = self.objects.write();
        for (pid, uid, name, parent) in [
            (INIT_PID, 0, "init", 0),
            (ZYGOTE_PID, 0, "zygote", INIT_PID),
            (SYSTEM_SERVER_PID, crate::model::SYSTEM_UID, "system_server", ZYGOTE_PID),
        ] {
            let label = self.label_for_process(uid, name, None);
            objs.processes.insert(pid, ProcessRecord { pid, uid, package: name.to_owned(), label, parent_pid: parent });
        }
    }

    pub fn te_module(&self) -> Option<&TeKernelModule> {
        self.module.as_ref()
    }

    pub fn is_pass_through(&self) -> bool {
        self.module.is_none()
    }

    /// Readies the adapter. `false` means no kernel module is installed.
    pub fn kmac_init(&self) -> bool {
        self.ready.store(true, Ordering::SeqCst);
        self.module.is_some()
    }

    pub fn is_ready(&self) -> bool {
        self.ready.load(Ordering::SeqCst)
    }

    fn label_for_process(&self, uid: u32, package: &str, hint: Option<&str>) -> SecurityLabel {
        match (&self.module, hint) {
            (None, _) => SecurityLabel::empty(),
            (Some(_), Some(t)) => SecurityLabel::of_type(t),
            (Some(m), None) => m.process_label(uid, package),
        }
    }

    /// Rule check honoring the enforcing mode; denials are audited.
    fn decide(&self, subject: &SecurityLabel, object: &SecurityLabel, class: &str, op: &str) -> bool {
        let Some(module) = &self.module else { return true };
        if module.allows(subject, object, class, op) {
            return true;
        }
        let enforced = self.is_enforcing();
        self.audit.lock().push(AuditRecord {
            subject: label_text(subject),
            object: label_text(object),
            class: class.to_owned(),
            op: op.to_owned(),
            enforced,
        });
        !enforced
    }

    /// Management privilege: the (subject, subject, kmac, admin) rule.
    /// Always enforced, even in permissive mode.
    fn require_privilege(&self, caller_pid: u32) -> Result<(), KernelError> {
        let Some(module) = &self.module else { return Ok(()) };
        let label = self.kmac_get_process_context(caller_pid)?;
        if module.allows(&label, &label, "kmac", "admin") {
            Ok(())
        } else {
            Err(KernelError::PrivilegeDenied)
        }
    }

    /// Checks an access quadruple given as
    /// `{subject: label, object: label, class: text, op: text}`.
    pub fn kmac_check_access(&self, args: &Bundle) -> Result<bool, KernelError> {
        let label = |key: &str| {
            args.get_bundle(key)
                .cloned()
                .map(SecurityLabel)
                .ok_or_else(|| KernelError::MalformedArgs(format!("missing `{key}` label")))
        };
        let text = |key: &str| {
            args.get_str(key).map(str::to_owned).ok_or_else(|| KernelError::MalformedArgs(format!("missing `{key}`")))
        };
        let (subject, object, class, op) = (label("subject")?, label("object")?, text("class")?, text("op")?);
        Ok(self.decide(&subject, &object, &class, &op))
    }

    pub fn check_access(&self, subject: &SecurityLabel, object: &SecurityLabel, class: &str, op: &str) -> bool {
        self.decide(subject, object, class, op)
    }

    /// Opens a connection from `from_pid` to `to_pid`.
    pub fn connect(&self, from_pid: u32, to_pid: u32) -> Result<u64, KernelError> {
        let mut objs = self.objects.write();
        for pid in [from_pid, to_pid] {
            if !objs.processes.contains_key(&pid) {
                return Err(KernelError::UnknownPid(pid));
            }
        }
        let id = objs.next_conn;
        objs.next_conn += 1;
        objs.connections.insert(id, Connection { from_pid, to_pid });
        Ok(id)
    }

    pub fn close_connection(&self, id: u64) -> Result<(), KernelError> {
        self.objects.write().connections.remove(&id).map(|_| ()).ok_or(KernelError::UnknownConnection(id))
    }

    /// Label of the initiating process of a connection.
    pub fn kmac_get_peer_context(&self, connection: u64) -> Result<SecurityLabel, KernelError> {
        let objs = self.objects.read();
        let conn = objs.connections.get(&connection).ok_or(KernelError::UnknownConnection(connection))?;
        let peer = objs.processes.get(&conn.from_pid).ok_or(KernelError::UnknownConnection(connection))?;
        if !objs.processes.contains_key(&conn.to_pid) {
            return Err(KernelError::UnknownConnection(connection));
        }
        Ok(peer.label.clone())
    }

    pub fn create_file(&self, path: &str) -> Result<SecurityLabel, KernelError> {
        if !path.starts_with('/') {
            return Err(KernelError::MalformedArgs(format!("`{path}` is not an absolute path")));
        }
        let label = self.module.as_ref().map_or_else(SecurityLabel::empty, |m| m.file_label(path));
        let mut objs = self.objects.write();
        if objs.files.contains_key(path) {
            return Err(KernelError::DuplicateObject(path.to_owned()));
        }
        objs.files.insert(path.to_owned(), label.clone());
        Ok(label)
    }

    /// Removes a file and everything below it.
    pub fn remove_tree(&self, path: &str) {
        let prefix = format!("{}/", path.trim_end_matches('/'));
        self.objects.write().files.retain(|p, _| p != path && !p.starts_with(&prefix));
    }

    pub fn file_exists(&self, path: &str) -> bool {
        self.objects.read().files.contains_key(path)
    }

    pub fn kmac_get_context(&self, path: &str) -> Result<SecurityLabel, KernelError> {
        self.objects.read().files.get(path).cloned().ok_or_else(|| KernelError::UnknownObject(path.to_owned()))
    }

    pub fn kmac_set_context(&self, caller_pid: u32, path: &str, label: SecurityLabel) -> Result<bool, KernelError> {
        self.require_privilege(caller_pid)?;
        let mut objs = self.objects.write();
        let slot = objs.files.get_mut(path).ok_or_else(|| KernelError::UnknownObject(path.to_owned()))?;
        *slot = label;
        Ok(true)
    }

    /// Resets an object's label to the policy-declared default.
    pub fn kmac_restore_context(&self, caller_pid: u32, path: &str) -> Result<SecurityLabel, KernelError> {
        self.require_privilege(caller_pid)?;
        let label = self.module.as_ref().map_or_else(SecurityLabel::empty, |m| m.file_label(path));
        let mut objs = self.objects.write();
        let slot = objs.files.get_mut(path).ok_or_else(|| KernelError::UnknownObject(path.to_owned()))?;
        *slot = label.clone();
        Ok(label)
    }

    /// Privileged relabel of a live process.
    pub fn kmac_set_process_context(
        &self,
        caller_pid: u32,
        pid: u32,
        label: SecurityLabel,
    ) -> Result<bool, KernelError> {
        self.require_privilege(caller_pid)?;
        let mut objs = self.objects.write();
        let p = objs.processes.get_mut(&pid).ok_or(KernelError::UnknownPid(pid))?;
        p.label = label;
        Ok(true)
    }

    pub fn kmac_set_enforcing(&self, caller_pid: u32, flag: bool) -> Result<(), KernelError> {
        self.require_privilege(caller_pid)?;
        if self.module.is_some() {
            self.enforcing.store(flag, Ordering::SeqCst);
        }
        Ok(())
    }

    pub fn kmac_is_enforcing(&self) -> bool {
        self.is_enforcing()
    }

    fn is_enforcing(&self) -> bool {
        self.module.is_some() && self.enforcing.load(Ordering::SeqCst)
    }

    pub fn kmac_get_process_context(&self, pid: u32) -> Result<SecurityLabel, KernelError> {
        self.objects.read().processes.get(&pid).map(|p| p.label.clone()).ok_or(KernelError::UnknownPid(pid))
    }

    /// `{bool: name}` reads one boolean; anything else lists them all.
    pub fn kmac_get_config(&self, args: &Bundle) -> Result<Bundle, KernelError> {
        let booleans = self.module.as_ref().map(|m| m.booleans()).unwrap_or_default();
        if let Some(name) = args.get_str("bool") {
            let value = booleans.get(name).ok_or_else(|| KernelError::UnknownKey(name.to_owned()))?;
            return Ok(Bundle::new().with("bool", name).with("value", *value));
        }
        Ok(Bundle::new().with("booleans", List::of_text(booleans.keys().cloned())))
    }

    /// `{bool: name, value: bool}` defines or updates a named boolean.
    pub fn kmac_set_config(&self, caller_pid: u32, conf: &Bundle) -> Result<bool, KernelError> {
        self.require_privilege(caller_pid)?;
        let name = conf
            .get_str("bool")
            .ok_or_else(|| KernelError::UnknownKey(conf.keys().next().unwrap_or("<empty>").to_owned()))?;
        let value =
            conf.get_bool("value").ok_or_else(|| KernelError::MalformedArgs("`value` must be a boolean".into()))?;
        match &self.module {
            Some(m) => {
                m.set_boolean(name, value);
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Spawns an app process on behalf of the spawner.
    ///
    /// The requestor's peer context decides the uid policy, then the label
    /// policy; both must allow.
    pub fn spawn_process(&self, requestor: &Credentials, request: &SpawnRequest) -> Result<ProcessRecord, KernelError> {
        if requestor.pid != ZYGOTE_PID {
            return Err(KernelError::NotSpawner(requestor.pid));
        }
        let conn = self.connect(requestor.pid, ZYGOTE_PID)?;
        let peer = self.kmac_get_peer_context(conn);
        self.close_connection(conn)?;
        let peer = peer?;
        let hook_name = |id: &str| id.split_once('.').map_or(id, |(_, n)| n).to_owned();
        if !self.decide(&peer, &peer, "zygote", "specifyids") {
            return Err(KernelError::SpawnDenied(hook_name(hooks::ZYGOTE_UID_POLICY)));
        }
        if !self.decide(&peer, &peer, "zygote", "specifyseinfo") {
            return Err(KernelError::SpawnDenied(hook_name(hooks::ZYGOTE_LABEL_POLICY)));
        }
        let label = self.label_for_process(request.uid, &request.package, request.label_hint.as_deref());
        let mut objs = self.objects.write();
        let pid = objs.next_pid;
        objs.next_pid += 1;
        let record =
            ProcessRecord { pid, uid: request.uid, package: request.package.clone(), label, parent_pid: requestor.pid };
        objs.processes.insert(pid, record.clone());
        Ok(record)
    }

    /// Terminates a process; its connections close with it.
    pub fn kill_process(&self, pid: u32) -> Result<ProcessRecord, KernelError> {
        let mut objs = self.objects.write();
        let record = objs.processes.remove(&pid).ok_or(KernelError::UnknownPid(pid))?;
        objs.connections.retain(|_, c| c.from_pid != pid && c.to_pid != pid);
        Ok(record)
    }

    pub fn process(&self, pid: u32) -> Option<ProcessRecord> {
        self.objects.read().processes.get(&pid).cloned()
    }

    pub fn processes(&self) -> Vec<ProcessRecord> {
        self.objects.read().processes.values().cloned().collect()
    }

    pub fn object(&self, object: &ObjectRef) -> Result<KernelObject, KernelError> {
        let objs = self.objects.read();
        let missing = || KernelError::UnknownObject(object.describe());
        let label = match object {
            ObjectRef::File(p) => objs.files.get(p).cloned().ok_or_else(missing)?,
            ObjectRef::Process(pid) => objs.processes.get(pid).map(|p| p.label.clone()).ok_or_else(missing)?,
            ObjectRef::Connection(id) => {
                let c = objs.connections.get(id).ok_or_else(missing)?;
                objs.processes.get(&c.to_pid).map(|p| p.label.clone()).ok_or_else(missing)?
            }
        };
        Ok(KernelObject { kind: object.kind(), id: object.describe(), label })
    }

    /// Truncation-only mediation of `operation` by `pid` on `object`.
    pub fn kernel_mediate(&self, pid: u32, object: &ObjectRef, operation: &str) -> Result<Verdict, KernelError> {
        let subject = self.kmac_get_process_context(pid)?;
        let target = self.object(object)?;
        Ok(if self.decide(&subject, &target.label, target.kind.class(), operation) {
            Verdict::Allow
        } else {
            Verdict::Deny(format!("kernel: {} {} denied", target.kind.class(), operation))
        })
    }

    pub fn drain_audit(&self) -> Vec<AuditRecord> {
        std::mem::take(&mut *self.audit.lock())
    }

    pub fn audit_len(&self) -> usize {
        self.audit.lock().len()
    }
}

impl From<SecurityLabel> for Value {
    fn from(label: SecurityLabel) -> Value {
        Value::Bundle(label.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn te_kernel(rules: Vec<AllowRule>) -> Kernel {
        let mut policy = KernelPolicy::baseline();
        policy.rules.extend(rules);
        let k = Kernel::new(Some(&policy));
        assert!(k.kmac_init());
        k
    }

    fn zygote() -> Credentials {
        Credentials::new(0, ZYGOTE_PID)
    }

    fn spawn(k: &Kernel, uid: u32, pkg: &str) -> ProcessRecord {
        k.spawn_process(&zygote(), &SpawnRequest { uid, package: pkg.into(), label_hint: None }).unwrap()
    }

    #[test]
    fn pass_through_allows_everything() {
        let k = Kernel::pass_through();
        assert!(!k.kmac_init());
        let p = spawn(&k, 10001, "com.a");
        assert!(p.label.is_empty());
        k.create_file("/system/bin/sh").unwrap();
        let v = k.kernel_mediate(p.pid, &ObjectRef::File("/system/bin/sh".into()), "write").unwrap();
        assert!(v.is_allow());
        assert!(!k.kmac_is_enforcing());
    }

    #[test]
    fn check_access_quadruple() {
        let k = te_kernel(vec![]);
        let args = Bundle::new()
            .with("subject", SecurityLabel::of_type("untrusted_app_t"))
            .with("object", SecurityLabel::of_type("app_data_t"))
            .with("class", "file")
            .with("op", "open");
        assert!(k.kmac_check_access(&args).unwrap());
        let denied = args.clone().with("object", SecurityLabel::of_type("system_file_t")).with("op", "write");
        assert!(!k.kmac_check_access(&denied).unwrap());
        k.kmac_set_enforcing(SYSTEM_SERVER_PID, false).unwrap();
        assert!(k.kmac_check_access(&denied).unwrap());
        let audit = k.drain_audit();
        assert_eq!(audit.len(), 2);
        assert!(audit[0].enforced && !audit[1].enforced);
        let mut missing = args;
        missing.remove("class");
        assert!(matches!(k.kmac_check_access(&missing), Err(KernelError::MalformedArgs(_))));
    }

    #[test]
    fn spawn_needs_specifyids() {
        let mut policy = KernelPolicy::baseline();
        policy.rules.retain(|r| r.op != "specifyids");
        let k = Kernel::new(Some(&policy));
        let err = k
            .spawn_process(&zygote(), &SpawnRequest { uid: 10001, package: "com.a".into(), label_hint: None })
            .unwrap_err();
        assert_eq!(err, KernelError::SpawnDenied("applyUidSecurityPolicy".into()));
    }

    #[test]
    fn peer_context_and_closed_connection() {
        let k = te_kernel(vec![]);
        let p = spawn(&k, 10001, "com.a");
        let c = k.connect(p.pid, ZYGOTE_PID).unwrap();
        assert_eq!(k.kmac_get_peer_context(c).unwrap().te_type(), Some("untrusted_app_t"));
        k.close_connection(c).unwrap();
        assert_eq!(k.kmac_get_peer_context(c).unwrap_err(), KernelError::UnknownConnection(c));
    }

    #[test]
    fn relabel_requires_privilege() {
        let k = te_kernel(vec![]);
        let app = spawn(&k, 10001, "com.a");
        k.create_file("/system/etc/hosts").unwrap();
        let err = k.kmac_set_context(app.pid, "/system/etc/hosts", SecurityLabel::of_type("x_t")).unwrap_err();
        assert_eq!(err, KernelError::PrivilegeDenied);
        let l = SecurityLabel::of_type("etc_t");
        assert!(k.kmac_set_context(SYSTEM_SERVER_PID, "/system/etc/hosts", l.clone()).unwrap());
        assert_eq!(k.kmac_get_context("/system/etc/hosts").unwrap(), l);
        let restored = k.kmac_restore_context(SYSTEM_SERVER_PID, "/system/etc/hosts").unwrap();
        assert_eq!(restored.te_type(), Some("system_file_t"));
        assert_eq!(k.kmac_set_enforcing(app.pid, true).unwrap_err(), KernelError::PrivilegeDenied);
    }

    #[test]
    fn config_booleans() {
        let k = te_kernel(vec![]);
        let all = k.kmac_get_config(&Bundle::new()).unwrap();
        assert_eq!(all.get_text_list("booleans"), Some(vec![]));
        let conf = Bundle::new().with("bool", "allow_debug").with("value", true);
        assert!(k.kmac_set_config(SYSTEM_SERVER_PID, &conf).unwrap());
        let one = k.kmac_get_config(&Bundle::new().with("bool", "allow_debug")).unwrap();
        assert_eq!(one.get_bool("value"), Some(true));
        let app = spawn(&k, 10001, "com.a");
        assert_eq!(k.kmac_set_config(app.pid, &conf).unwrap_err(), KernelError::PrivilegeDenied);
    }

    #[test]
    fn dead_pid_is_unknown() {
        let k = te_kernel(vec![]);
        let p = spawn(&k, 10001, "com.a");
        assert_eq!(p.pid, FIRST_APP_PID);
        k.kill_process(p.pid).unwrap();
        assert_eq!(k.kmac_get_process_context(p.pid).unwrap_err(), KernelError::UnknownPid(p.pid));
        assert_eq!(spawn(&k, 10001, "com.a").pid, FIRST_APP_PID + 1);
    }
}
