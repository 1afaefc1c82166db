//! In-process method interposition for simulated apps.
//!
//! Every process owns a dispatch table. A method's entry is a stack of layers:
//! the original implementation at the bottom and one layer per active
//! redirect above it. Invocation runs the top layer; a monitor reaches the
//! layer beneath its own through [`CallContext::call_original`].

pub mod monitors;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{Bundle, Value, ValueKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrmError {
    #[error("malformed method descriptor `{0}`")]
    MalformedDescriptor(String),
    #[error("unknown method {0}")]
    UnknownMethod(String),
    #[error("cannot redirect to {0}")]
    UnresolvableTarget(String),
    #[error("stale method handle")]
    StaleHandle,
    #[error("argument mismatch: {0}")]
    ArgumentError(String),
    #[error("unknown monitor `{0}`")]
    UnknownMonitor(String),
    #[error("monitor bootstrap failed: {0}")]
    BootstrapFailed(String),
    #[error("no process {0}")]
    UnknownProcess(u32),
    #[error("{0} has no original below it")]
    NoOriginal(String),
    #[error("call denied by monitor: {0}")]
    Denied(String),
    #[error("method fault: {0}")]
    Fault(String),
}

/// `owner->name(kind,kind,…)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MethodRef {
    pub owner: String,
    pub name: String,
    pub arg_kinds: Vec<ValueKind>,
}

impl MethodRef {
    pub fn parse(descriptor: &str) -> Result<MethodRef, IrmError> {
        descriptor.parse()
    }

    /// Same signature, different implementation.
    pub fn with_owner(&self, owner: &str, name: &str) -> MethodRef {
        MethodRef { owner: owner.to_owned(), name: name.to_owned(), arg_kinds: self.arg_kinds.clone() }
    }

    pub fn check_args(&self, args: &[Value]) -> Result<(), IrmError> {
        if args.len() != self.arg_kinds.len() {
            return Err(IrmError::ArgumentError(format!(
                "{self} takes {} arguments, got {}",
                self.arg_kinds.len(),
                args.len()
            )));
        }
        for (i, (arg, kind)) in args.iter().zip(&self.arg_kinds).enumerate() {
            if arg.kind() != *kind {
                return Err(IrmError::ArgumentError(format!(
                    "{self}: argument {i} is {}, expected {kind}",
                    arg.kind()
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for MethodRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kinds: Vec<String> = self.arg_kinds.iter().map(|k| k.to_string()).collect();
        write!(f, "{}->{}({})", self.owner, self.name, kinds.join(","))
    }
}

impl FromStr for MethodRef {
    type Err = IrmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || IrmError::MalformedDescriptor(s.to_owned());
        let (owner, rest) = s.split_once("->").ok_or_else(bad)?;
        let (name, args) = rest.split_once('(').ok_or_else(bad)?;
        let args = args.strip_suffix(')').ok_or_else(bad)?;
        let (owner, name) = (owner.trim(), name.trim());
        if owner.is_empty() || name.is_empty() {
            return Err(bad());
        }
        let arg_kinds = args
            .split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(|a| a.parse::<ValueKind>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        Ok(MethodRef { owner: owner.to_owned(), name: name.to_owned(), arg_kinds })
    }
}

impl Serialize for MethodRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MethodRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// An implementation body.
pub type Target = Arc<dyn Fn(&mut CallContext<'_>, &[Value]) -> Result<Value, IrmError> + Send + Sync>;

pub fn target<F>(f: F) -> Target
where
    F: Fn(&mut CallContext<'_>, &[Value]) -> Result<Value, IrmError> + Send + Sync + 'static,
{
    Arc::new(f)
}

/// Token returned by a redirect; names one layer in one process.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MethodHandle {
    pid: u32,
    method: MethodRef,
    id: u64,
}

impl MethodHandle {
    pub fn pid(&self) -> u32 {
        self.pid
    }

    pub fn method(&self) -> &MethodRef {
        &self.method
    }
}

#[derive(Clone)]
struct Layer {
    /// 0 for the original implementation.
    id: u64,
    implementation: MethodRef,
    target: Target,
}

/// One process's dispatch table.
#[derive(Default)]
struct ProcessMethodTable {
    methods: BTreeMap<MethodRef, Vec<Layer>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum IrmEvent {
    MonitorSetup {
        pid: u32,
        monitor: String,
    },
    Redirect {
        pid: u32,
        from: MethodRef,
        to: MethodRef,
    },
    Remove {
        pid: u32,
        method: MethodRef,
    },
    AppStart {
        pid: u32,
    },
    /// `called` was invoked and `executed` ran.
    Exec {
        pid: u32,
        called: MethodRef,
        executed: MethodRef,
    },
}

impl IrmEvent {
    pub fn pid(&self) -> u32 {
        match self {
            IrmEvent::MonitorSetup { pid, .. }
            | IrmEvent::Redirect { pid, .. }
            | IrmEvent::Remove { pid, .. }
            | IrmEvent::AppStart { pid }
            | IrmEvent::Exec { pid, .. } => *pid,
        }
    }
}

/// Execution context handed to every target.
pub struct CallContext<'a> {
    runtime: &'a IrmRuntime,
    pid: u32,
    called: MethodRef,
    layers: Arc<Vec<Layer>>,
    position: usize,
}

impl CallContext<'_> {
    pub fn pid(&self) -> u32 {
        self.pid
    }

    pub fn called(&self) -> &MethodRef {
        &self.called
    }

    /// Runs the layer directly beneath the executing one.
    pub fn call_original(&mut self, args: &[Value]) -> Result<Value, IrmError> {
        if self.position == 0 {
            return Err(IrmError::NoOriginal(self.called.to_string()));
        }
        self.called.check_args(args)?;
        self.runtime.run_layer(self.pid, &self.called, self.layers.clone(), self.position - 1, args)
    }

    /// Calls another method through the process table.
    pub fn invoke(&mut self, method: &MethodRef, args: &[Value]) -> Result<Value, IrmError> {
        self.runtime.invoke(self.pid, method, args)
    }
}

/// Code injected into a process at startup.
pub trait Monitor: Send + Sync {
    fn id(&self) -> &str;

    /// Installs redirects. Runs before any app code in the process.
    fn setup(&self, runtime: &IrmRuntime, pid: u32, policy: &Bundle) -> Result<(), IrmError>;
}

/// Interposition runtime shared by all simulated processes.
pub struct IrmRuntime {
    library: RwLock<BTreeMap<MethodRef, Target>>,
    tables: RwLock<BTreeMap<u32, Arc<Mutex<ProcessMethodTable>>>>,
    monitors: RwLock<BTreeMap<String, Arc<dyn Monitor>>>,
    trace: Mutex<Vec<IrmEvent>>,
    next_handle: AtomicU64,
}

impl fmt::Debug for IrmRuntime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IrmRuntime")
            .field("library", &self.library.read().len())
            .field("processes", &self.tables.read().keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Default for IrmRuntime {
    fn default() -> Self {
        IrmRuntime {
            library: RwLock::new(BTreeMap::new()),
            tables: RwLock::new(BTreeMap::new()),
            monitors: RwLock::new(BTreeMap::new()),
            trace: Mutex::new(Vec::new()),
            next_handle: AtomicU64::new(1),
        }
    }
}

impl IrmRuntime {
    pub fn new() -> IrmRuntime {
        IrmRuntime::default()
    }

    /// Runtime with the stock API library and built-in monitors.
    pub fn standard() -> IrmRuntime {
        let rt = IrmRuntime::new();
        monitors::install_standard_library(&rt);
        rt.register_monitor(Arc::new(monitors::AppGuardMonitor));
        rt
    }

    /// Adds an implementation that every later process table contains.
    pub fn define(&self, descriptor: &str, body: Target) -> Result<MethodRef, IrmError> {
        let m = MethodRef::parse(descriptor)?;
        self.library.write().insert(m.clone(), body);
        Ok(m)
    }

    pub fn register_monitor(&self, monitor: Arc<dyn Monitor>) {
        self.monitors.write().insert(monitor.id().to_owned(), monitor);
    }

    pub fn has_monitor(&self, id: &str) -> bool {
        self.monitors.read().contains_key(id)
    }

    /// Creates the table of a new process from the library.
    pub fn create_process(&self, pid: u32) {
        let mut table = ProcessMethodTable::default();
        for (m, t) in self.library.read().iter() {
            table.methods.insert(m.clone(), vec![Layer { id: 0, implementation: m.clone(), target: t.clone() }]);
        }
        self.tables.write().insert(pid, Arc::new(Mutex::new(table)));
    }

    /// Drops a process table; its handles go stale.
    pub fn destroy_process(&self, pid: u32) {
        self.tables.write().remove(&pid);
    }

    pub fn has_process(&self, pid: u32) -> bool {
        self.tables.read().contains_key(&pid)
    }

    /// Adds a process-local method (app code).
    pub fn define_in_process(&self, pid: u32, descriptor: &str, body: Target) -> Result<MethodRef, IrmError> {
        let m = MethodRef::parse(descriptor)?;
        let table = self.table(pid)?;
        table.lock().methods.insert(m.clone(), vec![Layer { id: 0, implementation: m.clone(), target: body }]);
        Ok(m)
    }

    fn table(&self, pid: u32) -> Result<Arc<Mutex<ProcessMethodTable>>, IrmError> {
        self.tables.read().get(&pid).cloned().ok_or(IrmError::UnknownProcess(pid))
    }

    fn record(&self, event: IrmEvent) {
        self.trace.lock().push(event);
    }

    pub fn trace(&self) -> Vec<IrmEvent> {
        self.trace.lock().clone()
    }

    pub fn take_trace(&self) -> Vec<IrmEvent> {
        std::mem::take(&mut *self.trace.lock())
    }

    /// Diverts `from` to the implementation of `to` inside one process.
    pub fn redirect_method(&self, pid: u32, from: &MethodRef, to: &MethodRef) -> Result<MethodHandle, IrmError> {
        if from.arg_kinds != to.arg_kinds {
            return Err(IrmError::UnresolvableTarget(format!("{to} does not match the signature of {from}")));
        }
        let table = self.table(pid)?;
        let mut table = table.lock();
        let to_target = table
            .methods
            .get(to)
            .and_then(|layers| layers.first())
            .map(|l| l.target.clone())
            .or_else(|| self.library.read().get(to).cloned())
            .ok_or_else(|| IrmError::UnresolvableTarget(to.to_string()))?;
        let layers = table.methods.get_mut(from).ok_or_else(|| IrmError::UnknownMethod(from.to_string()))?;
        let id = self.next_handle.fetch_add(1, Ordering::Relaxed);
        layers.push(Layer { id, implementation: to.clone(), target: to_target });
        drop(table);
        self.record(IrmEvent::Redirect { pid, from: from.clone(), to: to.clone() });
        Ok(MethodHandle { pid, method: from.clone(), id })
    }

    pub fn redirect(&self, pid: u32, from: &str, to: &str) -> Result<MethodHandle, IrmError> {
        self.redirect_method(pid, &MethodRef::parse(from)?, &MethodRef::parse(to)?)
    }

    /// Removes one redirect layer; the handle goes stale.
    pub fn remove_redirect(&self, handle: &MethodHandle) -> Result<(), IrmError> {
        let table = self.table(handle.pid).map_err(|_| IrmError::StaleHandle)?;
        let mut table = table.lock();
        let layers = table.methods.get_mut(&handle.method).ok_or(IrmError::StaleHandle)?;
        let idx = layers.iter().position(|l| l.id == handle.id).ok_or(IrmError::StaleHandle)?;
        layers.remove(idx);
        drop(table);
        self.record(IrmEvent::Remove { pid: handle.pid, method: handle.method.clone() });
        Ok(())
    }

    /// Runs whatever sat beneath `handle`'s layer.
    pub fn call_original(&self, handle: &MethodHandle, args: &[Value]) -> Result<Value, IrmError> {
        let table = self.table(handle.pid).map_err(|_| IrmError::StaleHandle)?;
        let layers = {
            let table = table.lock();
            let layers = table.methods.get(&handle.method).ok_or(IrmError::StaleHandle)?;
            Arc::new(layers.clone())
        };
        let idx = layers.iter().position(|l| l.id == handle.id).ok_or(IrmError::StaleHandle)?;
        handle.method.check_args(args)?;
        self.run_layer(handle.pid, &handle.method, layers, idx - 1, args)
    }

    /// Calls `method` in process `pid` through its table.
    pub fn invoke(&self, pid: u32, method: &MethodRef, args: &[Value]) -> Result<Value, IrmError> {
        let table = self.table(pid)?;
        let layers = {
            let table = table.lock();
            let layers = table.methods.get(method).ok_or_else(|| IrmError::UnknownMethod(method.to_string()))?;
            Arc::new(layers.clone())
        };
        method.check_args(args)?;
        let top = layers.len() - 1;
        self.run_layer(pid, method, layers, top, args)
    }

    pub fn invoke_str(&self, pid: u32, descriptor: &str, args: &[Value]) -> Result<Value, IrmError> {
        self.invoke(pid, &MethodRef::parse(descriptor)?, args)
    }

    fn run_layer(
        &self,
        pid: u32,
        called: &MethodRef,
        layers: Arc<Vec<Layer>>,
        position: usize,
        args: &[Value],
    ) -> Result<Value, IrmError> {
        let layer = layers[position].clone();
        self.record(IrmEvent::Exec { pid, called: called.clone(), executed: layer.implementation.clone() });
        let mut ctx = CallContext { runtime: self, pid, called: called.clone(), layers, position };
        (layer.target)(&mut ctx, args)
    }

    /// Runs a monitor's setup in a fresh process, before any app code.
    pub fn bootstrap_monitor(&self, pid: u32, monitor_id: &str, policy: &Bundle) -> Result<(), IrmError> {
        let monitor = self
            .monitors
            .read()
            .get(monitor_id)
            .cloned()
            .ok_or_else(|| IrmError::UnknownMonitor(monitor_id.to_owned()))?;
        self.record(IrmEvent::MonitorSetup { pid, monitor: monitor_id.to_owned() });
        monitor.setup(self, pid, policy).map_err(|e| IrmError::BootstrapFailed(format!("{monitor_id}: {e}")))
    }

    pub fn mark_app_start(&self, pid: u32) {
        self.record(IrmEvent::AppStart { pid });
    }

    /// Methods present in a process table.
    pub fn methods(&self, pid: u32) -> Result<Vec<MethodRef>, IrmError> {
        Ok(self.table(pid)?.lock().methods.keys().cloned().collect())
    }

    /// Current depth of redirect layers on `method`.
    pub fn redirect_depth(&self, pid: u32, method: &MethodRef) -> Result<usize, IrmError> {
        let table = self.table(pid)?;
        let table = table.lock();
        let layers = table.methods.get(method).ok_or_else(|| IrmError::UnknownMethod(method.to_string()))?;
        Ok(layers.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(tag: &'static str) -> Target {
        target(move |_, _| Ok(Value::from(tag)))
    }

    fn runtime() -> IrmRuntime {
        let rt = IrmRuntime::new();
        rt.define("com.test.A->foo()", tagged("A.foo")).unwrap();
        rt.define("com.test.B->bar()", tagged("B.bar")).unwrap();
        rt.create_process(100);
        rt.create_process(101);
        rt
    }

    #[test]
    fn descriptor_round_trip() {
        let m = MethodRef::parse("java.net.URL->openConnection(text, int)").unwrap();
        assert_eq!(m.to_string(), "java.net.URL->openConnection(text,int)");
        assert!(MethodRef::parse("->x()").is_err());
        assert!(MethodRef::parse("A->x(widget)").is_err());
    }

    #[test]
    fn redirect_and_escape() {
        let rt = runtime();
        let foo = MethodRef::parse("com.test.A->foo()").unwrap();
        assert_eq!(rt.invoke(100, &foo, &[]).unwrap(), Value::from("A.foo"));
        let h = rt.redirect(100, "com.test.A->foo()", "com.test.B->bar()").unwrap();
        assert_eq!(rt.invoke(100, &foo, &[]).unwrap(), Value::from("B.bar"));
        assert_eq!(rt.call_original(&h, &[]).unwrap(), Value::from("A.foo"));
        assert_eq!(rt.invoke(101, &foo, &[]).unwrap(), Value::from("A.foo"));
        assert_eq!(
            rt.call_original(&h, &[Value::Int(1)]).unwrap_err(),
            IrmError::ArgumentError("com.test.A->foo() takes 0 arguments, got 1".into())
        );
        rt.remove_redirect(&h).unwrap();
        assert_eq!(rt.remove_redirect(&h).unwrap_err(), IrmError::StaleHandle);
        assert_eq!(rt.call_original(&h, &[]).unwrap_err(), IrmError::StaleHandle);
        assert_eq!(rt.invoke(100, &foo, &[]).unwrap(), Value::from("A.foo"));
    }

    #[test]
    fn monitor_rewrites_argument() {
        let rt = IrmRuntime::new();
        rt.define("net.Url->open(text)", target(|_, args| Ok(args[0].clone()))).unwrap();
        rt.define(
            "mon.M->open(text)",
            target(|ctx, args| {
                let url = args[0].as_str().unwrap_or_default().replacen("http://", "https://", 1);
                ctx.call_original(&[Value::from(url)])
            }),
        )
        .unwrap();
        rt.create_process(7);
        rt.redirect(7, "net.Url->open(text)", "mon.M->open(text)").unwrap();
        let out = rt.invoke_str(7, "net.Url->open(text)", &[Value::from("http://x")]).unwrap();
        assert_eq!(out, Value::from("https://x"));
    }

    #[test]
    fn unknown_targets() {
        let rt = runtime();
        assert!(matches!(rt.redirect(100, "com.test.A->nope()", "com.test.B->bar()"), Err(IrmError::UnknownMethod(_))));
        assert!(matches!(
            rt.redirect(100, "com.test.A->foo()", "com.test.C->baz()"),
            Err(IrmError::UnresolvableTarget(_))
        ));
        assert!(matches!(rt.bootstrap_monitor(100, "none", &Bundle::new()), Err(IrmError::UnknownMonitor(_))));
    }
}
