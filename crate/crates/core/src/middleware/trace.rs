//! Service-level trace of operations and package events.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::framework::PackageEventKind;

/// One completed service operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub op_id: u64,
    /// Completion sequence number.
    pub seq: u64,
    pub op: String,
    pub caller_uid: Option<u32>,
    pub caller_pid: Option<u32>,
    pub detail: Json,
    pub outcome: Json,
}

/// One package event, stamped after the module's event function returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub op_id: u64,
    pub seq: u64,
    pub kind: PackageEventKind,
    pub package: String,
    /// Whether a module observed it; excluded from observable comparisons.
    pub delivered: bool,
}

/// The parts of a trace that only depend on service behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableTrace {
    pub ops: Vec<(String, Json, Json)>,
    pub events: Vec<(u64, PackageEventKind, String)>,
}

#[derive(Debug)]
pub struct Trace {
    clock: AtomicU64,
    next_op: AtomicU64,
    enabled: AtomicBool,
    ops: Mutex<Vec<OpRecord>>,
    events: Mutex<Vec<EventRecord>>,
}

impl Default for Trace {
    fn default() -> Self {
        Trace {
            clock: AtomicU64::new(0),
            next_op: AtomicU64::new(1),
            enabled: AtomicBool::new(true),
            ops: Mutex::new(Vec::new()),
            events: Mutex::new(Vec::new()),
        }
    }
}

impl Trace {
    pub fn set_enabled(&self, flag: bool) {
        self.enabled.store(flag, Ordering::Relaxed);
    }

    pub fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub fn begin(&self) -> u64 {
        self.next_op.fetch_add(1, Ordering::SeqCst)
    }

    pub fn event(&self, op_id: u64, kind: PackageEventKind, package: &str, delivered: bool) {
        let seq = self.tick();
        if self.enabled.load(Ordering::Relaxed) {
            self.events.lock().push(EventRecord { op_id, seq, kind, package: package.to_owned(), delivered });
        }
    }

    pub fn complete(&self, op_id: u64, op: &str, caller: Option<(u32, u32)>, detail: Json, outcome: Json) {
        let seq = self.tick();
        if self.enabled.load(Ordering::Relaxed) {
            self.ops.lock().push(OpRecord {
                op_id,
                seq,
                op: op.to_owned(),
                caller_uid: caller.map(|c| c.0),
                caller_pid: caller.map(|c| c.1),
                detail,
                outcome,
            });
        }
    }

    pub fn ops(&self) -> Vec<OpRecord> {
        self.ops.lock().clone()
    }

    pub fn events(&self) -> Vec<EventRecord> {
        self.events.lock().clone()
    }

    pub fn observable(&self) -> ObservableTrace {
        ObservableTrace {
            ops: self.ops.lock().iter().map(|o| (o.op.clone(), o.detail.clone(), o.outcome.clone())).collect(),
            events: self.events.lock().iter().map(|e| (e.op_id, e.kind, e.package.clone())).collect(),
        }
    }

    /// Pairs of (event seq, completion seq of the operation that fired it).
    pub fn event_completion_pairs(&self) -> Vec<(u64, Option<u64>)> {
        let ops = self.ops.lock();
        self.events.lock().iter().map(|e| (e.seq, ops.iter().find(|o| o.op_id == e.op_id).map(|o| o.seq))).collect()
    }
}
