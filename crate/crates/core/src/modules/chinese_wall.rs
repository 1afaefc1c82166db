//! Chinese Wall over the app interaction graph (XManDroid style), with a
//! domain-isolation configuration (TrustDroid style).

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, List, Value};
use crate::framework::hooks::{GET_INSTALLED_PACKAGES, IPC_HOOKS, REPORT_INTERACTION, SCAN_PACKAGE};
use crate::framework::{
    HookCall, ModuleContext, ModuleFault, ModuleManifest, PackageEvent, PolicyDecision, SecurityModule,
};
use crate::model::{Credentials, PackageInfo};

use super::{parse_config, status, CallbackSlot};

/// Undirected graph of granted IPC links between app uids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionGraph {
    vertices: BTreeSet<u32>,
    edges: BTreeSet<(u32, u32)>,
}

fn edge(a: u32, b: u32) -> (u32, u32) {
    (a.min(b), a.max(b))
}

impl InteractionGraph {
    pub fn new() -> InteractionGraph {
        InteractionGraph::default()
    }

    pub fn add_vertex(&mut self, uid: u32) {
        self.vertices.insert(uid);
    }

    /// Drops the vertex and its incident edges.
    pub fn remove_vertex(&mut self, uid: u32) {
        self.vertices.remove(&uid);
        self.edges.retain(|&(a, b)| a != uid && b != uid);
    }

    pub fn contains(&self, uid: u32) -> bool {
        self.vertices.contains(&uid)
    }

    /// Self-loops are ignored. Returns whether the edge is new.
    pub fn add_edge(&mut self, a: u32, b: u32) -> bool {
        if a == b || !self.contains(a) || !self.contains(b) {
            return false;
        }
        self.edges.insert(edge(a, b))
    }

    pub fn has_edge(&self, a: u32, b: u32) -> bool {
        self.edges.contains(&edge(a, b))
    }

    pub fn vertices(&self) -> impl Iterator<Item = u32> + '_ {
        self.vertices.iter().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edges.iter().copied()
    }

    /// Vertices reachable from `start`, including itself.
    pub fn component(&self, start: u32) -> BTreeSet<u32> {
        let mut adj: HashMap<u32, Vec<u32>> = HashMap::new();
        for &(a, b) in &self.edges {
            adj.entry(a).or_default().push(b);
            adj.entry(b).or_default().push(a);
        }
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &n in adj.get(&v).into_iter().flatten() {
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        seen
    }
}

/// Forbidden tag pairs plus an optional package→domain map.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChineseWallPolicy {
    #[serde(default)]
    pub forbidden_pairs: Vec<(String, String)>,
    /// When set, uids whose packages carry different domains may not be
    /// connected. Unlisted packages carry no domain and never conflict.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains: Option<BTreeMap<String, String>>,
}

/// What the policy needs to know about one vertex.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VertexInfo {
    pub tags: BTreeSet<String>,
    pub domains: BTreeSet<String>,
}

impl ChineseWallPolicy {
    pub fn with_pair(mut self, p: &str, q: &str) -> ChineseWallPolicy {
        self.forbidden_pairs.push((p.to_owned(), q.to_owned()));
        self
    }

    pub fn tags(&self) -> BTreeSet<&str> {
        self.forbidden_pairs.iter().flat_map(|(p, q)| [p.as_str(), q.as_str()]).collect()
    }

    pub fn vertex_info(&self, packages: &[PackageInfo]) -> VertexInfo {
        let tags = self.tags();
        let mut info = VertexInfo::default();
        for p in packages {
            info.tags.extend(p.requested_permissions.iter().filter(|t| tags.contains(t.as_str())).cloned());
            if let Some(d) = self.domains.as_ref().and_then(|m| m.get(&p.name)) {
                info.domains.insert(d.clone());
            }
        }
        info
    }

    /// Whether a vertex set, taken as one connected component, violates the
    /// policy: two distinct members holding the two tags of a forbidden pair,
    /// or members of different domains.
    pub fn set_violates(&self, members: &BTreeSet<u32>, info: &BTreeMap<u32, VertexInfo>) -> bool {
        let holders = |tag: &str| -> BTreeSet<u32> {
            members.iter().copied().filter(|v| info.get(v).is_some_and(|i| i.tags.contains(tag))).collect()
        };
        let pair_hit = self.forbidden_pairs.iter().any(|(p, q)| {
            let (hp, hq) = (holders(p), holders(q));
            !hp.is_empty() && !hq.is_empty() && !(hp.len() == 1 && hp == hq)
        });
        if pair_hit {
            return true;
        }
        let domains: BTreeSet<&String> = members.iter().filter_map(|v| info.get(v)).flat_map(|i| &i.domains).collect();
        domains.len() > 1
    }
}

/// Decides whether linking `caller` and `callee` keeps the graph violation
/// free. Does not commit.
pub fn cw_decide_ipc(
    graph: &InteractionGraph,
    policy: &ChineseWallPolicy,
    caller: u32,
    callee: u32,
    info: &BTreeMap<u32, VertexInfo>,
) -> bool {
    let mut merged = graph.component(caller);
    if merged.contains(&callee) {
        return true;
    }
    merged.extend(graph.component(callee));
    !policy.set_violates(&merged, info)
}

/// Brute-force verifier: for every vertex pair, test path existence and
/// whether the two jointly hold a forbidden pair or differ in domain.
pub fn cw_oracle(graph: &InteractionGraph, policy: &ChineseWallPolicy, info: &BTreeMap<u32, VertexInfo>) -> bool {
    let vs: Vec<u32> = graph.vertices().collect();
    let empty = VertexInfo::default();
    for (i, &u) in vs.iter().enumerate() {
        for &v in &vs[i + 1..] {
            if !path_exists(graph, u, v) {
                continue;
            }
            let (iu, iv) = (info.get(&u).unwrap_or(&empty), info.get(&v).unwrap_or(&empty));
            let pair = policy.forbidden_pairs.iter().any(|(p, q)| {
                (iu.tags.contains(p) && iv.tags.contains(q)) || (iu.tags.contains(q) && iv.tags.contains(p))
            });
            let domain = iu.domains.iter().any(|d| iv.domains.iter().any(|e| e != d))
                || iu.domains.len() > 1
                || iv.domains.len() > 1;
            if pair || domain {
                return true;
            }
        }
    }
    false
}

fn path_exists(graph: &InteractionGraph, from: u32, to: u32) -> bool {
    let mut frontier = vec![from];
    let mut seen = BTreeSet::from([from]);
    while let Some(v) = frontier.pop() {
        if v == to {
            return true;
        }
        for (a, b) in graph.edges() {
            let next = if a == v {
                b
            } else if b == v {
                a
            } else {
                continue;
            };
            if seen.insert(next) {
                frontier.push(next);
            }
        }
    }
    false
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CwConfig {
    #[serde(default)]
    forbidden_pairs: Vec<(String, String)>,
    #[serde(default)]
    domains: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Default)]
struct CwState {
    graph: InteractionGraph,
    packages: BTreeMap<String, PackageInfo>,
    info: BTreeMap<u32, VertexInfo>,
    graph_version: u64,
    policy_version: u64,
    memo: HashMap<((u32, u32), u64, u64), bool>,
    memo_hits: u64,
}

impl CwState {
    fn refresh_uid(&mut self, policy: &ChineseWallPolicy, uid: u32) {
        let pkgs: Vec<PackageInfo> = self.packages.values().filter(|p| p.uid == uid).cloned().collect();
        if pkgs.is_empty() {
            self.info.remove(&uid);
            self.graph.remove_vertex(uid);
        } else {
            self.info.insert(uid, policy.vertex_info(&pkgs));
            self.graph.add_vertex(uid);
        }
        self.graph_version += 1;
    }

    fn decide(&mut self, policy: &ChineseWallPolicy, a: u32, b: u32) -> bool {
        if a == b || !self.graph.contains(a) || !self.graph.contains(b) {
            return true;
        }
        let key = (edge(a, b), self.graph_version, self.policy_version);
        if let Some(&hit) = self.memo.get(&key) {
            self.memo_hits += 1;
            return hit;
        }
        let ok = cw_decide_ipc(&self.graph, policy, a, b, &self.info);
        self.memo.insert(key, ok);
        ok
    }

    fn commit(&mut self, a: u32, b: u32) {
        if self.graph.add_edge(a, b) {
            self.graph_version += 1;
        }
    }
}

pub const CW_DENY_REASON: &str = "chinese-wall: interaction would join conflicting apps";

/// Decides at the IPC hooks. When the manifest declares the interaction
/// feed, edges are committed from it (after every layer agreed); otherwise
/// they are committed on Allow.
pub struct ChineseWallModule {
    policy: Mutex<ChineseWallPolicy>,
    state: Mutex<CwState>,
    callbacks: CallbackSlot,
    commit_on_feed: bool,
}

impl ChineseWallModule {
    pub fn new(policy: ChineseWallPolicy, commit_on_feed: bool) -> ChineseWallModule {
        ChineseWallModule {
            policy: Mutex::new(policy),
            state: Mutex::new(CwState::default()),
            callbacks: CallbackSlot::default(),
            commit_on_feed,
        }
    }

    pub fn from_manifest(manifest: &ModuleManifest) -> Result<ChineseWallModule, ModuleFault> {
        let cfg: CwConfig = parse_config(manifest)?;
        if cfg.forbidden_pairs.is_empty() && cfg.domains.is_none() {
            return Err(ModuleFault::new("chinese wall needs forbidden_pairs or domains"));
        }
        let policy = ChineseWallPolicy { forbidden_pairs: cfg.forbidden_pairs, domains: cfg.domains };
        Ok(ChineseWallModule::new(policy, manifest.declared_hooks.iter().any(|h| h == REPORT_INTERACTION)))
    }

    pub fn graph(&self) -> InteractionGraph {
        self.state.lock().graph.clone()
    }

    fn track(&self, pkg: PackageInfo) {
        let policy = self.policy.lock();
        let mut st = self.state.lock();
        let uid = pkg.uid;
        st.packages.insert(pkg.name.clone(), pkg);
        st.refresh_uid(&policy, uid);
    }

    fn untrack(&self, name: &str, uid: u32) {
        let policy = self.policy.lock();
        let mut st = self.state.lock();
        st.packages.remove(name);
        st.refresh_uid(&policy, uid);
    }

    fn domain_of(&self, package: &str) -> Option<String> {
        self.policy.lock().domains.as_ref()?.get(package).cloned()
    }

    fn filter_packages(&self, creds: &Credentials, candidate: &Value) -> Result<PolicyDecision, ModuleFault> {
        let Some(mine) = self.callbacks.caller_package(creds).and_then(|p| self.domain_of(&p)) else {
            return Ok(PolicyDecision::Allow);
        };
        let list = candidate.as_list().ok_or_else(|| ModuleFault::new("package list expected"))?;
        let kept: Vec<Bundle> = list
            .iter()
            .filter_map(|v| v.as_bundle())
            .filter(|b| b.get_str("name").and_then(|n| self.domain_of(n)).is_none_or(|d| d == mine))
            .cloned()
            .collect();
        if kept.len() == list.len() {
            Ok(PolicyDecision::Allow)
        } else {
            Ok(PolicyDecision::Edit(Value::List(List::of_bundles(kept))))
        }
    }
}

impl SecurityModule for ChineseWallModule {
    fn init(&self, ctx: &ModuleContext) -> Result<bool, ModuleFault> {
        for p in ctx.callbacks.installed_packages() {
            self.track(p);
        }
        self.callbacks.set(ctx.callbacks.clone());
        Ok(true)
    }

    fn enforce(&self, call: &HookCall<'_>) -> Result<PolicyDecision, ModuleFault> {
        let id = call.id();
        if IPC_HOOKS.contains(&id) {
            let callee = call.args.get_int("target_uid").ok_or_else(|| ModuleFault::new("target_uid missing"))? as u32;
            let caller = call.creds.uid;
            let policy = self.policy.lock().clone();
            let mut st = self.state.lock();
            if !st.decide(&policy, caller, callee) {
                return Ok(PolicyDecision::deny(CW_DENY_REASON));
            }
            if !self.commit_on_feed {
                st.commit(caller, callee);
            }
            return Ok(PolicyDecision::Allow);
        }
        if id == REPORT_INTERACTION {
            let a = call.args.get_int("caller_uid").unwrap_or_default() as u32;
            let b = call.args.get_int("callee_uid").unwrap_or_default() as u32;
            self.state.lock().commit(a, b);
            return Ok(PolicyDecision::Allow);
        }
        if id == GET_INSTALLED_PACKAGES {
            if let Some(c) = call.candidate {
                return self.filter_packages(call.creds, c);
            }
        }
        if id == SCAN_PACKAGE {
            // A shared sandbox may not span domains.
            let pkg = super::scanned_package(call.args)?;
            if let (Some(d), Some(shared)) = (self.domain_of(&pkg.name), pkg.shared_user.as_ref()) {
                let st = self.state.lock();
                let clash = st
                    .packages
                    .values()
                    .filter(|p| p.shared_user.as_ref() == Some(shared))
                    .filter_map(|p| self.domain_of(&p.name))
                    .any(|other| other != d);
                if clash {
                    return Ok(PolicyDecision::deny("chinese-wall: shared sandbox spans domains"));
                }
            }
        }
        Ok(PolicyDecision::Allow)
    }

    fn on_package_event(&self, event: &PackageEvent) -> Result<(), ModuleFault> {
        match event {
            PackageEvent::Installed(p) => self.track(p.clone()),
            PackageEvent::Replaced { new, .. } => self.track(new.clone()),
            PackageEvent::Removed { name, uid } => self.untrack(name, *uid),
        }
        Ok(())
    }

    fn call_module(&self, _caller: &Credentials, request: &Bundle) -> Result<Bundle, ModuleFault> {
        match request.get_str("cmd") {
            Some("getGraph") => {
                let st = self.state.lock();
                let edges = st.graph.edges().map(|(a, b)| Value::from(format!("{a}-{b}"))).collect::<Vec<_>>();
                let edges = List::new(edges).map_err(|e| ModuleFault::new(e.to_string()))?;
                Ok(status("ok")
                    .with("edges", edges)
                    .with("vertices", st.graph.vertices().count() as u64)
                    .with("memo_hits", st.memo_hits))
            }
            _ => Ok(crate::framework::unsupported_response()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(tags: &[(u32, &[&str])]) -> BTreeMap<u32, VertexInfo> {
        tags.iter()
            .map(|(u, t)| {
                (*u, VertexInfo { tags: t.iter().map(|s| s.to_string()).collect(), domains: BTreeSet::new() })
            })
            .collect()
    }

    #[test]
    fn transitive_path_is_denied() {
        let policy = ChineseWallPolicy::default().with_pair("LOCATION", "INTERNET");
        let info = info(&[(1, &["LOCATION"]), (2, &[]), (3, &["INTERNET"])]);
        let mut g = InteractionGraph::new();
        for v in 1..=3 {
            g.add_vertex(v);
        }
        assert!(cw_decide_ipc(&g, &policy, 1, 2, &info));
        g.add_edge(1, 2);
        assert!(!cw_decide_ipc(&g, &policy, 2, 3, &info));
        assert!(!cw_oracle(&g, &policy, &info));
        g.add_edge(2, 3);
        assert!(cw_oracle(&g, &policy, &info));
    }

    #[test]
    fn single_holder_of_both_tags_is_fine_alone() {
        let policy = ChineseWallPolicy::default().with_pair("A", "B");
        let info = info(&[(1, &["A", "B"]), (2, &[]), (3, &["A"])]);
        let mut g = InteractionGraph::new();
        for v in 1..=3 {
            g.add_vertex(v);
        }
        assert!(cw_decide_ipc(&g, &policy, 1, 2, &info));
        assert!(!cw_decide_ipc(&g, &policy, 1, 3, &info));
    }

    #[test]
    fn domains_must_match() {
        let domains = BTreeMap::from([
            ("a".to_owned(), "work".to_owned()),
            ("b".to_owned(), "work".to_owned()),
            ("c".to_owned(), "private".to_owned()),
        ]);
        let policy = ChineseWallPolicy { forbidden_pairs: vec![], domains: Some(domains) };
        let pkgs: Vec<PackageInfo> = ["a", "b", "c"]
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let mut p = PackageInfo::new(*n);
                p.uid = i as u32;
                p
            })
            .collect();
        let info: BTreeMap<u32, VertexInfo> =
            pkgs.iter().map(|p| (p.uid, policy.vertex_info(std::slice::from_ref(p)))).collect();
        let mut g = InteractionGraph::new();
        for p in &pkgs {
            g.add_vertex(p.uid);
        }
        assert!(cw_decide_ipc(&g, &policy, 0, 1, &info));
        assert!(!cw_decide_ipc(&g, &policy, 0, 2, &info));
    }

    #[test]
    fn removing_a_vertex_drops_edges() {
        let mut g = InteractionGraph::new();
        for v in 1..=3 {
            g.add_vertex(v);
        }
        g.add_edge(1, 2);
        g.add_edge(2, 3);
        g.remove_vertex(2);
        assert_eq!(g.edges().count(), 0);
        assert!(!g.add_edge(1, 2));
    }
}
