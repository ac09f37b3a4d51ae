//! Messages, flow DAGs, flow sets and the JSON flow-file format.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::causality::{causal, CausalityDirection};
use crate::error::{Error, Result};

/// A single `src:dest:cmd` message.
///
/// Ordering follows the canonical rendering, so sorted collections of
/// messages serialize in byte order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Message {
    src: String,
    dest: String,
    cmd: String,
}

fn check_field(text: &str, field: &str) -> Result<()> {
    if field.is_empty() {
        return Err(Error::InvalidMessage {
            text: text.to_string(),
            reason: "empty field",
        });
    }
    if field.chars().any(|c| c == ':' || c == '|' || c.is_whitespace()) {
        return Err(Error::InvalidMessage {
            text: text.to_string(),
            reason: "field contains ':', '|' or whitespace",
        });
    }
    Ok(())
}

impl Message {
    pub fn new(src: &str, dest: &str, cmd: &str) -> Result<Self> {
        let text = format!("{src}:{dest}:{cmd}");
        check_field(&text, src)?;
        check_field(&text, dest)?;
        check_field(&text, cmd)?;
        Ok(Message {
            src: src.to_string(),
            dest: dest.to_string(),
            cmd: cmd.to_string(),
        })
    }

    pub fn src(&self) -> &str {
        &self.src
    }

    pub fn dest(&self) -> &str {
        &self.dest
    }

    pub fn cmd(&self) -> &str {
        &self.cmd
    }

    fn rendered_bytes(&self) -> impl Iterator<Item = u8> + '_ {
        self.src
            .bytes()
            .chain(std::iter::once(b':'))
            .chain(self.dest.bytes())
            .chain(std::iter::once(b':'))
            .chain(self.cmd.bytes())
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.src, self.dest, self.cmd)
    }
}

impl FromStr for Message {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidMessage {
                text: s.to_string(),
                reason: "expected exactly three `:`-separated fields",
            });
        }
        Message::new(parts[0], parts[1], parts[2])
    }
}

impl Serialize for Message {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Message {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Ord for Message {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rendered_bytes().cmp(other.rendered_bytes())
    }
}

impl PartialOrd for Message {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One flow: a DAG over messages with a unique start and one or more ends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowSpec {
    pub name: String,
    pub messages: Vec<(u32, Message)>,
    pub edges: Vec<(u32, u32)>,
    pub start: u32,
    pub ends: BTreeSet<u32>,
}

/// A root-to-terminal path of local ids.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Branch {
    pub path: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateLocalId(u32),
    UnknownNode { what: &'static str, id: u32 },
    NoEnds,
    Cycle { nodes: Vec<u32> },
    StartHasIncoming { from: u32 },
    NotOnStartEndPath(u32),
    NonCausalEdge { from: u32, to: u32 },
    SelfLoop(u32),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateLocalId(id) => write!(f, "duplicate local id {id}"),
            Violation::UnknownNode { what, id } => write!(f, "{what} references unknown id {id}"),
            Violation::NoEnds => write!(f, "flow has no end messages"),
            Violation::Cycle { nodes } => write!(f, "edges form a cycle through {nodes:?}"),
            Violation::StartHasIncoming { from } => {
                write!(f, "start must have in-degree 0 but has an edge from {from}")
            }
            Violation::NotOnStartEndPath(id) => {
                write!(f, "node {id} is not on any path from start to an end")
            }
            Violation::NonCausalEdge { from, to } => {
                write!(f, "edge {from} -> {to} violates structural causality")
            }
            Violation::SelfLoop(id) => write!(f, "self loop on node {id}"),
        }
    }
}

impl FlowSpec {
    pub fn message(&self, id: u32) -> Option<&Message> {
        self.messages.iter().find(|(i, _)| *i == id).map(|(_, m)| m)
    }

    pub fn start_message(&self) -> Option<&Message> {
        self.message(self.start)
    }

    pub fn end_messages(&self) -> Vec<&Message> {
        self.ends.iter().filter_map(|&e| self.message(e)).collect()
    }

    fn successors(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut succ: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &(id, _) in &self.messages {
            succ.entry(id).or_default();
        }
        for &(u, v) in &self.edges {
            succ.entry(u).or_default().push(v);
        }
        for list in succ.values_mut() {
            list.sort_unstable();
            list.dedup();
        }
        succ
    }

    /// Message sequence of a branch.
    pub fn branch_messages(&self, branch: &Branch) -> Vec<Message> {
        branch
            .path
            .iter()
            .filter_map(|&id| self.message(id).cloned())
            .collect()
    }
}

/// Check every structural invariant of a flow under the default causality
/// direction.
pub fn validate_flow(f: &FlowSpec) -> Vec<Violation> {
    validate_flow_with(f, CausalityDirection::default())
}

pub fn validate_flow_with(f: &FlowSpec, direction: CausalityDirection) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for &(id, _) in &f.messages {
        if !ids.insert(id) {
            out.push(Violation::DuplicateLocalId(id));
        }
    }
    if !ids.contains(&f.start) {
        out.push(Violation::UnknownNode {
            what: "start",
            id: f.start,
        });
    }
    if f.ends.is_empty() {
        out.push(Violation::NoEnds);
    }
    for &e in &f.ends {
        if !ids.contains(&e) {
            out.push(Violation::UnknownNode { what: "end", id: e });
        }
    }
    for &(u, v) in &f.edges {
        for id in [u, v] {
            if !ids.contains(&id) {
                out.push(Violation::UnknownNode { what: "edge", id });
            }
        }
    }
    if !out.is_empty() {
        return out;
    }

    for &(u, v) in &f.edges {
        if u == v {
            out.push(Violation::SelfLoop(u));
        }
        if v == f.start {
            out.push(Violation::StartHasIncoming { from: u });
        }
        let (mu, mv) = (f.message(u).unwrap(), f.message(v).unwrap());
        if u != v && !causal(mu, mv, direction) {
            out.push(Violation::NonCausalEdge { from: u, to: v });
        }
    }

    if let Some(cycle) = find_cycle(f) {
        out.push(Violation::Cycle { nodes: cycle });
    }

    // forward reachability from start, backward reachability from ends
    let succ = f.successors();
    let mut pred: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(u, v) in &f.edges {
        pred.entry(v).or_default().push(u);
    }
    let fwd = reach(f.start, |n| succ.get(&n).cloned().unwrap_or_default());
    let mut bwd = HashSet::new();
    for &e in &f.ends {
        bwd.extend(reach(e, |n| pred.get(&n).cloned().unwrap_or_default()));
    }
    let mut sorted_ids: Vec<u32> = ids.into_iter().collect();
    sorted_ids.sort_unstable();
    for id in sorted_ids {
        if !(fwd.contains(&id) && bwd.contains(&id)) {
            out.push(Violation::NotOnStartEndPath(id));
        }
    }
    out
}

fn reach(from: u32, next: impl Fn(u32) -> Vec<u32>) -> HashSet<u32> {
    let mut seen = HashSet::from([from]);
    let mut stack = vec![from];
    while let Some(n) = stack.pop() {
        for m in next(n) {
            if seen.insert(m) {
                stack.push(m);
            }
        }
    }
    seen
}

fn find_cycle(f: &FlowSpec) -> Option<Vec<u32>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let succ = f.successors();
    let mut mark: HashMap<u32, Mark> = succ.keys().map(|&k| (k, Mark::New)).collect();
    for &root in succ.keys() {
        if mark[&root] != Mark::New {
            continue;
        }
        // iterative DFS keeping the active path for reporting
        let mut stack: Vec<(u32, usize)> = vec![(root, 0)];
        mark.insert(root, Mark::Active);
        while let Some(&mut (node, ref mut idx)) = stack.last_mut() {
            let next = succ[&node].get(*idx).copied();
            *idx += 1;
            match next {
                Some(n) => match mark[&n] {
                    Mark::New => {
                        mark.insert(n, Mark::Active);
                        stack.push((n, 0));
                    }
                    Mark::Active => {
                        let pos = stack.iter().position(|&(s, _)| s == n).unwrap();
                        return Some(stack[pos..].iter().map(|&(s, _)| s).collect());
                    }
                    Mark::Done => {}
                },
                None => {
                    mark.insert(node, Mark::Done);
                    stack.pop();
                }
            }
        }
    }
    None
}

/// All start-to-end paths of a valid flow, lexicographically ordered.
pub fn branches(f: &FlowSpec) -> Vec<Branch> {
    let succ = f.successors();
    let mut out = Vec::new();
    let mut path = vec![f.start];
    let mut stack: Vec<usize> = vec![0];
    if f.ends.contains(&f.start) {
        out.push(Branch { path: path.clone() });
    }
    while let Some(idx) = stack.last_mut() {
        let node = *path.last().unwrap();
        let next = succ.get(&node).and_then(|s| s.get(*idx)).copied();
        *idx += 1;
        match next {
            Some(n) if !path.contains(&n) => {
                path.push(n);
                stack.push(0);
                if f.ends.contains(&n) {
                    out.push(Branch { path: path.clone() });
                }
            }
            Some(_) => {}
            None => {
                stack.pop();
                path.pop();
            }
        }
    }
    out.sort();
    out
}

/// An ordered collection of flows with unique names.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlowSet {
    pub flows: Vec<FlowSpec>,
}

impl FlowSet {
    /// Sorted set of every message used by any flow.
    pub fn message_universe(&self) -> BTreeSet<Message> {
        self.flows
            .iter()
            .flat_map(|f| f.messages.iter().map(|(_, m)| m.clone()))
            .collect()
    }

    pub fn flow(&self, name: &str) -> Option<&FlowSpec> {
        self.flows.iter().find(|f| f.name == name)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    flows: Vec<RawFlow>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlow {
    name: String,
    messages: Vec<RawMessage>,
    edges: Vec<[u32; 2]>,
    start: u32,
    ends: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMessage {
    id: u32,
    src: String,
    dest: String,
    cmd: String,
}

pub fn parse_flow_file(text: &str) -> Result<FlowSet> {
    parse_flow_file_with(text, CausalityDirection::default())
}

pub fn parse_flow_file_with(text: &str, direction: CausalityDirection) -> Result<FlowSet> {
    let raw: RawFile = serde_json::from_str(text).map_err(|e| Error::Syntax {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    let mut names = HashSet::new();
    let mut flows = Vec::with_capacity(raw.flows.len());
    for rf in raw.flows {
        if !names.insert(rf.name.clone()) {
            return Err(Error::DuplicateFlowName(rf.name));
        }
        if rf.name.is_empty() || rf.name.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("flow name `{}` is not an identifier", rf.name)));
        }
        let mut ids = HashSet::new();
        let mut messages = Vec::with_capacity(rf.messages.len());
        for m in rf.messages {
            if !ids.insert(m.id) {
                return Err(Error::DuplicateLocalId {
                    flow: rf.name,
                    id: m.id,
                });
            }
            messages.push((m.id, Message::new(&m.src, &m.dest, &m.cmd)?));
        }
        let dangling = |what: &'static str, id: u32| Error::DanglingReference {
            flow: rf.name.clone(),
            what,
            id,
        };
        for &[u, v] in &rf.edges {
            for id in [u, v] {
                if !ids.contains(&id) {
                    return Err(dangling("edge", id));
                }
            }
        }
        if !ids.contains(&rf.start) {
            return Err(dangling("start", rf.start));
        }
        for &e in &rf.ends {
            if !ids.contains(&e) {
                return Err(dangling("end", e));
            }
        }
        let flow = FlowSpec {
            name: rf.name.clone(),
            messages,
            edges: rf.edges.iter().map(|&[u, v]| (u, v)).collect(),
            start: rf.start,
            ends: rf.ends.into_iter().collect(),
        };
        let violations = validate_flow_with(&flow, direction);
        if !violations.is_empty() {
            return Err(Error::InvalidFlow {
                flow: flow.name,
                violations: violations
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
            });
        }
        flows.push(flow);
    }
    Ok(FlowSet { flows })
}

/// Render a flow set in the flow-file format (pretty JSON, trailing newline).
pub fn render_flow_file(fs: &FlowSet) -> String {
    let raw = RawFile {
        flows: fs
            .flows
            .iter()
            .map(|f| RawFlow {
                name: f.name.clone(),
                messages: f
                    .messages
                    .iter()
                    .map(|(id, m)| RawMessage {
                        id: *id,
                        src: m.src.clone(),
                        dest: m.dest.clone(),
                        cmd: m.cmd.clone(),
                    })
                    .collect(),
                edges: f.edges.iter().map(|&(u, v)| [u, v]).collect(),
                start: f.start,
                ends: f.ends.iter().copied().collect(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&raw).expect("flow set serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(s: &str) -> Message {
        s.parse().unwrap()
    }

    fn flow(msgs: &[(u32, &str)], edges: &[(u32, u32)], start: u32, ends: &[u32]) -> FlowSpec {
        FlowSpec {
            name: "f".into(),
            messages: msgs.iter().map(|&(i, s)| (i, m(s))).collect(),
            edges: edges.to_vec(),
            start,
            ends: ends.iter().copied().collect(),
        }
    }

    #[test]
    fn message_parse_and_render() {
        let msg = m("CPU:Cache:rd_req");
        assert_eq!(msg.src(), "CPU");
        assert_eq!(msg.to_string(), "CPU:Cache:rd_req");
        assert!("a:b".parse::<Message>().is_err());
        assert!("a::c".parse::<Message>().is_err());
        assert!("a:b c:d".parse::<Message>().is_err());
        assert!(Message::new("a", "b", "x|y").is_err());
    }

    #[test]
    fn message_order_is_rendering_order() {
        // tuple order would put "A" before "A0"; rendering puts "A0:" first
        let a = m("A:x:y");
        let a0 = m("A0:x:y");
        assert!(a0 < a);
        assert_eq!(a0.to_string().cmp(&a.to_string()), a0.cmp(&a));
    }

    #[test]
    fn single_node_flow() {
        let f = flow(&[(0, "A:B:x")], &[], 0, &[0]);
        assert!(validate_flow(&f).is_empty());
        assert_eq!(branches(&f), vec![Branch { path: vec![0] }]);
    }

    #[test]
    fn diamond_has_two_branches() {
        let f = flow(
            &[(0, "A:B:s"), (1, "B:C:l"), (2, "B:C:r"), (3, "C:D:e")],
            &[(0, 1), (0, 2), (1, 3), (2, 3)],
            0,
            &[3],
        );
        assert!(validate_flow(&f).is_empty());
        let b = branches(&f);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].path, vec![0, 1, 3]);
        assert_eq!(b[1].path, vec![0, 2, 3]);
    }

    #[test]
    fn two_cycle_is_reported() {
        let f = flow(
            &[(0, "A:B:s"), (1, "B:A:x"), (2, "A:B:y")],
            &[(0, 1), (1, 2), (2, 1)],
            0,
            &[2],
        );
        let v = validate_flow(&f);
        assert!(v.iter().any(|x| matches!(x, Violation::Cycle { .. })), "{v:?}");
    }

    #[test]
    fn start_with_incoming_edge_is_reported() {
        let f = flow(&[(0, "A:B:s"), (1, "B:A:x")], &[(0, 1), (1, 0)], 0, &[1]);
        let v = validate_flow(&f);
        assert!(v.contains(&Violation::StartHasIncoming { from: 1 }), "{v:?}");
    }

    #[test]
    fn non_causal_edge_and_orphan_are_reported() {
        let f = flow(&[(0, "A:B:s"), (1, "C:D:x"), (2, "B:Z:q")], &[(0, 1)], 0, &[1]);
        let v = validate_flow(&f);
        assert!(v.contains(&Violation::NonCausalEdge { from: 0, to: 1 }));
        assert!(v.contains(&Violation::NotOnStartEndPath(2)));
    }

    #[test]
    fn parse_errors() {
        let dangling = r#"{"flows":[{"name":"f","messages":[{"id":0,"src":"A","dest":"B","cmd":"x"}],
            "edges":[[0,99]],"start":0,"ends":[0]}]}"#;
        assert!(matches!(
            parse_flow_file(dangling),
            Err(Error::DanglingReference { id: 99, .. })
        ));
        let dup = r#"{"flows":[{"name":"f","messages":[{"id":0,"src":"A","dest":"B","cmd":"x"},
            {"id":0,"src":"A","dest":"B","cmd":"y"}],"edges":[],"start":0,"ends":[0]}]}"#;
        assert!(matches!(parse_flow_file(dup), Err(Error::DuplicateLocalId { id: 0, .. })));
        let unknown = r#"{"flows":[], "extra": 1}"#;
        assert!(matches!(parse_flow_file(unknown), Err(Error::Syntax { .. })));
        let broken = "{\n  \"flows\": [\n  }";
        match parse_flow_file(broken) {
            Err(Error::Syntax { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let one = r#"{"flows":[{"name":"f","messages":[{"id":0,"src":"A","dest":"B","cmd":"x"}],
            "edges":[],"start":0,"ends":[0]}]}"#;
        let flow = r#"{"name":"f","messages":[{"id":0,"src":"A","dest":"B","cmd":"x"}],"edges":[],"start":0,"ends":[0]}"#;
        let twice = format!("{{\"flows\":[{flow},{flow}]}}");
        assert!(matches!(parse_flow_file(&twice), Err(Error::DuplicateFlowName(_))));
        let fs = parse_flow_file(one).unwrap();
        assert_eq!(fs.flows.len(), 1);
        assert_eq!(branches(&fs.flows[0]).len(), 1);
    }
}
