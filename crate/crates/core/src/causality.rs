//! Structural causality between messages and the causality graph over the
//! unique messages of a trace set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::flow::Message;

/// Which fields the causality predicate links.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalityDirection {
    /// `a.dest == b.src`: the receiver of `a` originates `b`.
    #[default]
    Forward,
    /// `a.src == b.dest`.
    Reverse,
}

/// Structural causality. Self pairs are never causal.
pub fn causal(a: &Message, b: &Message, direction: CausalityDirection) -> bool {
    if a == b {
        return false;
    }
    match direction {
        CausalityDirection::Forward => a.dest() == b.src(),
        CausalityDirection::Reverse => a.src() == b.dest(),
    }
}

/// Directed graph over unique messages; `(u, v)` is an edge iff `causal(u, v)`.
///
/// The graph may contain cycles when messages are shared between flows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalityGraph {
    nodes: BTreeSet<Message>,
    succ: BTreeMap<Message, BTreeSet<Message>>,
}

impl CausalityGraph {
    pub fn nodes(&self) -> impl Iterator<Item = &Message> {
        self.nodes.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, m: &Message) -> bool {
        self.nodes.contains(m)
    }

    pub fn has_edge(&self, u: &Message, v: &Message) -> bool {
        self.succ.get(u).is_some_and(|s| s.contains(v))
    }

    /// Out-neighbours of `u` in canonical order.
    pub fn successors<'a>(&'a self, u: &Message) -> impl Iterator<Item = &'a Message> + 'a {
        self.succ.get(u).into_iter().flatten()
    }

    /// All edges in canonical (lexicographic) order.
    pub fn edges(&self) -> impl Iterator<Item = (&Message, &Message)> {
        self.succ
            .iter()
            .flat_map(|(u, vs)| vs.iter().map(move |v| (u, v)))
    }

    pub fn edge_count(&self) -> usize {
        self.succ.values().map(BTreeSet::len).sum()
    }

    /// `u -> v` per line, canonical order.
    pub fn dump(&self) -> String {
        dump_edges(self.edges())
    }
}

pub fn dump_edges<'a>(edges: impl IntoIterator<Item = (&'a Message, &'a Message)>) -> String {
    let mut out = String::new();
    for (u, v) in edges {
        let _ = writeln!(out, "{u} -> {v}");
    }
    out
}

pub fn build_causality_graph<'a>(
    messages: impl IntoIterator<Item = &'a Message>,
    direction: CausalityDirection,
) -> CausalityGraph {
    let nodes: BTreeSet<Message> = messages.into_iter().cloned().collect();
    // bucket by the linking component to avoid the quadratic scan
    let mut by_key: BTreeMap<&str, Vec<&Message>> = BTreeMap::new();
    for m in &nodes {
        let key = match direction {
            CausalityDirection::Forward => m.src(),
            CausalityDirection::Reverse => m.dest(),
        };
        by_key.entry(key).or_default().push(m);
    }
    let mut succ = BTreeMap::new();
    for u in &nodes {
        let key = match direction {
            CausalityDirection::Forward => u.dest(),
            CausalityDirection::Reverse => u.src(),
        };
        let targets: BTreeSet<Message> = by_key
            .get(key)
            .into_iter()
            .flatten()
            .filter(|v| causal(u, v, direction))
            .map(|v| (*v).clone())
            .collect();
        if !targets.is_empty() {
            succ.insert(u.clone(), targets);
        }
    }
    CausalityGraph { nodes, succ }
}
