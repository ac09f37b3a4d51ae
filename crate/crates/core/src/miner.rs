//! Model-guided search over the causality graph.
//!
//! From each start message, simple paths are grown breadth-first. A successor
//! is followed only when the scorer rates it at least `theta` given the path
//! so far; only paths that reach the end message survive. The mined flow is
//! the union of the surviving paths.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::causality::CausalityGraph;
use crate::encoder::{score_next, EncoderModel, ScoreMode, ScoreQuery};
use crate::error::{Error, Result};
use crate::flow::{validate_flow, FlowSet, FlowSpec, Message, Violation};
use crate::tokenizer::{MessageVocab, TokenId};

/// What the model conditions on when scoring a successor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreContext {
    /// The whole path so far (truncated to the model window).
    #[default]
    Prefix,
    /// Only the current node.
    Predecessor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowPair {
    pub start: Message,
    pub end: Message,
    /// Name for the mined flow of this start; defaults to `flow<k>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    #[serde(default = "d_theta")]
    pub theta: f64,
    #[serde(default)]
    pub pairs: Vec<FlowPair>,
    #[serde(default)]
    pub score_mode: ScoreMode,
    #[serde(default)]
    pub context: ScoreContext,
    /// Longest path in nodes; defaults to the number of graph nodes.
    #[serde(default)]
    pub max_path_len: Option<usize>,
}

fn d_theta() -> f64 {
    0.75
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            theta: d_theta(),
            pairs: Vec::new(),
            score_mode: ScoreMode::default(),
            context: ScoreContext::default(),
            max_path_len: None,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config("theta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scores candidate successors of a path.
pub trait NextScorer {
    /// One score per candidate, in candidate order.
    fn score(&self, path: &[Message], candidates: &[Message]) -> Result<Vec<f64>>;
}

/// [`NextScorer`] backed by a trained encoder.
pub struct ModelScorer<'a> {
    pub model: &'a EncoderModel,
    pub vocab: &'a MessageVocab,
    pub mode: ScoreMode,
    pub context: ScoreContext,
}

impl ModelScorer<'_> {
    fn token(&self, m: &Message) -> Result<TokenId> {
        self.vocab
            .id_of(m)
            .ok_or_else(|| Error::Config(format!("message {m} is not in the vocabulary")))
    }
}

impl NextScorer for ModelScorer<'_> {
    fn score(&self, path: &[Message], candidates: &[Message]) -> Result<Vec<f64>> {
        let ctx = match self.context {
            ScoreContext::Prefix => path,
            ScoreContext::Predecessor => &path[path.len().saturating_sub(1)..],
        };
        let q = ScoreQuery {
            prefix: ctx.iter().map(|m| self.token(m)).collect::<Result<_>>()?,
            candidates: candidates.iter().map(|m| self.token(m)).collect::<Result<_>>()?,
            mode: self.mode,
        };
        Ok(score_next(self.model, self.vocab, &q)?
            .into_iter()
            .map(|(_, s)| s)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinedFlow {
    pub start: Message,
    pub end: Message,
    /// Accepted simple paths, sorted.
    pub accepted_paths: Vec<Vec<Message>>,
    pub edges: BTreeSet<(Message, Message)>,
    /// Highest score each edge received on an accepted path.
    pub edge_scores: BTreeMap<(Message, Message), f64>,
    /// No path reached `end`.
    pub unreached: bool,
}

impl MinedFlow {
    pub fn nodes(&self) -> BTreeSet<&Message> {
        self.accepted_paths.iter().flatten().collect()
    }

    /// `u -> v<TAB>score` per edge.
    pub fn score_report(&self) -> String {
        let mut out = String::new();
        for ((u, v), s) in &self.edge_scores {
            let _ = writeln!(out, "{u} -> {v}\t{s:.6}");
        }
        out
    }
}

pub fn mine_flow(
    g: &CausalityGraph,
    model: &EncoderModel,
    vocab: &MessageVocab,
    start: &Message,
    end: &Message,
    mc: &MiningConfig,
) -> Result<MinedFlow> {
    let scorer = ModelScorer {
        model,
        vocab,
        mode: mc.score_mode,
        context: mc.context,
    };
    mine_flow_with(g, &scorer, start, end, mc)
}

pub fn mine_flow_with(
    g: &CausalityGraph,
    scorer: &dyn NextScorer,
    start: &Message,
    end: &Message,
    mc: &MiningConfig,
) -> Result<MinedFlow> {
    mc.validate()?;
    for m in [start, end] {
        if !g.contains(m) {
            return Err(Error::NotInGraph(m.to_string()));
        }
    }
    let max_len = mc.max_path_len.unwrap_or(g.node_count());
    let mut accepted = Vec::new();
    let mut scored: Vec<(Vec<Message>, Vec<f64>)> = Vec::new();
    let mut queue = VecDeque::from([(vec![start.clone()], Vec::<f64>::new())]);

    while let Some((path, scores)) = queue.pop_front() {
        let u = path.last().unwrap();
        if u == end {
            scored.push((path.clone(), scores));
            accepted.push(path);
            continue;
        }
        if path.len() >= max_len {
            continue;
        }
        let candidates: Vec<Message> = g
            .successors(u)
            .filter(|v| !path.contains(v))
            .cloned()
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let s = scorer.score(&path, &candidates)?;
        for (v, score) in candidates.into_iter().zip(s) {
            if score >= mc.theta {
                let mut p = path.clone();
                p.push(v);
                let mut sc = scores.clone();
                sc.push(score);
                queue.push_back((p, sc));
            }
        }
    }

    let mut edges = BTreeSet::new();
    let mut edge_scores: BTreeMap<(Message, Message), f64> = BTreeMap::new();
    for (path, scores) in &scored {
        for (w, s) in path.windows(2).zip(scores) {
            let e = (w[0].clone(), w[1].clone());
            let entry = edge_scores.entry(e.clone()).or_insert(*s);
            *entry = entry.max(*s);
            edges.insert(e);
        }
    }
    accepted.sort();
    Ok(MinedFlow {
        start: start.clone(),
        end: end.clone(),
        unreached: accepted.is_empty(),
        accepted_paths: accepted,
        edges,
        edge_scores,
    })
}

#[derive(Clone, Debug)]
pub struct MineOutcome {
    /// One flow per distinct start that reached at least one end.
    pub flows: FlowSet,
    /// Per-pair results in pair order.
    pub mined: Vec<MinedFlow>,
    /// Structural problems of merged flows, by flow name.
    pub violations: Vec<(String, Vec<Violation>)>,
}

impl MineOutcome {
    pub fn unreached(&self) -> impl Iterator<Item = &MinedFlow> {
        self.mined.iter().filter(|m| m.unreached)
    }
}

pub fn mine_all(
    g: &CausalityGraph,
    model: &EncoderModel,
    vocab: &MessageVocab,
    mc: &MiningConfig,
) -> Result<MineOutcome> {
    let scorer = ModelScorer {
        model,
        vocab,
        mode: mc.score_mode,
        context: mc.context,
    };
    mine_all_with(g, &scorer, mc)
}

/// Mine every configured pair and merge pairs sharing a start into one flow.
pub fn mine_all_with(g: &CausalityGraph, scorer: &dyn NextScorer, mc: &MiningConfig) -> Result<MineOutcome> {
    if mc.pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    let mined = mc
        .pairs
        .iter()
        .map(|p| mine_flow_with(g, scorer, &p.start, &p.end, mc))
        .collect::<Result<Vec<_>>>()?;

    let mut starts: Vec<&Message> = Vec::new();
    for p in &mc.pairs {
        if !starts.contains(&&p.start) {
            starts.push(&p.start);
        }
    }
    let mut flows = Vec::new();
    let mut violations = Vec::new();
    for (k, start) in starts.into_iter().enumerate() {
        let group: Vec<(&FlowPair, &MinedFlow)> = mc
            .pairs
            .iter()
            .zip(&mined)
            .filter(|(p, m)| &p.start == start && !m.unreached)
            .collect();
        if group.is_empty() {
            continue;
        }
        let name = mc
            .pairs
            .iter()
            .filter(|p| &p.start == start)
            .find_map(|p| p.name.clone())
            .unwrap_or_else(|| format!("flow{k}"));
        let flow = merge_into_flow(name, start, &group);
        let v = validate_flow(&flow);
        if !v.is_empty() {
            violations.push((flow.name.clone(), v));
        }
        flows.push(flow);
    }
    Ok(MineOutcome {
        flows: FlowSet { flows },
        mined,
        violations,
    })
}

fn merge_into_flow(name: String, start: &Message, group: &[(&FlowPair, &MinedFlow)]) -> FlowSpec {
    let mut others: BTreeSet<&Message> = BTreeSet::new();
    let mut edges: BTreeSet<(&Message, &Message)> = BTreeSet::new();
    for (_, m) in group {
        others.extend(m.nodes());
        edges.extend(m.edges.iter().map(|(u, v)| (u, v)));
    }
    others.remove(start);
    let mut ids: BTreeMap<&Message, u32> = BTreeMap::new();
    ids.insert(start, 0);
    for (i, m) in others.into_iter().enumerate() {
        ids.insert(m, i as u32 + 1);
    }
    let mut messages: Vec<(u32, Message)> = ids.iter().map(|(m, &i)| (i, (*m).clone())).collect();
    messages.sort_by_key(|(i, _)| *i);
    let mut edge_ids: Vec<(u32, u32)> = edges.iter().map(|(u, v)| (ids[u], ids[v])).collect();
    edge_ids.sort_unstable();
    FlowSpec {
        name,
        messages,
        edges: edge_ids,
        start: 0,
        ends: group.iter().map(|(_, m)| ids[&m.end]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causality::{build_causality_graph, CausalityDirection};
    use crate::flow::branches;

    fn m(s: &str) -> Message {
        s.parse().unwrap()
    }

    struct Fixed(BTreeMap<Message, f64>);

    impl NextScorer for Fixed {
        fn score(&self, _: &[Message], c: &[Message]) -> Result<Vec<f64>> {
            Ok(c.iter().map(|x| self.0.get(x).copied().unwrap_or(1.0)).collect())
        }
    }

    fn diamond() -> CausalityGraph {
        let msgs = [m("S:A:go"), m("A:B:l"), m("A:B:r"), m("B:E:done"), m("A:X:dead")];
        build_causality_graph(&msgs, CausalityDirection::Forward)
    }

    fn cfg(theta: f64) -> MiningConfig {
        MiningConfig {
            theta,
            ..MiningConfig::default()
        }
    }

    #[test]
    fn dead_ends_are_discarded() {
        let g = diamond();
        let f = mine_flow_with(&g, &Fixed(BTreeMap::new()), &m("S:A:go"), &m("B:E:done"), &cfg(0.0)).unwrap();
        assert_eq!(f.accepted_paths.len(), 2);
        assert!(!f.nodes().contains(&m("A:X:dead")));
        assert!(!f.unreached);
    }

    #[test]
    fn low_scores_are_pruned() {
        let g = diamond();
        let scorer = Fixed([(m("A:B:r"), 0.5)].into());
        let f = mine_flow_with(&g, &scorer, &m("S:A:go"), &m("B:E:done"), &cfg(0.75)).unwrap();
        assert_eq!(f.accepted_paths, vec![vec![m("S:A:go"), m("A:B:l"), m("B:E:done")]]);
        assert_eq!(f.edge_scores[&(m("S:A:go"), m("A:B:l"))], 1.0);
    }

    #[test]
    fn unreachable_end_is_flagged_not_error() {
        let g = diamond();
        let scorer = Fixed([(m("A:B:r"), 0.0), (m("A:B:l"), 0.0)].into());
        let f = mine_flow_with(&g, &scorer, &m("S:A:go"), &m("B:E:done"), &cfg(0.5)).unwrap();
        assert!(f.unreached);
        assert!(f.edges.is_empty());
    }

    #[test]
    fn unknown_endpoints_error() {
        let g = diamond();
        let r = mine_flow_with(&g, &Fixed(BTreeMap::new()), &m("Q:Q:q"), &m("B:E:done"), &cfg(0.5));
        assert!(matches!(r, Err(Error::NotInGraph(_))));
    }

    #[test]
    fn pairs_sharing_a_start_merge() {
        let msgs = [m("S:A:go"), m("A:B:x"), m("A:C:y")];
        let g = build_causality_graph(&msgs, CausalityDirection::Forward);
        let mc = MiningConfig {
            theta: 0.0,
            pairs: vec![
                FlowPair {
                    start: m("S:A:go"),
                    end: m("A:B:x"),
                    name: Some("merged".into()),
                },
                FlowPair {
                    start: m("S:A:go"),
                    end: m("A:C:y"),
                    name: None,
                },
            ],
            ..MiningConfig::default()
        };
        let out = mine_all_with(&g, &Fixed(BTreeMap::new()), &mc).unwrap();
        assert_eq!(out.flows.flows.len(), 1);
        let f = &out.flows.flows[0];
        assert_eq!(f.name, "merged");
        assert_eq!(f.ends.len(), 2);
        assert_eq!(branches(f).len(), 2);
        assert!(out.violations.is_empty());
    }

    #[test]
    fn empty_pairs_error() {
        let g = diamond();
        assert!(matches!(
            mine_all_with(&g, &Fixed(BTreeMap::new()), &cfg(0.5)),
            Err(Error::NoPairs)
        ));
    }
}
