//! Concurrent flow execution: interleaved trace synthesis and the matching
//! legality check.

use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{branches, FlowSet, Message};
use crate::rng::{derive_indexed, rng_from};

/// A sequence of step-sets. Messages within one step occurred simultaneously.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub steps: Vec<Vec<Message>>,
}

impl Trace {
    pub fn from_messages(msgs: impl IntoIterator<Item = Message>) -> Self {
        Trace {
            steps: msgs.into_iter().map(|m| vec![m]).collect(),
        }
    }

    /// Messages in step order, co-occurring messages in stored order.
    pub fn flatten(&self) -> impl Iterator<Item = &Message> {
        self.steps.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TraceSet {
    pub traces: Vec<Trace>,
}

impl TraceSet {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.traces {
            let line = t
                .steps
                .iter()
                .map(|step| {
                    step.iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join("|")
                })
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut traces = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut steps = Vec::new();
            for tok in line.split(' ').filter(|t| !t.is_empty()) {
                let step = tok
                    .split('|')
                    .map(|m| m.parse::<Message>())
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::TraceSyntax {
                        line: i + 1,
                        msg: e.to_string(),
                    })?;
                steps.push(step);
            }
            traces.push(Trace { steps });
        }
        Ok(TraceSet { traces })
    }
}

/// Trace generation parameters. Branches are chosen uniformly per instance and
/// the scheduler picks uniformly among unfinished instances at every step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub runs: usize,
    #[serde(default = "one")]
    pub instances_per_flow: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            runs: 600,
            instances_per_flow: 1,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances_per_flow == 0 {
            return Err(Error::Config("instances_per_flow must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which branch one flow instance executed in a generated trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchChoice {
    pub flow: usize,
    pub instance: usize,
    pub branch: usize,
}

struct Instance<'a> {
    path: &'a [Message],
    cursor: usize,
}

pub fn generate_traces(fs: &FlowSet, cfg: &GenConfig) -> Result<TraceSet> {
    generate_traces_logged(fs, cfg).map(|(ts, _)| ts)
}

/// Like [`generate_traces`] but also returns each trace's branch choices.
pub fn generate_traces_logged(
    fs: &FlowSet,
    cfg: &GenConfig,
) -> Result<(TraceSet, Vec<Vec<BranchChoice>>)> {
    cfg.validate()?;
    let paths: Vec<Vec<Vec<Message>>> = fs
        .flows
        .iter()
        .map(|f| branches(f).iter().map(|b| f.branch_messages(b)).collect())
        .collect();

    let generated: Vec<(Trace, Vec<BranchChoice>)> = (0..cfg.runs)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(derive_indexed(cfg.seed, "trace", i as u64));
            let mut instances = Vec::new();
            let mut choices = Vec::new();
            for (fi, flow_paths) in paths.iter().enumerate() {
                for inst in 0..cfg.instances_per_flow {
                    let b = rng.random_range(0..flow_paths.len());
                    choices.push(BranchChoice {
                        flow: fi,
                        instance: inst,
                        branch: b,
                    });
                    instances.push(Instance {
                        path: &flow_paths[b],
                        cursor: 0,
                    });
                }
            }
            let mut live: Vec<usize> = (0..instances.len()).collect();
            let mut steps = Vec::new();
            while !live.is_empty() {
                let k = rng.random_range(0..live.len());
                let inst = &mut instances[live[k]];
                steps.push(vec![inst.path[inst.cursor].clone()]);
                inst.cursor += 1;
                if inst.cursor == inst.path.len() {
                    live.remove(k);
                }
            }
            (Trace { steps }, choices)
        })
        .collect();

    let (traces, log) = generated.into_iter().unzip();
    Ok((TraceSet { traces }, log))
}

#[derive(Clone, PartialEq, Eq)]
struct InstState {
    flow: usize,
    cursor: usize,
    alive: Vec<usize>,
}

/// Whether the flattened trace splits into `k` instances of every flow, each
/// instance following exactly one complete branch.
pub fn validate_interleaving(t: &Trace, fs: &FlowSet, k: usize) -> bool {
    let paths: Vec<Vec<Vec<Message>>> = fs
        .flows
        .iter()
        .map(|f| branches(f).iter().map(|b| f.branch_messages(b)).collect())
        .collect();
    let seq: Vec<&Message> = t.flatten().collect();
    let mut states: Vec<InstState> = paths
        .iter()
        .enumerate()
        .flat_map(|(fi, p)| {
            (0..k).map(move |_| InstState {
                flow: fi,
                cursor: 0,
                alive: (0..p.len()).collect(),
            })
        })
        .collect();
    assign(&seq, 0, &mut states, &paths)
}

fn assign(seq: &[&Message], pos: usize, states: &mut [InstState], paths: &[Vec<Vec<Message>>]) -> bool {
    if pos == seq.len() {
        return states
            .iter()
            .all(|s| s.alive.iter().any(|&b| paths[s.flow][b].len() == s.cursor));
    }
    let msg = seq[pos];
    for i in 0..states.len() {
        // identical instance states are interchangeable; try only the first
        if states[..i].contains(&states[i]) {
            continue;
        }
        let s = &states[i];
        let next: Vec<usize> = s
            .alive
            .iter()
            .copied()
            .filter(|&b| paths[s.flow][b].get(s.cursor) == Some(msg))
            .collect();
        if next.is_empty() {
            continue;
        }
        let saved = std::mem::replace(&mut states[i].alive, next);
        states[i].cursor += 1;
        if assign(seq, pos + 1, states, paths) {
            return true;
        }
        states[i].cursor -= 1;
        states[i].alive = saved;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowSpec;

    fn m(s: &str) -> Message {
        s.parse().unwrap()
    }

    fn chain(name: &str, msgs: &[&str]) -> FlowSpec {
        FlowSpec {
            name: name.into(),
            messages: msgs.iter().enumerate().map(|(i, s)| (i as u32, m(s))).collect(),
            edges: (1..msgs.len() as u32).map(|i| (i - 1, i)).collect(),
            start: 0,
            ends: [msgs.len() as u32 - 1].into(),
        }
    }

    /// Two chains sharing the message D, shaped like A,B,D,E and W,X,D,Y.
    fn two_flows() -> FlowSet {
        FlowSet {
            flows: vec![
                chain("f1", &["p:q:A", "q:r:B", "r:s:D", "s:t:E"]),
                chain("f2", &["u:v:W", "v:r:X", "r:s:D", "s:w:Y"]),
            ],
        }
    }

    #[test]
    fn textbook_interleaving_is_legal() {
        let fs = two_flows();
        let t = Trace::from_messages(
            ["p:q:A", "q:r:B", "r:s:D", "u:v:W", "v:r:X", "r:s:D", "s:w:Y", "s:t:E"].map(m),
        );
        assert!(validate_interleaving(&t, &fs, 1));
    }

    #[test]
    fn wrong_order_is_illegal() {
        let fs = FlowSet {
            flows: vec![chain("f", &["a:b:A", "b:c:B"])],
        };
        let t = Trace::from_messages([m("b:c:B"), m("a:b:A")]);
        assert!(!validate_interleaving(&t, &fs, 1));
        let t = Trace::from_messages([m("a:b:A")]);
        assert!(!validate_interleaving(&t, &fs, 1));
    }

    #[test]
    fn zero_runs_yield_empty_set() {
        let cfg = GenConfig {
            runs: 0,
            ..GenConfig::default()
        };
        assert!(generate_traces(&two_flows(), &cfg).unwrap().traces.is_empty());
    }

    #[test]
    fn projection_per_instance_is_a_branch() {
        let fs = two_flows();
        let cfg = GenConfig {
            runs: 50,
            instances_per_flow: 2,
            seed: 11,
        };
        let ts = generate_traces(&fs, &cfg).unwrap();
        for t in &ts.traces {
            assert_eq!(t.len(), 16);
            assert_eq!(t.flatten().filter(|x| x.cmd() == "D").count(), 4);
            assert!(validate_interleaving(t, &fs, 2));
        }
    }

    #[test]
    fn trace_file_round_trip() {
        let ts = TraceSet {
            traces: vec![
                Trace {
                    steps: vec![vec![m("a:b:x")], vec![m("b:c:y"), m("c:d:z")]],
                },
                Trace::default(),
            ],
        };
        let text = ts.render();
        assert_eq!(text, "a:b:x b:c:y|c:d:z\n\n");
        assert_eq!(TraceSet::parse(&text).unwrap(), ts);
        assert!(TraceSet::parse("a:b").is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig {
            runs: 20,
            instances_per_flow: 1,
            seed: 5,
        };
        let a = generate_traces(&two_flows(), &cfg).unwrap().render();
        let b = generate_traces(&two_flows(), &cfg).unwrap().render();
        assert_eq!(a, b);
    }
}
