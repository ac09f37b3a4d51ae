//! Branch-level precision and recall of mined flows against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::flow::{branches, FlowSet, FlowSpec, Message};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowEval {
    pub gt_flow: String,
    pub mined_flows: Vec<String>,
    pub mined_branch_count: usize,
    pub gt_branch_count: usize,
    pub true_positive_branches: usize,
    /// `None` when nothing was mined for this flow.
    pub precision: Option<f64>,
    pub recall: f64,
    pub missing_messages: Vec<Message>,
    pub extra_messages: Vec<Message>,
    pub message_precision: Option<f64>,
    pub message_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mined_branch_count: usize,
    pub gt_branch_count: usize,
    pub true_positive_branches: usize,
    pub precision: Option<f64>,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub flows: Vec<FlowEval>,
    /// Mined flows with no ground-truth counterpart; all their branches count
    /// as false positives.
    pub unpaired_mined: Vec<String>,
    pub aggregate: Aggregate,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn branch_seqs(f: &FlowSpec) -> BTreeSet<Vec<Message>> {
    branches(f).iter().map(|b| f.branch_messages(b)).collect()
}

fn message_set(f: &FlowSpec) -> BTreeSet<Message> {
    f.messages.iter().map(|(_, m)| m.clone()).collect()
}

/// Compare mined flows with ground truth. `pairing` maps mined flow names to
/// ground-truth names; without it flows are paired by start message.
pub fn compare(mined: &FlowSet, gt: &FlowSet, pairing: Option<&BTreeMap<String, String>>) -> EvalReport {
    let mut by_gt: BTreeMap<&str, Vec<&FlowSpec>> = BTreeMap::new();
    let mut unpaired = Vec::new();
    for mf in &mined.flows {
        let target = match pairing {
            Some(p) => p.get(&mf.name).and_then(|n| gt.flow(n)),
            None => gt
                .flows
                .iter()
                .find(|g| g.start_message().is_some() && g.start_message() == mf.start_message()),
        };
        match target {
            Some(g) => by_gt.entry(g.name.as_str()).or_default().push(mf),
            None => unpaired.push(mf),
        }
    }

    let mut flows = Vec::new();
    let (mut tot_mined, mut tot_gt, mut tot_tp) = (0, 0, 0);
    for g in &gt.flows {
        let gt_branches = branch_seqs(g);
        let gt_msgs = message_set(g);
        let paired = by_gt.get(g.name.as_str()).cloned().unwrap_or_default();
        let mut mined_branches: BTreeSet<Vec<Message>> = BTreeSet::new();
        let mut mined_msgs = BTreeSet::new();
        for mf in &paired {
            mined_branches.extend(branch_seqs(mf));
            mined_msgs.extend(message_set(mf));
        }
        let tp = mined_branches.intersection(&gt_branches).count();
        let msg_tp = mined_msgs.intersection(&gt_msgs).count();
        tot_mined += mined_branches.len();
        tot_gt += gt_branches.len();
        tot_tp += tp;
        flows.push(FlowEval {
            gt_flow: g.name.clone(),
            mined_flows: paired.iter().map(|f| f.name.clone()).collect(),
            mined_branch_count: mined_branches.len(),
            gt_branch_count: gt_branches.len(),
            true_positive_branches: tp,
            precision: ratio(tp, mined_branches.len()),
            recall: ratio(tp, gt_branches.len()).unwrap_or(0.0),
            missing_messages: gt_msgs.difference(&mined_msgs).cloned().collect(),
            extra_messages: mined_msgs.difference(&gt_msgs).cloned().collect(),
            message_precision: ratio(msg_tp, mined_msgs.len()),
            message_recall: ratio(msg_tp, gt_msgs.len()).unwrap_or(0.0),
        });
    }
    for mf in &unpaired {
        tot_mined += branch_seqs(mf).len();
    }

    EvalReport {
        flows,
        unpaired_mined: unpaired.iter().map(|f| f.name.clone()).collect(),
        aggregate: Aggregate {
            mined_branch_count: tot_mined,
            gt_branch_count: tot_gt,
            true_positive_branches: tot_tp,
            precision: ratio(tot_tp, tot_mined),
            recall: ratio(tot_tp, tot_gt).unwrap_or(0.0),
        },
    }
}

fn pct(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:.2}%", v * 100.0),
        None => "—".to_string(),
    }
}

impl EvalReport {
    pub fn is_perfect(&self) -> bool {
        self.aggregate.precision == Some(1.0) && self.aggregate.recall == 1.0
    }

    /// Plain-text table: branches mined, precision, recall per flow.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>9} {:>9} {:>5} {:>10} {:>10}",
            "flow", "#mined", "#truth", "TP", "precision", "recall"
        );
        for f in &self.flows {
            let _ = writeln!(
                out,
                "{:<24} {:>9} {:>9} {:>5} {:>10} {:>10}",
                f.gt_flow,
                f.mined_branch_count,
                f.gt_branch_count,
                f.true_positive_branches,
                pct(f.precision),
                pct(Some(f.recall))
            );
            if !f.missing_messages.is_empty() {
                let list: Vec<String> = f.missing_messages.iter().map(ToString::to_string).collect();
                let _ = writeln!(out, "  missing: {}", list.join(", "));
            }
            if !f.extra_messages.is_empty() {
                let list: Vec<String> = f.extra_messages.iter().map(ToString::to_string).collect();
                let _ = writeln!(out, "  extra:   {}", list.join(", "));
            }
        }
        for name in &self.unpaired_mined {
            let _ = writeln!(out, "  unpaired mined flow: {name}");
        }
        let a = &self.aggregate;
        let _ = writeln!(
            out,
            "{:<24} {:>9} {:>9} {:>5} {:>10} {:>10}",
            "all",
            a.mined_branch_count,
            a.gt_branch_count,
            a.true_positive_branches,
            pct(a.precision),
            pct(Some(a.recall))
        );
        out
    }
}
