//! The shipped two-flow benchmark: a CPU read and a UART upstream read over a
//! shared bus, three branches each, 14 distinct messages of which 4 appear in
//! both flows.
//!
//! Because both flows route through `BUS`, the causality graph links every
//! `*:BUS:*` message to every `BUS:*:*` message. In particular the memory
//! response of the CPU read (`MEM:BUS:rd_resp`) has the UART-only DMA request
//! as a causal successor, and that request leads back to the CPU read's end
//! through `DMA:BUS:rd_resp`. A correct miner must cut that edge.

use crate::flow::{parse_flow_file, FlowSet, Message};
use crate::miner::FlowPair;

pub const FLOW_FILE: &str = include_str!("../../../benchmark/flows.json");

pub const CPU_FLOW: &str = "cpu0_read";
pub const UART_FLOW: &str = "uart_upstream_read";

/// Shared memory response inside the CPU flow whose successors are scored in
/// the pruning example.
pub const PRUNE_SOURCE: &str = "MEM:BUS:rd_resp";
/// UART-only successor that is structurally causal after [`PRUNE_SOURCE`]
/// but never follows it in the CPU flow.
pub const PRUNE_TARGET: &str = "BUS:DMA:rd_req";

pub fn flows() -> FlowSet {
    parse_flow_file(FLOW_FILE).expect("shipped benchmark is valid")
}

/// (start, end) pair of every benchmark flow, named after the flow.
pub fn pairs(fs: &FlowSet) -> Vec<FlowPair> {
    fs.flows
        .iter()
        .flat_map(|f| {
            let start = f.start_message().cloned().expect("valid flow");
            f.end_messages().into_iter().map(move |end| FlowPair {
                start: start.clone(),
                end: end.clone(),
                name: Some(f.name.clone()),
            })
        })
        .collect()
}

pub fn prune_source() -> Message {
    PRUNE_SOURCE.parse().unwrap()
}

pub fn prune_target() -> Message {
    PRUNE_TARGET.parse().unwrap()
}
