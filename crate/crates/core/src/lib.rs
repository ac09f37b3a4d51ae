//! Mining message-flow specifications from interleaved execution traces.
//!
//! The pipeline: synthesize or load traces ([`tracegen`]), extract the message
//! vocabulary ([`tokenizer`]), build the structural causality graph
//! ([`causality`]), train a masked-token encoder on the traces ([`encoder`]),
//! then search the graph from each start message, keeping only successors the
//! encoder rates highly ([`miner`]). [`eval`] scores the result against
//! ground-truth flows.

pub mod benchmark;
pub mod causality;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod miner;
pub mod rng;
pub mod tokenizer;
pub mod tracegen;

pub use error::{Error, Result};
