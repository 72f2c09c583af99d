use serde::{Deserialize, Serialize};

use super::ledger::{Ledger, Message};
use super::state::DisputeState;
use super::ProtocolError;
use crate::exec::{graph_flops, node_flops, slice_flops};
use crate::graph::Graph;

/// Dispute compute requirement of the challenger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dcr {
    pub flops: u64,
    pub forward: u64,
    pub ratio: f64,
    pub rounds: usize,
}

/// FLOPs of every designated child (each is re-executed once). A dispute
/// that starts at a single-op leaf pays for one re-execution of that op.
pub fn dcr(g: &Graph, st: &DisputeState) -> Result<Dcr, ProtocolError> {
    if !st.is_settled() {
        return Err(ProtocolError::Unsettled);
    }
    let mut flops: u64 = st.selections.iter().map(|s| slice_flops(g, s.slice)).sum();
    if st.selections.is_empty() && st.route.is_some() {
        flops += node_flops(g, st.leaf.expect("routed at a leaf"));
    }
    let forward = graph_flops(g);
    Ok(Dcr {
        flops,
        forward,
        ratio: if forward == 0 { 0.0 } else { flops as f64 / forward as f64 },
        rounds: st.selections.len(),
    })
}

/// Merkle inclusion proofs the contract checked across all partitions.
pub fn merkle_checks(ledger: &Ledger) -> usize {
    ledger
        .entries()
        .iter()
        .map(|e| match &e.message {
            Message::Partition { children } => children
                .iter()
                .map(|c| c.record.weight_proofs.len() + c.record.signature_proofs.len())
                .sum(),
            _ => 0,
        })
        .sum()
}
