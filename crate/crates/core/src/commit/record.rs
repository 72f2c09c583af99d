use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::canon::{canon_tensor, interface_hash, op_signature};
use super::merkle::{verify, MerkleProof};
use super::{CommitError, Hash32, ModelTrees};
use crate::graph::{Graph, Ref, Slice};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightProof {
    pub name: String,
    pub proof: MerkleProof,
}

/// Compact commitment to one contiguous slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphRecord {
    pub start: usize,
    pub end: usize,
    pub h_in: Hash32,
    pub h_out: Hash32,
    pub weight_proofs: Vec<WeightProof>,
    pub signature_proofs: Vec<MerkleProof>,
}

impl SubgraphRecord {
    pub fn slice(&self) -> Slice {
        Slice::new(self.start, self.end)
    }
}

/// Which verification step rejected a record: 1 = weight membership,
/// 2 = node signature membership, 3 = interface hashes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("record rejected at step {step}: {reason}")]
pub struct RecordFailure {
    pub step: u8,
    pub reason: String,
}

fn fail(step: u8, reason: impl Into<String>) -> RecordFailure {
    RecordFailure {
        step,
        reason: reason.into(),
    }
}

/// Builds a record for `s`; `value` supplies the frontier tensors.
pub fn make_subgraph_record<'a>(
    g: &Graph,
    s: Slice,
    value: impl Fn(&Ref) -> Option<&'a Tensor>,
    trees: &ModelTrees,
) -> Result<SubgraphRecord, CommitError> {
    let f = g
        .frontiers(s)
        .map_err(|e| CommitError::Malformed(e.to_string()))?;
    let get = |r: &Ref| value(r).ok_or_else(|| CommitError::MissingTensor(r.to_string()));
    let ins = f.inputs.iter().map(get).collect::<Result<Vec<_>, _>>()?;
    let outs = f
        .outputs
        .iter()
        .map(|&o| get(&Ref::Node(o)))
        .collect::<Result<Vec<_>, _>>()?;
    let weight_proofs = f
        .weights
        .iter()
        .map(|n| {
            let idx = trees.weight_names.binary_search(n).expect("frontier weight exists");
            Ok(WeightProof {
                name: n.clone(),
                proof: trees.weights.prove(idx)?,
            })
        })
        .collect::<Result<Vec<_>, CommitError>>()?;
    let signature_proofs = (s.start..s.end)
        .map(|i| trees.graph.prove(i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SubgraphRecord {
        start: s.start,
        end: s.end,
        h_in: Hash32(interface_hash(ins)),
        h_out: Hash32(interface_hash(outs)),
        weight_proofs,
        signature_proofs,
    })
}

/// Checks weight membership against `r_w`, signature membership against
/// `r_g`, then the interface hashes against the observed frontier tensors
/// (`ins` in live-in order, `outs` in live-out order).
pub fn verify_subgraph_record(
    g: &Graph,
    rec: &SubgraphRecord,
    r_w: &Hash32,
    r_g: &Hash32,
    ins: &[&Tensor],
    outs: &[&Tensor],
) -> Result<(), RecordFailure> {
    let s = rec.slice();
    let f = g.frontiers(s).map_err(|e| fail(2, e.to_string()))?;

    let names: Vec<&String> = rec.weight_proofs.iter().map(|w| &w.name).collect();
    if names != f.weights.iter().collect::<Vec<_>>() {
        return Err(fail(1, "weight proofs do not cover the slice's weights"));
    }
    let all: Vec<&String> = g.weights().keys().collect();
    for w in &rec.weight_proofs {
        let expected = all.binary_search(&&w.name).map_err(|_| fail(1, "unknown weight"))?;
        if w.proof.index as usize != expected {
            return Err(fail(1, format!("weight `{}` proven at wrong position", w.name)));
        }
        if !verify(&r_w.0, &canon_tensor(&g.weights()[&w.name]), &w.proof) {
            return Err(fail(1, format!("weight `{}` not under r_w", w.name)));
        }
    }

    if rec.signature_proofs.len() != s.len() {
        return Err(fail(2, "signature proof count differs from slice length"));
    }
    for (i, p) in (s.start..s.end).zip(&rec.signature_proofs) {
        if p.index as usize != i || !verify(&r_g.0, &op_signature(g.node(i)), p) {
            return Err(fail(2, format!("node {i} signature not under r_g")));
        }
    }

    if ins.len() != f.inputs.len() || outs.len() != f.outputs.len() {
        return Err(fail(3, "frontier arity mismatch"));
    }
    for (t, r) in ins.iter().zip(&f.inputs) {
        if Some(t.shape()) != g.shape_of(r) {
            return Err(fail(3, format!("live-in {r} has the wrong shape")));
        }
    }
    if Hash32(interface_hash(ins.iter().copied())) != rec.h_in {
        return Err(fail(3, "h_in mismatch"));
    }
    if Hash32(interface_hash(outs.iter().copied())) != rec.h_out {
        return Err(fail(3, "h_out mismatch"));
    }
    Ok(())
}
