use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ledger::{Entry, Message};
use super::{Blob, ProtocolError, ProtocolParams, Ratio};
use crate::bounds::node_bound;
use crate::calibration::ThresholdSet;
use crate::commit::canon::{sha256, tensor_digest};
use crate::commit::{verify_subgraph_record, Commitment, Hash32, ModelTrees, SubgraphRecord};
use crate::exec::{eval_op, eval_op_fp64, DeviceProfile};
use crate::graph::{partition, Graph, Ref, Slice};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Nothing submitted yet.
    Open,
    Committed,
    /// Awaiting the proposer's partition of the current slice.
    Challenged,
    /// Awaiting the challenger's selection among posted children.
    Partitioned,
    Leaf,
    Settled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Proposer,
    Challenger,
    Member(usize),
    Contract,
}

impl std::fmt::Display for Party {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Party::Proposer => f.write_str("proposer"),
            Party::Challenger => f.write_str("challenger"),
            Party::Member(i) => write!(f, "member {i}"),
            Party::Contract => f.write_str("contract"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictPath {
    /// Window closed without a challenge.
    Unchallenged,
    Timeout,
    /// A posted subgraph record failed verification.
    RecordVerification,
    Concession,
    Theoretical,
    Committee,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub winner: Party,
    pub path: VerdictPath,
    /// Digests of the ledger entries that decided the outcome.
    pub evidence: Vec<Hash32>,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafPath {
    Theoretical,
    Committee,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Stakes {
    pub proposer: u64,
    pub challenger: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payouts {
    pub proposer: u64,
    pub challenger: u64,
}

/// One child of a partition: its record and the frontier tensors, aligned
/// with the slice's live-in and live-out lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildReveal {
    pub record: SubgraphRecord,
    pub inputs: Vec<Blob>,
    pub outputs: Vec<Blob>,
}

/// Agreed frontier values of the current slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceIo {
    pub inputs: Vec<(Ref, Blob)>,
    pub outputs: Vec<(usize, Blob)>,
}

impl SliceIo {
    pub fn input(&self, r: &Ref) -> Option<&Tensor> {
        self.inputs.iter().find(|(k, _)| k == r).map(|(_, b)| &b.0)
    }

    pub fn output(&self, i: usize) -> Option<&Tensor> {
        self.outputs.iter().find(|(k, _)| *k == i).map(|(_, b)| &b.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub round: usize,
    pub child: usize,
    pub slice: Slice,
    pub p_max: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub member: usize,
    pub profile: String,
    pub within: bool,
    pub p_max: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisputeState {
    pub phase: Phase,
    pub round: usize,
    pub slice: Slice,
    pub deadline: u64,
    pub params: Option<ProtocolParams>,
    pub commitment: Option<Commitment>,
    pub stakes: Stakes,
    pub io: Option<SliceIo>,
    /// Digest of every frontier tensor revealed so far, keyed by reference.
    pub bound: BTreeMap<String, Hash32>,
    pub children: Vec<ChildReveal>,
    pub selections: Vec<Selection>,
    pub leaf: Option<usize>,
    pub route: Option<LeafPath>,
    pub committee: Vec<String>,
    pub votes: Vec<VoteRecord>,
    pub pending: Option<Verdict>,
    pub outcome: Option<Verdict>,
    pub payouts: Option<Payouts>,
    pub applied: u64,
}

impl Default for DisputeState {
    fn default() -> Self {
        Self {
            phase: Phase::Open,
            round: 0,
            slice: Slice::new(0, 0),
            deadline: 0,
            params: None,
            commitment: None,
            stakes: Stakes::default(),
            io: None,
            bound: BTreeMap::new(),
            children: vec![],
            selections: vec![],
            leaf: None,
            route: None,
            committee: vec![],
            votes: vec![],
            pending: None,
            outcome: None,
            payouts: None,
            applied: 0,
        }
    }
}

impl DisputeState {
    /// SHA-256 of the canonical JSON of the whole state.
    pub fn digest(&self) -> Hash32 {
        Hash32(sha256(&serde_json::to_vec(self).expect("serializable")))
    }

    pub fn params(&self) -> &ProtocolParams {
        self.params.as_ref().expect("submitted")
    }

    pub fn is_settled(&self) -> bool {
        self.phase == Phase::Settled
    }

    /// Party whose move is awaited, if a timeout can be claimed against one.
    pub fn on_clock(&self) -> Option<Party> {
        match (self.phase, self.route) {
            (Phase::Challenged, _) => Some(Party::Proposer),
            (Phase::Partitioned, _) => Some(Party::Challenger),
            (Phase::Leaf, None) => Some(Party::Challenger),
            _ => None,
        }
    }
}

/// Winner takes both stakes; an unchallenged proposer gets its own back.
pub fn settle(stakes: &Stakes, verdict: &Verdict) -> Payouts {
    let pot = stakes.proposer + stakes.challenger;
    match verdict.winner {
        Party::Proposer => Payouts {
            proposer: pot,
            challenger: 0,
        },
        _ => Payouts {
            proposer: 0,
            challenger: pot,
        },
    }
}

/// Committee profiles: `size` ids drawn without replacement, seeded by `c0`.
pub fn committee_profiles(c0: &Hash32, pool: &[String], size: usize) -> Vec<String> {
    let seed = u64::from_le_bytes(c0.0[..8].try_into().unwrap());
    Rng::new(seed)
        .permutation(pool.len())
        .into_iter()
        .take(size)
        .map(|i| pool[i].clone())
        .collect()
}

fn ref_key(r: &Ref) -> String {
    r.to_string()
}

/// Public data every observer holds: the graph, the committed thresholds
/// and the roots derived from them.
#[derive(Debug, Clone)]
pub struct Contract {
    graph: Graph,
    thresholds: ThresholdSet,
    trees: ModelTrees,
}

impl Contract {
    pub fn new(graph: Graph, thresholds: ThresholdSet) -> Result<Self, ProtocolError> {
        if thresholds.ops.len() != graph.len() {
            return Err(ProtocolError::Config(format!(
                "{} thresholds for {} nodes",
                thresholds.ops.len(),
                graph.len()
            )));
        }
        if let Some((i, _)) = graph
            .nodes()
            .iter()
            .zip(&thresholds.ops)
            .enumerate()
            .find(|(_, (n, t))| n.name != t.name)
        {
            return Err(ProtocolError::Config(format!("threshold {i} does not name node {i}")));
        }
        if thresholds.ops.iter().any(|t| t.tau_abs.len() != thresholds.grid.len() || t.tau_rel.len() != thresholds.grid.len()) {
            return Err(ProtocolError::Config("threshold entries do not match the grid".into()));
        }
        let trees = ModelTrees::build(&graph, &thresholds)?;
        Ok(Self {
            graph,
            thresholds,
            trees,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn thresholds(&self) -> &ThresholdSet {
        &self.thresholds
    }

    pub fn trees(&self) -> &ModelTrees {
        &self.trees
    }

    /// Operands of the leaf node (weights from the graph) and the proposer's
    /// claimed output.
    pub fn leaf_values<'a>(&'a self, st: &'a DisputeState) -> Result<(usize, Vec<&'a Tensor>, &'a Tensor), ProtocolError> {
        let v = st.leaf.ok_or_else(|| ProtocolError::Rejected("no leaf yet".into()))?;
        let io = st.io.as_ref().expect("io set once submitted");
        let ops = self
            .graph
            .node(v)
            .inputs
            .iter()
            .map(|r| match r {
                Ref::Weight(n) => Ok(&self.graph.weights()[n]),
                other => io
                    .input(other)
                    .ok_or_else(|| ProtocolError::Rejected(format!("leaf operand {other} is not bound"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let y = io
            .output(v)
            .ok_or_else(|| ProtocolError::Rejected(format!("leaf output {v} is not bound")))?;
        Ok((v, ops, y))
    }

    /// Recomputes the reference in FP64 and the bound under the canonical
    /// sequential profile; the proposer passes iff every element lies
    /// within the bound.
    pub fn theoretical_check(&self, st: &DisputeState) -> Result<(bool, f64), ProtocolError> {
        let (v, ops, y) = self.leaf_values(st)?;
        let canonical = DeviceProfile::sequential();
        let y_c = eval_op(&self.graph, v, &ops, &canonical)?;
        let tau = node_bound(&self.graph, v, &ops, &y_c, canonical.fma, &st.params().model)?;
        let y_ref = eval_op_fp64(&self.graph, v, &ops)?;
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for ((p, r), t) in y.to_f64().iter().zip(&y_ref).zip(&tau.eps) {
            let d = (p - r).abs();
            ok &= d <= *t;
            worst = worst.max(if *t > 0.0 {
                d / t
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            });
        }
        Ok((ok, worst))
    }

    /// Applies one entry to `st`. On error `st` may be partially updated;
    /// callers apply to a copy.
    pub fn apply(&self, st: &mut DisputeState, e: &Entry) -> Result<(), ProtocolError> {
        if e.seq != st.applied {
            return Err(ProtocolError::Rejected(format!("expected seq {}, got {}", st.applied, e.seq)));
        }
        if e.digest != e.message.digest() {
            return Err(ProtocolError::Rejected("payload digest mismatch".into()));
        }
        let name = e.message.name();
        if st.phase == Phase::Settled {
            return Err(ProtocolError::Rejected(format!("`{name}` after settlement")));
        }
        if st.pending.is_some() && !matches!(e.message, Message::Settle { .. }) {
            return Err(ProtocolError::Rejected(format!("`{name}` while a verdict awaits settlement")));
        }
        let phase = st.phase;
        let wrong_phase = || ProtocolError::WrongPhase { msg: name, phase };
        let need = |who: &[Party]| {
            if who.contains(&e.sender) {
                Ok(())
            } else {
                Err(ProtocolError::WrongParty {
                    sender: e.sender,
                    msg: name,
                })
            }
        };
        let before = |deadline: u64| {
            if e.tick < deadline {
                Ok(())
            } else {
                Err(ProtocolError::Late { deadline, tick: e.tick })
            }
        };
        let decide = |st: &mut DisputeState, winner: Party, path: VerdictPath, note: String| {
            st.pending = Some(Verdict {
                winner,
                path,
                evidence: vec![e.digest],
                note,
            });
        };

        match &e.message {
            Message::Submit {
                commitment,
                inputs,
                outputs,
            } => {
                need(&[Party::Proposer])?;
                if phase != Phase::Open {
                    return Err(wrong_phase());
                }
                self.accept_submit(st, commitment, inputs, outputs, e.tick)?;
            }
            Message::Finalize => {
                need(&[Party::Proposer, Party::Contract])?;
                if phase != Phase::Committed {
                    return Err(wrong_phase());
                }
                if e.tick < st.deadline {
                    return Err(ProtocolError::Rejected(format!(
                        "challenge window open until tick {}",
                        st.deadline
                    )));
                }
                decide(st, Party::Proposer, VerdictPath::Unchallenged, "window closed".into());
            }
            Message::Challenge { p_max } => {
                need(&[Party::Challenger])?;
                if phase != Phase::Committed {
                    return Err(wrong_phase());
                }
                before(st.deadline)?;
                if !(p_max.0 > 1.0) {
                    return Err(ProtocolError::Rejected("challenge needs p_max > 1".into()));
                }
                st.stakes.challenger = st.params().bond;
                st.round = 0;
                if st.slice.len() == 1 {
                    self.enter_leaf(st, e.tick);
                } else {
                    st.phase = Phase::Challenged;
                    st.deadline = e.tick + st.params().round_timeout;
                }
            }
            Message::Partition { children } => {
                need(&[Party::Proposer])?;
                if phase != Phase::Challenged {
                    return Err(wrong_phase());
                }
                before(st.deadline)?;
                match self.check_partition(st, children) {
                    Ok(bound) => {
                        st.bound = bound;
                        st.children = children.clone();
                        st.phase = Phase::Partitioned;
                        st.deadline = e.tick + st.params().round_timeout;
                    }
                    Err(reason) => decide(st, Party::Challenger, VerdictPath::RecordVerification, reason),
                }
            }
            Message::Select { child, p_max } => {
                need(&[Party::Challenger])?;
                if phase != Phase::Partitioned {
                    return Err(wrong_phase());
                }
                before(st.deadline)?;
                let c = st
                    .children
                    .get(*child)
                    .ok_or_else(|| ProtocolError::Rejected(format!("no child {child}")))?
                    .clone();
                if !(p_max.0 > 1.0) {
                    return Err(ProtocolError::Rejected("selection needs p_max > 1".into()));
                }
                let s = c.record.slice();
                let f = self.graph.frontiers(s)?;
                st.io = Some(SliceIo {
                    inputs: f.inputs.into_iter().zip(c.inputs).collect(),
                    outputs: f.outputs.into_iter().zip(c.outputs).collect(),
                });
                st.selections.push(Selection {
                    round: st.round,
                    child: *child,
                    slice: s,
                    p_max: *p_max,
                });
                st.children.clear();
                st.slice = s;
                st.round += 1;
                if s.len() == 1 {
                    self.enter_leaf(st, e.tick);
                } else {
                    st.phase = Phase::Challenged;
                    st.deadline = e.tick + st.params().round_timeout;
                }
            }
            Message::Concede => {
                need(&[Party::Proposer, Party::Challenger])?;
                if !matches!(phase, Phase::Challenged | Phase::Partitioned | Phase::Leaf) {
                    return Err(wrong_phase());
                }
                let winner = if e.sender == Party::Proposer {
                    Party::Challenger
                } else {
                    Party::Proposer
                };
                decide(st, winner, VerdictPath::Concession, format!("{} conceded", e.sender));
            }
            Message::ClaimTimeout => {
                need(&[Party::Proposer, Party::Challenger])?;
                let late = st.on_clock().ok_or_else(wrong_phase)?;
                if late == e.sender {
                    return Err(ProtocolError::Rejected("cannot claim a timeout against oneself".into()));
                }
                if e.tick < st.deadline {
                    return Err(ProtocolError::Rejected(format!("{late} has until tick {}", st.deadline)));
                }
                decide(st, e.sender, VerdictPath::Timeout, format!("{late} missed tick {}", st.deadline));
            }
            Message::Route { path, .. } => {
                need(&[Party::Challenger])?;
                if phase != Phase::Leaf || st.route.is_some() {
                    return Err(wrong_phase());
                }
                before(st.deadline)?;
                st.route = Some(*path);
                match path {
                    LeafPath::Theoretical => {
                        let (ok, worst) = self.theoretical_check(st)?;
                        let winner = if ok { Party::Proposer } else { Party::Challenger };
                        decide(
                            st,
                            winner,
                            VerdictPath::Theoretical,
                            format!("max |y_P - y_ref| / tau_theo = {worst:.3e}"),
                        );
                    }
                    LeafPath::Committee => {
                        let p = st.params().clone();
                        let c0 = st.commitment.as_ref().expect("submitted").c0;
                        st.committee = committee_profiles(&c0, &p.pool, p.committee_size);
                        st.deadline = e.tick + p.round_timeout;
                    }
                }
            }
            Message::Vote {
                profile,
                within,
                p_max,
            } => {
                let Party::Member(m) = e.sender else {
                    return Err(ProtocolError::WrongParty {
                        sender: e.sender,
                        msg: name,
                    });
                };
                if phase != Phase::Leaf || st.route != Some(LeafPath::Committee) {
                    return Err(wrong_phase());
                }
                if st.committee.get(m) != Some(profile) {
                    return Err(ProtocolError::Rejected(format!("member {m} does not hold profile {profile}")));
                }
                if st.votes.iter().any(|v| v.member == m) {
                    return Err(ProtocolError::Rejected(format!("member {m} already voted")));
                }
                st.votes.push(VoteRecord {
                    member: m,
                    profile: profile.clone(),
                    within: *within,
                    p_max: *p_max,
                });
                if st.votes.len() == st.committee.len() {
                    let yes = st.votes.iter().filter(|v| v.within).count();
                    let winner = if 2 * yes > st.votes.len() {
                        Party::Proposer
                    } else {
                        Party::Challenger
                    };
                    decide(
                        st,
                        winner,
                        VerdictPath::Committee,
                        format!("{yes} of {} within thresholds", st.votes.len()),
                    );
                }
            }
            Message::Settle { verdict } => {
                need(&[Party::Contract])?;
                match &st.pending {
                    Some(v) if v == verdict => {}
                    Some(_) => return Err(ProtocolError::Rejected("settlement differs from the verdict".into())),
                    None => return Err(ProtocolError::Rejected("nothing to settle".into())),
                }
                st.payouts = Some(settle(&st.stakes, verdict));
                st.outcome = st.pending.take();
                st.phase = Phase::Settled;
            }
        }
        st.applied += 1;
        Ok(())
    }

    fn accept_submit(
        &self,
        st: &mut DisputeState,
        c: &Commitment,
        inputs: &[(String, Blob)],
        outputs: &[Blob],
        tick: u64,
    ) -> Result<(), ProtocolError> {
        let reject = |m: &str| Err(ProtocolError::Rejected(m.to_string()));
        if c.r_w != self.trees.r_w() || c.r_g != self.trees.r_g() || c.r_e != self.trees.r_e() {
            return reject("commitment roots differ from the registered model");
        }
        let g = &self.graph;
        if inputs.len() != g.inputs().len() || inputs.iter().zip(g.inputs()).any(|((n, _), s)| n != &s.name) {
            return reject("revealed inputs do not follow the declared input order");
        }
        if outputs.len() != g.outputs().len() {
            return reject("revealed output count differs from the graph");
        }
        for ((_, b), s) in inputs.iter().zip(g.inputs()) {
            if b.0.shape() != s.shape.as_slice() {
                return reject("revealed input has the wrong shape");
            }
        }
        for (b, &o) in outputs.iter().zip(g.outputs()) {
            if b.0.shape() != g.shape(o) {
                return reject("revealed output has the wrong shape");
            }
        }
        let x: Vec<&Tensor> = inputs.iter().map(|(_, b)| &b.0).collect();
        let y: Vec<&Tensor> = outputs.iter().map(|b| &b.0).collect();
        if !c.verify_against(&x, &y) {
            return reject("commitment does not verify against the revealed tensors");
        }
        let params = ProtocolParams::from_meta(&c.meta)?;
        let full = g.full();
        let f = g.frontiers(full)?;
        let io = SliceIo {
            inputs: f
                .inputs
                .iter()
                .map(|r| {
                    let Ref::Input(n) = r else { unreachable!("full-graph live-ins are inputs") };
                    let (_, b) = inputs.iter().find(|(k, _)| k == n).expect("checked above");
                    (r.clone(), b.clone())
                })
                .collect(),
            outputs: f
                .outputs
                .iter()
                .map(|&o| {
                    let k = g.outputs().iter().position(|&p| p == o).expect("live-outs of the graph are outputs");
                    (o, outputs[k].clone())
                })
                .collect(),
        };
        for (r, b) in &io.inputs {
            st.bound.insert(ref_key(r), Hash32(tensor_digest(&b.0)));
        }
        for (o, b) in &io.outputs {
            st.bound.insert(ref_key(&Ref::Node(*o)), Hash32(tensor_digest(&b.0)));
        }
        st.io = Some(io);
        st.slice = full;
        st.deadline = tick + params.window;
        st.stakes.proposer = params.bond;
        st.params = Some(params);
        st.commitment = Some(c.clone());
        st.phase = Phase::Committed;
        Ok(())
    }

    /// Verifies children against the canonical partition, the commitment
    /// roots and everything revealed earlier. Returns the extended bindings
    /// or the reason for rejection.
    fn check_partition(&self, st: &DisputeState, children: &[ChildReveal]) -> Result<BTreeMap<String, Hash32>, String> {
        let g = &self.graph;
        let expected = partition(st.slice, st.params().n).map_err(|e| e.to_string())?;
        if children.len() != expected.len() {
            return Err(format!("expected {} children, got {}", expected.len(), children.len()));
        }
        let c = st.commitment.as_ref().expect("submitted");
        let mut bound = st.bound.clone();
        for (j, (child, s)) in children.iter().zip(&expected).enumerate() {
            if child.record.slice() != *s {
                return Err(format!("child {j} covers {:?}, canonical partition is {s:?}", child.record.slice()));
            }
            let f = g.frontiers(*s).map_err(|e| e.to_string())?;
            if child.inputs.len() != f.inputs.len() || child.outputs.len() != f.outputs.len() {
                return Err(format!("child {j}: frontier arity mismatch"));
            }
            for (b, r) in child.inputs.iter().zip(&f.inputs) {
                if Some(b.0.shape()) != g.shape_of(r) {
                    return Err(format!("child {j}: live-in {r} has the wrong shape"));
                }
            }
            for (b, &o) in child.outputs.iter().zip(&f.outputs) {
                if b.0.shape() != g.shape(o) {
                    return Err(format!("child {j}: live-out {o} has the wrong shape"));
                }
            }
            let ins: Vec<&Tensor> = child.inputs.iter().map(|b| &b.0).collect();
            let outs: Vec<&Tensor> = child.outputs.iter().map(|b| &b.0).collect();
            verify_subgraph_record(g, &child.record, &c.r_w, &c.r_g, &ins, &outs)
                .map_err(|e| format!("child {j}: {e}"))?;
            let refs = f.inputs.iter().cloned().chain(f.outputs.iter().map(|&o| Ref::Node(o)));
            for (r, t) in refs.zip(ins.iter().chain(&outs)) {
                let d = Hash32(tensor_digest(t));
                match bound.get(&ref_key(&r)) {
                    Some(prev) if *prev != d => {
                        return Err(format!("child {j}: {r} contradicts an earlier reveal"));
                    }
                    Some(_) => {}
                    None => {
                        bound.insert(ref_key(&r), d);
                    }
                }
            }
        }
        Ok(bound)
    }

    fn enter_leaf(&self, st: &mut DisputeState, tick: u64) {
        st.phase = Phase::Leaf;
        st.leaf = Some(st.slice.start);
        st.deadline = tick + st.params().round_timeout;
    }
}
