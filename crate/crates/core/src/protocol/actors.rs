use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ledger::Message;
use super::state::{ChildReveal, Contract, DisputeState, LeafPath};
use super::{op_ratio, screen_ratio, Blob, ProtocolError, ProtocolParams, Ratio, KERNEL_VERSION};
use crate::bounds::node_bound;
use crate::commit::{make_commitment, make_subgraph_record, Meta};
use crate::exec::{eval_op, execute_injected, execute_slice, node_flops, slice_flops, DeviceProfile, Feeds, Injection};
use crate::graph::{partition, Ref};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposerBehavior {
    #[default]
    Honest,
    /// Commits, then never answers a challenge.
    Silent,
    /// Posts a partition whose first record carries a corrupted output hash.
    ForgeRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChallengerBehavior {
    #[default]
    Honest,
    /// Challenges regardless of the screen.
    Eager,
    /// Challenges when the screen fires, then never moves again.
    Silent,
}

/// Executes the request on its own profile, possibly with injected faults,
/// and answers partition requests from its trace.
pub struct Proposer<'c> {
    contract: &'c Contract,
    profile: DeviceProfile,
    inputs: Feeds,
    trace: Vec<Tensor>,
    outputs: Vec<Tensor>,
    pub behavior: ProposerBehavior,
}

impl<'c> Proposer<'c> {
    pub fn new(
        contract: &'c Contract,
        inputs: Feeds,
        profile: DeviceProfile,
        injections: &[Injection],
        behavior: ProposerBehavior,
    ) -> Result<Self, ProtocolError> {
        let (outputs, trace) = execute_injected(contract.graph(), &inputs, &profile, injections)?;
        Ok(Self {
            contract,
            profile,
            inputs,
            trace: trace.outputs,
            outputs,
            behavior,
        })
    }

    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    pub fn trace(&self) -> &[Tensor] {
        &self.trace
    }

    fn value(&self, r: &Ref) -> Option<&Tensor> {
        match r {
            Ref::Node(j) => self.trace.get(*j),
            Ref::Input(n) => self.inputs.get(n),
            Ref::Weight(n) => self.contract.graph().weight(n),
        }
    }

    pub fn submit(&self, params: &ProtocolParams) -> Result<Message, ProtocolError> {
        params.validate()?;
        let g = self.contract.graph();
        let trees = self.contract.trees();
        let mut meta = Meta::new()
            .with("device", &self.profile.id)
            .with("kernel_version", KERNEL_VERSION)
            .with("dtype", "fp32")
            .with("threshold_root", trees.r_e());
        params.write_meta(&mut meta);
        let inputs: Vec<(String, Blob)> = g
            .inputs()
            .iter()
            .map(|s| {
                self.inputs
                    .get(&s.name)
                    .map(|t| (s.name.clone(), Blob(t.clone())))
                    .ok_or_else(|| ProtocolError::Config(format!("missing input `{}`", s.name)))
            })
            .collect::<Result<_, _>>()?;
        let x: Vec<&Tensor> = inputs.iter().map(|(_, b)| &b.0).collect();
        let y: Vec<&Tensor> = self.outputs.iter().collect();
        let commitment = make_commitment(trees.r_w(), trees.r_g(), trees.r_e(), &x, &y, meta)?;
        Ok(Message::Submit {
            commitment,
            inputs,
            outputs: self.outputs.iter().cloned().map(Blob).collect(),
        })
    }

    pub fn partition(&self, st: &DisputeState) -> Result<Message, ProtocolError> {
        let g = self.contract.graph();
        let mut children = Vec::new();
        for s in partition(st.slice, st.params().n)? {
            let record = make_subgraph_record(g, s, |r| self.value(r), self.contract.trees())?;
            let f = g.frontiers(s)?;
            let reveal = |r: &Ref| Blob(self.value(r).expect("record built").clone());
            children.push(ChildReveal {
                record,
                inputs: f.inputs.iter().map(reveal).collect(),
                outputs: f.outputs.iter().map(|&o| reveal(&Ref::Node(o))).collect(),
            });
        }
        if self.behavior == ProposerBehavior::ForgeRecord {
            children[0].record.h_out.0[0] ^= 1;
        }
        Ok(Message::Partition { children })
    }
}

/// Re-executes locally, screens the proposer's result and drives
/// localization.
pub struct Challenger<'c> {
    contract: &'c Contract,
    profile: DeviceProfile,
    local: Vec<Tensor>,
    flops: u64,
    pub behavior: ChallengerBehavior,
}

impl<'c> Challenger<'c> {
    pub fn new(
        contract: &'c Contract,
        inputs: &Feeds,
        profile: DeviceProfile,
        behavior: ChallengerBehavior,
    ) -> Result<Self, ProtocolError> {
        let (_, trace) = execute_injected(contract.graph(), inputs, &profile, &[])?;
        Ok(Self {
            contract,
            profile,
            local: trace.outputs,
            flops: 0,
            behavior,
        })
    }

    /// FLOPs spent re-executing during the dispute (the screening run is
    /// not counted).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn local(&self) -> &[Tensor] {
        &self.local
    }

    /// A challenge if the submitted outputs are dispute-worthy.
    pub fn challenge(&self, st: &DisputeState) -> Result<Option<Message>, ProtocolError> {
        let g = self.contract.graph();
        let io = st.io.as_ref().ok_or(ProtocolError::Rejected("nothing submitted".into()))?;
        let proposed: Vec<Tensor> = g
            .outputs()
            .iter()
            .map(|&o| io.output(o).cloned().expect("outputs revealed at submit"))
            .collect();
        let mine: Vec<Tensor> = g.outputs().iter().map(|&o| self.local[o].clone()).collect();
        let r = screen_ratio(g, self.contract.thresholds(), &mine, &proposed)?;
        Ok(match self.behavior {
            ChallengerBehavior::Eager => Some(Message::Challenge {
                p_max: Ratio(if r > 1.0 { r } else { f64::INFINITY }),
            }),
            _ if r > 1.0 => Some(Message::Challenge { p_max: Ratio(r) }),
            _ => None,
        })
    }

    /// Designates the first child with an offending live-out, then
    /// re-executes it from the proposer's revealed live-ins. Concedes when no
    /// child offends.
    pub fn select(&mut self, st: &DisputeState) -> Result<Message, ProtocolError> {
        let g = self.contract.graph();
        let th = self.contract.thresholds();
        for (j, c) in st.children.iter().enumerate() {
            let s = c.record.slice();
            let f = g.frontiers(s)?;
            let mut worst: f64 = 0.0;
            for (&o, b) in f.outputs.iter().zip(&c.outputs) {
                worst = worst.max(op_ratio(th, o, &self.local[o].to_f64(), &b.0.to_f64())?);
            }
            if worst > 1.0 {
                let feeds: BTreeMap<Ref, Tensor> = f.inputs.into_iter().zip(c.inputs.iter().map(|b| b.0.clone())).collect();
                let outs = execute_slice(g, s, &feeds, &self.profile, &[])?;
                for (k, t) in outs.into_iter().enumerate() {
                    self.local[s.start + k] = t;
                }
                self.flops += slice_flops(g, s);
                return Ok(Message::Select {
                    child: j,
                    p_max: Ratio(worst),
                });
            }
        }
        Ok(Message::Concede)
    }

    /// Theoretical path if the proposer's leaf output leaves the bound
    /// around the local reference anywhere, committee path otherwise.
    pub fn route(&mut self, st: &DisputeState) -> Result<Message, ProtocolError> {
        let g = self.contract.graph();
        let (v, ops, y) = self.contract.leaf_values(st)?;
        let y_ref = if st.selections.is_empty() {
            self.flops += node_flops(g, v);
            eval_op(g, v, &ops, &self.profile)?
        } else {
            self.local[v].clone()
        };
        let tau = node_bound(g, v, &ops, &y_ref, self.profile.fma, &st.params().model)?;
        let mut worst: f64 = 0.0;
        let mut outside = false;
        for ((p, r), t) in y.to_f64().iter().zip(y_ref.to_f64()).zip(&tau.eps) {
            let d = (p - r).abs();
            outside |= d > *t;
            worst = worst.max(if *t > 0.0 {
                d / t
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            });
        }
        Ok(Message::Route {
            path: if outside {
                LeafPath::Theoretical
            } else {
                LeafPath::Committee
            },
            ratio: Ratio(worst),
        })
    }
}

/// Committee member `m` re-executes the leaf on its assigned profile and
/// votes on the proposer's output against the committed thresholds.
pub fn member_vote(contract: &Contract, st: &DisputeState, m: usize) -> Result<Message, ProtocolError> {
    let id = st
        .committee
        .get(m)
        .ok_or_else(|| ProtocolError::Rejected(format!("no committee member {m}")))?;
    let profile = DeviceProfile::by_id(id).ok_or_else(|| ProtocolError::Config(format!("unknown profile `{id}`")))?;
    let (v, ops, y) = contract.leaf_values(st)?;
    let mine = eval_op(contract.graph(), v, &ops, &profile)?;
    let r = op_ratio(contract.thresholds(), v, &mine.to_f64(), &y.to_f64())?;
    Ok(Message::Vote {
        profile: id.clone(),
        within: r <= 1.0,
        p_max: Ratio(r),
    })
}
