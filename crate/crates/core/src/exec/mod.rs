//! Deterministic executor with profile-controlled reduction order, plus the
//! FP64 reference.

mod dump;
mod flops;
pub mod kernels;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commit::canon::{interface_hash, tensor_digest};
use crate::graph::{Graph, GraphError, Ref, Slice, SubgraphModule};
use crate::tensor::{Tensor, TensorError};

pub use dump::{read_trace_dump, write_trace_dump, TraceManifest};
pub use flops::{graph_flops, node_flops, slice_flops};
pub use kernels::{reduce_sum, Real};

/// Named graph inputs.
pub type Feeds = BTreeMap<String, Tensor>;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("missing graph input `{0}`")]
    MissingInput(String),
    #[error("unexpected graph input `{0}`")]
    UnexpectedInput(String),
    #[error("missing value for {0}")]
    MissingFeed(Ref),
    #[error("{what} has shape {got:?}, expected {expected:?}")]
    FeedShape {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("node {node}: {msg}")]
    Node { node: usize, msg: String },
    #[error("node {node} produced a non-finite value at element {index}")]
    NonFinite { node: usize, index: usize },
    #[error("cannot reduce an empty sequence")]
    EmptyReduction,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Reduction {
    Sequential,
    PairwiseTree,
    Blocked { block: usize },
    Permuted { seed: u64 },
}

/// A simulated device: one fixed reduction order and fma policy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: String,
    pub reduction: Reduction,
    pub fma: bool,
}

impl DeviceProfile {
    pub fn new(id: &str, reduction: Reduction, fma: bool) -> Self {
        Self {
            id: id.to_string(),
            reduction,
            fma,
        }
    }

    /// Left-fold reductions without fma; also the order used by the FP64
    /// reference.
    pub fn sequential() -> Self {
        Self::new("seq", Reduction::Sequential, false)
    }

    /// The built-in pool of distinct profiles. The first four cover every
    /// reduction strategy.
    pub fn pool() -> Vec<DeviceProfile> {
        vec![
            Self::sequential(),
            Self::new("tree", Reduction::PairwiseTree, false),
            Self::new("blk8-fma", Reduction::Blocked { block: 8 }, true),
            Self::new("perm7", Reduction::Permuted { seed: 7 }, false),
            Self::new("tree-fma", Reduction::PairwiseTree, true),
            Self::new("perm11-fma", Reduction::Permuted { seed: 11 }, true),
        ]
    }

    pub fn by_id(id: &str) -> Option<DeviceProfile> {
        Self::pool().into_iter().find(|p| p.id == id)
    }
}

/// Reduces `values` under `strategy`.
pub fn reduce<R: Real>(values: &[R], strategy: &Reduction) -> Result<R, ExecError> {
    if values.is_empty() {
        return Err(ExecError::EmptyReduction);
    }
    Ok(reduce_sum(values, strategy))
}

/// Additive perturbation applied to a node's output right after it is
/// computed.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub node: usize,
    pub delta: Vec<f64>,
}

/// Per-node outputs of one execution in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub profile_id: String,
    pub start: usize,
    pub outputs: Vec<Tensor>,
    pub input_digests: BTreeMap<String, String>,
    pub weights_digest: String,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Output of global node `i`.
    pub fn get(&self, i: usize) -> Option<&Tensor> {
        i.checked_sub(self.start).and_then(|k| self.outputs.get(k))
    }
}

fn weights_digest(g: &Graph) -> String {
    hex::encode(interface_hash(g.weights().values()))
}

/// Checks names and shapes of graph inputs and keys them by reference.
pub fn bind_inputs(g: &Graph, inputs: &Feeds) -> Result<BTreeMap<Ref, Tensor>, ExecError> {
    if let Some(k) = inputs.keys().find(|k| !g.inputs().iter().any(|s| &s.name == *k)) {
        return Err(ExecError::UnexpectedInput(k.clone()));
    }
    let mut out = BTreeMap::new();
    for spec in g.inputs() {
        let t = inputs
            .get(&spec.name)
            .ok_or_else(|| ExecError::MissingInput(spec.name.clone()))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(ExecError::FeedShape {
                what: format!("input `{}`", spec.name),
                expected: spec.shape.clone(),
                got: t.shape().to_vec(),
            });
        }
        out.insert(Ref::Input(spec.name.clone()), t.clone());
    }
    Ok(out)
}

/// Runs the nodes of `s` in order. References outside `s` (graph inputs and
/// earlier nodes) resolve through `feeds`, weights through the graph.
pub fn run<R: Real>(
    g: &Graph,
    s: Slice,
    feeds: &BTreeMap<Ref, Tensor>,
    profile: &DeviceProfile,
    injections: &[Injection],
) -> Result<Vec<Vec<R>>, ExecError> {
    g.check_slice(s)?;
    for r in g.frontiers(s)?.inputs {
        let t = feeds.get(&r).ok_or_else(|| ExecError::MissingFeed(r.clone()))?;
        let want = g.shape_of(&r).expect("frontier refs resolve");
        if t.shape() != want {
            return Err(ExecError::FeedShape {
                what: r.to_string(),
                expected: want.to_vec(),
                got: t.shape().to_vec(),
            });
        }
    }
    let mut vals: Vec<Vec<R>> = Vec::with_capacity(s.len());
    for i in s.start..s.end {
        let node = g.node(i);
        let external: Vec<Option<std::borrow::Cow<'_, [R]>>> = node
            .inputs
            .iter()
            .map(|r| match r {
                Ref::Node(j) if s.contains(*j) => None,
                Ref::Weight(n) => Some(R::view(&g.weights()[n])),
                other => Some(R::view(&feeds[other])),
            })
            .collect();
        let ins: Vec<kernels::In<'_, R>> = node
            .inputs
            .iter()
            .zip(&external)
            .map(|(r, e)| kernels::In {
                shape: g.shape_of(r).expect("validated reference"),
                data: match (r, e) {
                    (_, Some(c)) => c,
                    (Ref::Node(j), None) => &vals[j - s.start],
                    _ => unreachable!(),
                },
            })
            .collect();
        let mut out = kernels::eval(node, &ins, g.shape(i), profile)
            .map_err(|msg| ExecError::Node { node: i, msg })?;
        drop(ins);
        for inj in injections.iter().filter(|inj| inj.node == i) {
            if inj.delta.len() != out.len() {
                return Err(ExecError::Node {
                    node: i,
                    msg: format!("injection has {} values, output has {}", inj.delta.len(), out.len()),
                });
            }
            for (o, d) in out.iter_mut().zip(&inj.delta) {
                *o = *o + R::narrow(*d);
            }
        }
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(ExecError::NonFinite { node: i, index });
        }
        vals.push(out);
    }
    Ok(vals)
}

fn to_tensors(g: &Graph, s: Slice, vals: Vec<Vec<f32>>) -> Vec<Tensor> {
    vals.into_iter()
        .enumerate()
        .map(|(k, v)| Tensor::new(g.shape(s.start + k).to_vec(), v).expect("finite, shaped"))
        .collect()
}

/// Executes the whole graph in FP32 under `profile`.
pub fn execute(
    g: &Graph,
    inputs: &Feeds,
    profile: &DeviceProfile,
) -> Result<(Vec<Tensor>, Trace), ExecError> {
    execute_injected(g, inputs, profile, &[])
}

pub fn execute_injected(
    g: &Graph,
    inputs: &Feeds,
    profile: &DeviceProfile,
    injections: &[Injection],
) -> Result<(Vec<Tensor>, Trace), ExecError> {
    let feeds = bind_inputs(g, inputs)?;
    let s = g.full();
    let all = to_tensors(g, s, run::<f32>(g, s, &feeds, profile, injections)?);
    let outputs = g.outputs().iter().map(|&o| all[o].clone()).collect();
    let trace = Trace {
        profile_id: profile.id.clone(),
        start: 0,
        outputs: all,
        input_digests: inputs
            .iter()
            .map(|(k, t)| (k.clone(), hex::encode(tensor_digest(t))))
            .collect(),
        weights_digest: weights_digest(g),
    };
    Ok((outputs, trace))
}

/// FP32 outputs of every node in `s`, given its live-in values.
pub fn execute_slice(
    g: &Graph,
    s: Slice,
    feeds: &BTreeMap<Ref, Tensor>,
    profile: &DeviceProfile,
    injections: &[Injection],
) -> Result<Vec<Tensor>, ExecError> {
    Ok(to_tensors(g, s, run::<f32>(g, s, feeds, profile, injections)?))
}

/// Runs an extracted module; `placeholders` align with `m.placeholders`.
/// Returns the module's declared outputs.
pub fn execute_module(
    g: &Graph,
    m: &SubgraphModule,
    placeholders: &[Tensor],
    profile: &DeviceProfile,
) -> Result<Vec<Tensor>, ExecError> {
    let feeds: BTreeMap<Ref, Tensor> = m
        .placeholders
        .iter()
        .cloned()
        .zip(placeholders.iter().cloned())
        .collect();
    if feeds.len() != m.placeholders.len() || placeholders.len() != m.placeholders.len() {
        return Err(ExecError::Node {
            node: m.parent.start,
            msg: format!(
                "module takes {} placeholders, got {}",
                m.placeholders.len(),
                placeholders.len()
            ),
        });
    }
    let all = execute_slice(g, m.parent, &feeds, profile, &[])?;
    Ok(m.outputs.iter().map(|&o| all[o - m.parent.start].clone()).collect())
}

/// FP64 values of every node, sequential reductions, no fma.
pub fn execute_fp64_all(
    g: &Graph,
    inputs: &Feeds,
    injections: &[Injection],
) -> Result<Vec<Vec<f64>>, ExecError> {
    let feeds = bind_inputs(g, inputs)?;
    run::<f64>(g, g.full(), &feeds, &DeviceProfile::sequential(), injections)
}

/// FP64 reference outputs; the returned tensors carry the FP64 values as
/// shadow.
pub fn execute_fp64(g: &Graph, inputs: &Feeds) -> Result<Vec<Tensor>, ExecError> {
    let all = execute_fp64_all(g, inputs, &[])?;
    g.outputs()
        .iter()
        .map(|&o| Ok(Tensor::from_f64(g.shape(o).to_vec(), all[o].clone())?))
        .collect()
}

fn single_op_feeds(g: &Graph, i: usize, inputs: &[&Tensor]) -> Result<BTreeMap<Ref, Tensor>, ExecError> {
    let node = g.node(i);
    if inputs.len() != node.inputs.len() {
        return Err(ExecError::Node {
            node: i,
            msg: format!("expected {} operands, got {}", node.inputs.len(), inputs.len()),
        });
    }
    Ok(node
        .inputs
        .iter()
        .zip(inputs)
        .filter(|(r, _)| !matches!(r, Ref::Weight(_)))
        .map(|(r, t)| (r.clone(), (*t).clone()))
        .collect())
}

/// Evaluates node `i` alone in FP32. `inputs` align with the node's input
/// list; weight operands are taken from the graph.
pub fn eval_op(
    g: &Graph,
    i: usize,
    inputs: &[&Tensor],
    profile: &DeviceProfile,
) -> Result<Tensor, ExecError> {
    let feeds = single_op_feeds(g, i, inputs)?;
    Ok(execute_slice(g, Slice::new(i, i + 1), &feeds, profile, &[])?.remove(0))
}

/// FP64 reference for node `i` alone on the given operands.
pub fn eval_op_fp64(g: &Graph, i: usize, inputs: &[&Tensor]) -> Result<Vec<f64>, ExecError> {
    let feeds = single_op_feeds(g, i, inputs)?;
    Ok(run::<f64>(g, Slice::new(i, i + 1), &feeds, &DeviceProfile::sequential(), &[])?.remove(0))
}

/// Operand tensors of node `i` drawn from a full trace (weights from `g`).
pub fn operands<'a>(g: &'a Graph, i: usize, trace: &'a Trace, inputs: &'a Feeds) -> Vec<&'a Tensor> {
    g.node(i)
        .inputs
        .iter()
        .map(|r| match r {
            Ref::Node(j) => trace.get(*j).expect("trace covers producer"),
            Ref::Input(n) => &inputs[n],
            Ref::Weight(n) => &g.weights()[n],
        })
        .collect()
}
