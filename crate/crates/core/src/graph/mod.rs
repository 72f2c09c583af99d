//! Operator-granular DAG in canonical topological order.

mod io;
mod shape;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use io::{load_graph, save_graph, GraphFile, InputSpec, WeightRef, GRAPH_FILE_VERSION};
pub use shape::{infer_shape, norm_axis};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node {node} references node {target}, which does not precede it")]
    Cycle { node: usize, target: usize },
    #[error("node {node} references unknown {what} `{name}`")]
    Dangling {
        node: usize,
        what: &'static str,
        name: String,
    },
    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("node {node} has index {found}, expected its position")]
    BadIndex { node: usize, found: usize },
    #[error("graph output {0} is not a node")]
    BadOutput(usize),
    #[error("node {node} ({kind}): {msg}")]
    Shape {
        node: usize,
        kind: OpKind,
        msg: String,
    },
    #[error("invalid slice [{start}, {end}) for {len} nodes")]
    InvalidSlice { start: usize, end: usize, len: usize },
    #[error("partition arity must be at least 2, got {0}")]
    Arity(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Rsqrt,
    Tanh,
    Relu,
    Gelu,
    Silu,
    Sum,
    Mean,
    Max,
    Min,
    Matmul,
    Linear,
    Softmax,
    Layernorm,
    Concat,
    Slice,
    Reshape,
    Embedding,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sqrt,
        OpKind::Rsqrt,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Silu,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Max,
        OpKind::Min,
        OpKind::Matmul,
        OpKind::Linear,
        OpKind::Softmax,
        OpKind::Layernorm,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Embedding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Rsqrt => "rsqrt",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Silu => "silu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::Min => "min",
            OpKind::Matmul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Softmax => "softmax",
            OpKind::Layernorm => "layernorm",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Embedding => "embedding",
        }
    }

    /// Stable numeric tag used in signatures.
    pub fn tag(self) -> u8 {
        OpKind::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    /// Pure data movement: no arithmetic, hence no rounding error.
    pub fn is_data_movement(self) -> bool {
        matches!(
            self,
            OpKind::Concat | OpKind::Slice | OpKind::Reshape | OpKind::Embedding
        )
    }

    pub fn is_unary(self) -> bool {
        matches!(
            self,
            OpKind::Neg
                | OpKind::Exp
                | OpKind::Log
                | OpKind::Sqrt
                | OpKind::Rsqrt
                | OpKind::Tanh
                | OpKind::Relu
                | OpKind::Gelu
                | OpKind::Silu
        )
    }

    pub fn is_binary(self) -> bool {
        matches!(self, OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div)
    }

    pub fn is_reduction(self) -> bool {
        matches!(self, OpKind::Sum | OpKind::Mean | OpKind::Max | OpKind::Min)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Producer reference of a node input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ref {
    Node(usize),
    Input(String),
    Weight(String),
}

impl std::fmt::Display for Ref {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Ref::Node(i) => write!(f, "node:{i}"),
            Ref::Input(n) => write!(f, "input:{n}"),
            Ref::Weight(n) => write!(f, "weight:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Str(String),
    Ints(Vec<i64>),
}

pub type Attrs = BTreeMap<String, AttrValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub index: usize,
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<Ref>,
    #[serde(default)]
    pub attrs: Attrs,
}

impl OpNode {
    pub fn new(name: impl Into<String>, kind: OpKind, inputs: Vec<Ref>) -> Self {
        Self {
            index: 0,
            name: name.into(),
            kind,
            inputs,
            attrs: Attrs::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, v: AttrValue) -> Self {
        self.attrs.insert(key.to_string(), v);
        self
    }

    pub fn attr_int(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key) {
            Some(AttrValue::Int(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn attr_float(&self, key: &str) -> Option<f64> {
        match self.attrs.get(key) {
            Some(AttrValue::Float(v)) => Some(*v),
            Some(AttrValue::Int(v)) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn attr_ints(&self, key: &str) -> Option<&[i64]> {
        match self.attrs.get(key) {
            Some(AttrValue::Ints(v)) => Some(v),
            _ => None,
        }
    }
}

/// Half-open range of node indices in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slice {
    pub start: usize,
    pub end: usize,
}

impl Slice {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<OpNode>,
    inputs: Vec<InputSpec>,
    weights: BTreeMap<String, Tensor>,
    outputs: Vec<usize>,
    shapes: Vec<Vec<usize>>,
}

/// Live-in / live-out frontiers of a slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frontiers {
    /// Graph inputs (declared order) then producer nodes (ascending).
    pub inputs: Vec<Ref>,
    /// Weights used by the slice, sorted by name.
    pub weights: Vec<String>,
    /// Nodes in the slice consumed outside it or listed as graph outputs.
    pub outputs: Vec<usize>,
}

/// A slice materialized as a standalone module over placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphModule {
    pub parent: Slice,
    pub nodes: Vec<OpNode>,
    pub placeholders: Vec<Ref>,
    pub weights: Vec<String>,
    pub outputs: Vec<usize>,
}

/// Validates references, names and shapes, and fixes node indices.
pub fn build_graph(
    mut nodes: Vec<OpNode>,
    inputs: Vec<InputSpec>,
    weights: BTreeMap<String, Tensor>,
    outputs: Vec<usize>,
) -> Result<Graph, GraphError> {
    let mut names = BTreeSet::new();
    for (i, n) in nodes.iter_mut().enumerate() {
        if !names.insert(n.name.clone()) {
            return Err(GraphError::DuplicateName(n.name.clone()));
        }
        n.index = i;
    }
    let input_names: BTreeMap<&str, &InputSpec> =
        inputs.iter().map(|s| (s.name.as_str(), s)).collect();
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
    for n in &nodes {
        let mut in_shapes = Vec::with_capacity(n.inputs.len());
        for r in &n.inputs {
            let s = match r {
                Ref::Node(j) if *j >= n.index => {
                    return Err(GraphError::Cycle {
                        node: n.index,
                        target: *j,
                    })
                }
                Ref::Node(j) => shapes[*j].clone(),
                Ref::Input(name) => input_names
                    .get(name.as_str())
                    .ok_or_else(|| GraphError::Dangling {
                        node: n.index,
                        what: "input",
                        name: name.clone(),
                    })?
                    .shape
                    .clone(),
                Ref::Weight(name) => weights
                    .get(name)
                    .ok_or_else(|| GraphError::Dangling {
                        node: n.index,
                        what: "weight",
                        name: name.clone(),
                    })?
                    .shape()
                    .to_vec(),
            };
            in_shapes.push(s);
        }
        let out = infer_shape(n, &in_shapes).map_err(|msg| GraphError::Shape {
            node: n.index,
            kind: n.kind,
            msg,
        })?;
        shapes.push(out);
    }
    if let Some(&o) = outputs.iter().find(|&&o| o >= nodes.len()) {
        return Err(GraphError::BadOutput(o));
    }
    Ok(Graph {
        nodes,
        inputs,
        weights,
        outputs,
        shapes,
    })
}

impl Graph {
    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &OpNode {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn inputs(&self) -> &[InputSpec] {
        &self.inputs
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    /// Output shape of node `i`.
    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Shape of whatever `r` refers to.
    pub fn shape_of(&self, r: &Ref) -> Option<&[usize]> {
        match r {
            Ref::Node(i) => self.shapes.get(*i).map(Vec::as_slice),
            Ref::Input(n) => self
                .inputs
                .iter()
                .find(|s| &s.name == n)
                .map(|s| s.shape.as_slice()),
            Ref::Weight(n) => self.weights.get(n).map(Tensor::shape),
        }
    }

    pub fn full(&self) -> Slice {
        Slice::new(0, self.nodes.len())
    }

    pub fn check_slice(&self, s: Slice) -> Result<(), GraphError> {
        if s.start >= s.end || s.end > self.nodes.len() {
            return Err(GraphError::InvalidSlice {
                start: s.start,
                end: s.end,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    pub fn frontiers(&self, s: Slice) -> Result<Frontiers, GraphError> {
        self.check_slice(s)?;
        let mut used_inputs = BTreeSet::new();
        let mut producers = BTreeSet::new();
        let mut weights = BTreeSet::new();
        for n in &self.nodes[s.start..s.end] {
            for r in &n.inputs {
                match r {
                    Ref::Node(j) if *j < s.start => {
                        producers.insert(*j);
                    }
                    Ref::Node(_) => {}
                    Ref::Input(name) => {
                        used_inputs.insert(name.as_str());
                    }
                    Ref::Weight(name) => {
                        weights.insert(name.clone());
                    }
                }
            }
        }
        let mut ins: Vec<Ref> = self
            .inputs
            .iter()
            .filter(|i| used_inputs.contains(i.name.as_str()))
            .map(|i| Ref::Input(i.name.clone()))
            .collect();
        ins.extend(producers.into_iter().map(Ref::Node));

        let mut live = BTreeSet::new();
        for n in &self.nodes[s.end..] {
            for r in &n.inputs {
                if let Ref::Node(j) = r {
                    if s.contains(*j) {
                        live.insert(*j);
                    }
                }
            }
        }
        live.extend(self.outputs.iter().copied().filter(|&o| s.contains(o)));
        Ok(Frontiers {
            inputs: ins,
            weights: weights.into_iter().collect(),
            outputs: live.into_iter().collect(),
        })
    }

    pub fn extract_subgraph(&self, s: Slice) -> Result<SubgraphModule, GraphError> {
        let f = self.frontiers(s)?;
        Ok(SubgraphModule {
            parent: s,
            nodes: self.nodes[s.start..s.end].to_vec(),
            placeholders: f.inputs,
            weights: f.weights,
            outputs: f.outputs,
        })
    }

    /// Same topology and attributes with different weight values.
    pub fn with_weights(&self, weights: BTreeMap<String, Tensor>) -> Result<Graph, GraphError> {
        build_graph(
            self.nodes.clone(),
            self.inputs.clone(),
            weights,
            self.outputs.clone(),
        )
    }
}

/// Splits a slice into `n` contiguous children whose op counts differ by at
/// most one; the larger children come first.
pub fn partition(s: Slice, n: usize) -> Result<Vec<Slice>, GraphError> {
    if n < 2 {
        return Err(GraphError::Arity(n));
    }
    let len = s.len();
    if len == 0 {
        return Err(GraphError::InvalidSlice {
            start: s.start,
            end: s.end,
            len,
        });
    }
    let parts = n.min(len);
    let (base, extra) = (len / parts, len % parts);
    let mut out = Vec::with_capacity(parts);
    let mut at = s.start;
    for j in 0..parts {
        let size = base + usize::from(j < extra);
        out.push(Slice::new(at, at + size));
        at += size;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain3() -> Graph {
        let nodes = vec![
            OpNode::new("a", OpKind::Exp, vec![Ref::Input("x".into())]),
            OpNode::new("b", OpKind::Neg, vec![Ref::Node(0)]),
            OpNode::new("c", OpKind::Tanh, vec![Ref::Node(1)]),
        ];
        let inputs = vec![InputSpec::new("x", vec![4])];
        build_graph(nodes, inputs, BTreeMap::new(), vec![2]).unwrap()
    }

    #[test]
    fn two_node_chain() {
        let mut w = BTreeMap::new();
        w.insert("W".to_string(), Tensor::zeros(vec![3, 5]));
        let nodes = vec![
            OpNode::new("mm", OpKind::Matmul, vec![Ref::Input("x".into()), Ref::Weight("W".into())]),
            OpNode::new("sm", OpKind::Softmax, vec![Ref::Node(0)]).with_attr("axis", AttrValue::Int(-1)),
        ];
        let g = build_graph(nodes, vec![InputSpec::new("x", vec![2, 3])], w, vec![1]).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.shape(1), &[2, 5]);
    }

    #[test]
    fn forward_reference_rejected() {
        let nodes = vec![
            OpNode::new("a", OpKind::Neg, vec![Ref::Node(1)]),
            OpNode::new("b", OpKind::Neg, vec![Ref::Input("x".into())]),
        ];
        let r = build_graph(nodes, vec![InputSpec::new("x", vec![1])], BTreeMap::new(), vec![1]);
        assert!(matches!(r, Err(GraphError::Cycle { node: 0, target: 1 })));
    }

    #[test]
    fn duplicate_and_dangling() {
        let nodes = vec![
            OpNode::new("a", OpKind::Neg, vec![Ref::Input("x".into())]),
            OpNode::new("a", OpKind::Neg, vec![Ref::Node(0)]),
        ];
        let r = build_graph(nodes, vec![InputSpec::new("x", vec![1])], BTreeMap::new(), vec![1]);
        assert!(matches!(r, Err(GraphError::DuplicateName(_))));
        let nodes = vec![OpNode::new("a", OpKind::Neg, vec![Ref::Weight("W".into())])];
        let r = build_graph(nodes, vec![], BTreeMap::new(), vec![0]);
        assert!(matches!(r, Err(GraphError::Dangling { .. })));
    }

    #[test]
    fn frontier_examples() {
        let g = chain3();
        let f = g.frontiers(g.full()).unwrap();
        assert_eq!(f.inputs, vec![Ref::Input("x".into())]);
        assert_eq!(f.outputs, vec![2]);
        let f = g.frontiers(Slice::new(1, 2)).unwrap();
        assert_eq!(f.inputs, vec![Ref::Node(0)]);
        assert_eq!(f.outputs, vec![1]);
        assert!(g.frontiers(Slice::new(2, 2)).is_err());
        assert!(g.frontiers(Slice::new(0, 4)).is_err());
    }

    #[test]
    fn single_node_module() {
        let g = chain3();
        let m = g.extract_subgraph(Slice::new(1, 2)).unwrap();
        assert_eq!(m.nodes.len(), 1);
        assert_eq!(m.placeholders, g.node(1).inputs);
    }

    #[test]
    fn partition_examples() {
        let p = partition(Slice::new(0, 10), 2).unwrap();
        assert_eq!(p, vec![Slice::new(0, 5), Slice::new(5, 10)]);
        let sizes: Vec<usize> = partition(Slice::new(0, 5), 4).unwrap().iter().map(Slice::len).collect();
        assert_eq!(sizes, vec![2, 1, 1, 1]);
        assert_eq!(partition(Slice::new(3, 4), 4).unwrap(), vec![Slice::new(3, 4)]);
        assert!(partition(Slice::new(0, 4), 1).is_err());
        let p = partition(Slice::new(0, 1000), 4).unwrap();
        assert!(p.iter().all(|s| s.len() == 250));
    }
}
