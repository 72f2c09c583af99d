use crate::graph::{Graph, OpKind, Slice};
use crate::tensor::numel;

/// Analytic FLOP count of node `i`.
pub fn node_flops(g: &Graph, i: usize) -> u64 {
    use OpKind::*;
    let node = g.node(i);
    let out = numel(g.shape(i)) as u64;
    let in0 = || numel(g.shape_of(&node.inputs[0]).unwrap()) as u64;
    match node.kind {
        Concat | Slice | Reshape | Embedding => 0,
        Add | Sub | Mul | Div | Neg | Exp | Log | Sqrt | Rsqrt | Tanh | Relu => out,
        Gelu => 8 * out,
        Silu => 4 * out,
        Sum | Mean | Max | Min => in0(),
        Softmax => 5 * out,
        Layernorm => 8 * out,
        Matmul => {
            let a = g.shape_of(&node.inputs[0]).unwrap();
            2 * out * a[a.len() - 1] as u64
        }
        Linear => {
            let x = g.shape_of(&node.inputs[0]).unwrap();
            let k = x[x.len() - 1] as u64;
            2 * out * k + if node.inputs.len() == 3 { out } else { 0 }
        }
    }
}

pub fn slice_flops(g: &Graph, s: Slice) -> u64 {
    (s.start..s.end).map(|i| node_flops(g, i)).sum()
}

pub fn graph_flops(g: &Graph) -> u64 {
    slice_flops(g, g.full())
}
