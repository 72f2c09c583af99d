//! Reverse-mode vector-Jacobian products in FP64 for every operator kind.

use std::collections::BTreeMap;

use super::AttackError;
use crate::exec::kernels::{axis_of, layernorm_eps, split_axis};
use crate::exec::{execute_fp64_all, Feeds, Injection};
use crate::graph::{Graph, OpKind, OpNode, Ref};
use crate::tensor::{numel, Tensor};

/// One operand as seen by a VJP rule.
#[derive(Debug, Clone, Copy)]
pub struct Operand<'a> {
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
}

fn unary_grad(kind: OpKind, x: f64, y: f64) -> f64 {
    match kind {
        OpKind::Neg => -1.0,
        OpKind::Exp => y,
        OpKind::Log => 1.0 / x,
        OpKind::Sqrt => 0.5 / y,
        OpKind::Rsqrt => -0.5 * y / x,
        OpKind::Tanh => 1.0 - y * y,
        OpKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        OpKind::Gelu => gelu_grad(x),
        OpKind::Silu => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 + x * (1.0 - s))
        }
        _ => unreachable!("not unary: {kind}"),
    }
}

/// Cotangents of every operand of `node` given the output cotangent
/// `gout`. Entries are `None` where `need` is false or the operand is not
/// differentiable (embedding indices).
pub fn vjp(node: &OpNode, ins: &[Operand<'_>], out: &[f64], gout: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
    use OpKind::*;
    let mut res: Vec<Option<Vec<f64>>> = ins.iter().map(|_| None).collect();
    let want = |k: usize| need.get(k).copied().unwrap_or(false);
    match node.kind {
        Add | Sub | Mul | Div => {
            let (a, b) = (ins[0].data, ins[1].data);
            let m = b.len();
            if want(0) {
                res[0] = Some(
                    gout.iter()
                        .enumerate()
                        .map(|(i, &g)| match node.kind {
                            Add | Sub => g,
                            Mul => g * b[i % m],
                            _ => g / b[i % m],
                        })
                        .collect(),
                );
            }
            if want(1) {
                let mut gb = vec![0.0; m];
                for (i, &g) in gout.iter().enumerate() {
                    gb[i % m] += match node.kind {
                        Add => g,
                        Sub => -g,
                        Mul => g * a[i],
                        _ => -g * a[i] / (b[i % m] * b[i % m]),
                    };
                }
                res[1] = Some(gb);
            }
        }
        Neg | Exp | Log | Sqrt | Rsqrt | Tanh | Relu | Gelu | Silu => {
            if want(0) {
                let x = ins[0].data;
                res[0] = Some((0..x.len()).map(|i| gout[i] * unary_grad(node.kind, x[i], out[i])).collect());
            }
        }
        Sum | Mean | Max | Min => {
            if want(0) {
                let ax = axis_of(node, ins[0].shape.len());
                let (outer, n, inner) = split_axis(ins[0].shape, ax);
                let x = ins[0].data;
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let g = gout[o * inner + i];
                        let at = |j: usize| (o * n + j) * inner + i;
                        match node.kind {
                            Sum | Mean => {
                                let s = if node.kind == Mean { g / n as f64 } else { g };
                                for j in 0..n {
                                    gx[at(j)] = s;
                                }
                            }
                            _ => {
                                let mut best = 0;
                                for j in 1..n {
                                    let better = if node.kind == Max { x[at(j)] > x[at(best)] } else { x[at(j)] < x[at(best)] };
                                    if better {
                                        best = j;
                                    }
                                }
                                gx[at(best)] = g;
                            }
                        }
                    }
                }
                res[0] = Some(gx);
            }
        }
        Matmul => {
            let (ash, bsh) = (ins[0].shape, ins[1].shape);
            let (a, b) = (ins[0].data, ins[1].data);
            let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
            let n = bsh[bsh.len() - 1];
            let batch = numel(&ash[..ash.len() - 2]);
            let batched = bsh.len() > 2;
            let mut ga = want(0).then(|| vec![0.0; a.len()]);
            let mut gb = want(1).then(|| vec![0.0; b.len()]);
            for bi in 0..batch {
                let boff = if batched { bi * k * n } else { 0 };
                for r in 0..m {
                    let grow = &gout[(bi * m + r) * n..(bi * m + r + 1) * n];
                    let arow = (bi * m + r) * k;
                    for kk in 0..k {
                        if let Some(ga) = ga.as_mut() {
                            let brow = &b[boff + kk * n..boff + (kk + 1) * n];
                            ga[arow + kk] += grow.iter().zip(brow).map(|(g, w)| g * w).sum::<f64>();
                        }
                        if let Some(gb) = gb.as_mut() {
                            let av = a[arow + kk];
                            for (j, g) in grow.iter().enumerate() {
                                gb[boff + kk * n + j] += av * g;
                            }
                        }
                    }
                }
            }
            res[0] = ga;
            res[1] = gb;
        }
        Linear => {
            let k = *ins[0].shape.last().unwrap();
            let nout = ins[1].shape[0];
            let (x, w) = (ins[0].data, ins[1].data);
            let rows = x.len() / k.max(1);
            let mut gx = want(0).then(|| vec![0.0; x.len()]);
            let mut gw = want(1).then(|| vec![0.0; w.len()]);
            let mut gbias = (ins.len() > 2 && want(2)).then(|| vec![0.0; nout]);
            for r in 0..rows {
                for j in 0..nout {
                    let g = gout[r * nout + j];
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(gx) = gx.as_mut() {
                        for kk in 0..k {
                            gx[r * k + kk] += g * w[j * k + kk];
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        for kk in 0..k {
                            gw[j * k + kk] += g * x[r * k + kk];
                        }
                    }
                    if let Some(gb) = gbias.as_mut() {
                        gb[j] += g;
                    }
                }
            }
            res[0] = gx;
            res[1] = gw;
            if ins.len() > 2 {
                res[2] = gbias;
            }
        }
        Softmax => {
            if want(0) {
                let ax = axis_of(node, ins[0].shape.len());
                let (outer, n, inner) = split_axis(ins[0].shape, ax);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let s: f64 = (0..n).map(|j| gout[at(j)] * out[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = out[at(j)] * (gout[at(j)] - s);
                        }
                    }
                }
                res[0] = Some(gx);
            }
        }
        Layernorm => {
            let d = *ins[0].shape.last().unwrap();
            let eps = layernorm_eps(node);
            let (x, gamma) = (ins[0].data, ins[1].data);
            let mut gx = want(0).then(|| vec![0.0; x.len()]);
            let mut gg = want(1).then(|| vec![0.0; d]);
            let mut gbeta = want(2).then(|| vec![0.0; d]);
            let mut xhat = vec![0.0; d];
            let mut gh = vec![0.0; d];
            for (r, row) in x.chunks(d).enumerate() {
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let s = (var + eps).sqrt();
                let g = &gout[r * d..(r + 1) * d];
                for j in 0..d {
                    xhat[j] = (row[j] - mu) / s;
                    gh[j] = g[j] * gamma[j];
                }
                if let Some(gg) = gg.as_mut() {
                    for j in 0..d {
                        gg[j] += g[j] * xhat[j];
                    }
                }
                if let Some(gb) = gbeta.as_mut() {
                    for j in 0..d {
                        gb[j] += g[j];
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let m1 = gh.iter().sum::<f64>() / d as f64;
                    let m2 = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = (gh[j] - m1 - xhat[j] * m2) / s;
                    }
                }
            }
            res[0] = gx;
            res[1] = gg;
            res[2] = gbeta;
        }
        Concat => {
            let rank = ins[0].shape.len();
            let ax = axis_of(node, rank);
            let total: usize = ins.iter().map(|t| t.shape[ax]).sum();
            let mut out_shape = ins[0].shape.to_vec();
            out_shape[ax] = total;
            let (outer, _, inner) = split_axis(&out_shape, ax);
            let mut offset = 0;
            for (t, op) in ins.iter().enumerate() {
                let w = op.shape[ax] * inner;
                if want(t) {
                    let mut g = Vec::with_capacity(op.data.len());
                    for o in 0..outer {
                        let base = o * total * inner + offset;
                        g.extend_from_slice(&gout[base..base + w]);
                    }
                    res[t] = Some(g);
                }
                offset += w;
            }
        }
        Slice => {
            if want(0) {
                let ax = axis_of(node, ins[0].shape.len());
                let (outer, n, inner) = split_axis(ins[0].shape, ax);
                let start = node.attr_int("start").unwrap() as usize;
                let end = node.attr_int("end").unwrap() as usize;
                let w = (end - start) * inner;
                let mut gx = vec![0.0; ins[0].data.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + w].copy_from_slice(&gout[o * w..(o + 1) * w]);
                }
                res[0] = Some(gx);
            }
        }
        Reshape => {
            if want(0) {
                res[0] = Some(gout.to_vec());
            }
        }
        Embedding => {
            if want(1) {
                let d = ins[1].shape[1];
                let mut gt = vec![0.0; ins[1].data.len()];
                for (r, &ix) in ins[0].data.iter().enumerate() {
                    let row = ix as usize;
                    for j in 0..d {
                        gt[row * d + j] += gout[r * d + j];
                    }
                }
                res[1] = Some(gt);
            }
        }
    }
    res
}

/// FP64 forward values plus reverse-mode gradients with respect to node
/// outputs of one graph on one request.
pub struct GradContext<'g> {
    graph: &'g Graph,
    /// Same graph with FP64 shadows on weights, so forward passes read them
    /// without conversion.
    shadowed: Graph,
    inputs: Feeds,
    weights: BTreeMap<String, Vec<f64>>,
    inputs64: BTreeMap<String, Vec<f64>>,
}

impl<'g> GradContext<'g> {
    pub fn new(graph: &'g Graph, inputs: &Feeds) -> Self {
        let widen = |t: &Tensor| Tensor::from_f64(t.shape().to_vec(), t.to_f64()).expect("finite");
        let shadowed = graph
            .with_weights(graph.weights().iter().map(|(k, t)| (k.clone(), widen(t))).collect())
            .expect("same graph");
        Self {
            graph,
            shadowed,
            inputs: inputs.iter().map(|(k, t)| (k.clone(), widen(t))).collect(),
            weights: graph.weights().iter().map(|(k, t)| (k.clone(), t.to_f64())).collect(),
            inputs64: inputs.iter().map(|(k, t)| (k.clone(), t.to_f64())).collect(),
        }
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    pub fn inputs(&self) -> &Feeds {
        &self.inputs
    }

    /// Node values with the given additive perturbations.
    pub fn forward(&self, injections: &[Injection]) -> Result<Vec<Vec<f64>>, AttackError> {
        Ok(execute_fp64_all(&self.shadowed, &self.inputs, injections)?)
    }

    /// Gradients of `<seed, y_out>` with respect to every node output
    /// upstream of `out`; unreached nodes get `None`.
    pub fn backward(&self, vals: &[Vec<f64>], out: usize, seed: &[f64]) -> Result<Vec<Option<Vec<f64>>>, AttackError> {
        let g = self.graph;
        if seed.len() != vals[out].len() {
            return Err(AttackError::Shape(format!("seed has {} values, node {out} has {}", seed.len(), vals[out].len())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; g.len()];
        grads[out] = Some(seed.to_vec());
        for i in (0..=out).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = g.node(i);
            let need: Vec<bool> = node.inputs.iter().map(|r| matches!(r, Ref::Node(_))).collect();
            if need.iter().any(|&b| b) {
                let ins: Vec<Operand<'_>> = node
                    .inputs
                    .iter()
                    .map(|r| Operand {
                        shape: g.shape_of(r).expect("validated reference"),
                        data: match r {
                            Ref::Node(j) => &vals[*j],
                            Ref::Weight(n) => &self.weights[n],
                            Ref::Input(n) => &self.inputs64[n],
                        },
                    })
                    .collect();
                for (r, gin) in node.inputs.iter().zip(vjp(node, &ins, &vals[i], &gout, &need)) {
                    if let (Ref::Node(j), Some(gin)) = (r, gin) {
                        match grads[*j].as_mut() {
                            Some(acc) => acc.iter_mut().zip(&gin).for_each(|(a, b)| *a += b),
                            None => grads[*j] = Some(gin),
                        }
                    }
                }
            }
            grads[i] = Some(gout);
        }
        Ok(grads)
    }
}
