use super::{BoundError, FpModel};
use crate::exec::kernels::{layernorm_eps, split_axis};
use crate::graph::{norm_axis, OpKind, OpNode};

/// Operand values widened to FP64.
pub struct OperandView<'a> {
    pub shape: &'a [usize],
    pub values: Vec<f64>,
}

fn axis(node: &OpNode, rank: usize) -> usize {
    norm_axis(node.attr_int("axis").unwrap_or(-1), rank).expect("axis validated at build time")
}

/// Rounding count of a length-`k` dot product.
fn dot_roundings(k: usize, fma: bool) -> usize {
    if fma {
        k
    } else {
        2 * k - 1
    }
}

/// Elementwise bound for one operator. `ins` align with the node's inputs and
/// `y` is the computed output.
pub fn op_bound(
    node: &OpNode,
    ins: &[OperandView<'_>],
    y: &[f64],
    fma: bool,
    model: &FpModel,
) -> Result<Vec<f64>, BoundError> {
    use OpKind::*;
    let u = model.u;
    Ok(match node.kind {
        Concat | Slice | Reshape | Embedding | Relu | Max | Min => vec![0.0; y.len()],
        Add | Sub | Mul | Div | Neg => y.iter().map(|v| u * v.abs()).collect(),
        Exp | Log | Sqrt | Rsqrt | Tanh | Gelu | Silu => y.iter().map(|v| 2.0 * u * v.abs()).collect(),
        Sum | Mean => {
            let x = &ins[0];
            let (outer, n, inner) = split_axis(x.shape, axis(node, x.shape.len()));
            let c = model.gamma_k(n - 1)?;
            let mut out = Vec::with_capacity(y.len());
            for o in 0..outer {
                for i in 0..inner {
                    let abs: f64 = (0..n).map(|j| x.values[(o * n + j) * inner + i].abs()).sum();
                    let k = out.len();
                    out.push(if node.kind == Sum {
                        c * abs
                    } else {
                        c * abs / n as f64 + u * y[k].abs()
                    });
                }
            }
            out
        }
        Matmul => {
            let (a, b) = (&ins[0], &ins[1]);
            let (m, k) = (a.shape[a.shape.len() - 2], a.shape[a.shape.len() - 1]);
            let n = b.shape[b.shape.len() - 1];
            let c = model.gamma_k(dot_roundings(k, fma))?;
            let batched = b.shape.len() > 2;
            let mut out = Vec::with_capacity(y.len());
            for bi in 0..a.values.len() / (m * k) {
                let bb = if batched { bi * k * n } else { 0 };
                for r in 0..m {
                    let row = &a.values[(bi * m + r) * k..(bi * m + r + 1) * k];
                    for j in 0..n {
                        let s: f64 = (0..k).map(|t| (row[t] * b.values[bb + t * n + j]).abs()).sum();
                        out.push(c * s);
                    }
                }
            }
            out
        }
        Linear => {
            let (x, w) = (&ins[0], &ins[1]);
            let k = *x.shape.last().unwrap();
            let n = w.shape[0];
            let c = model.gamma_k(dot_roundings(k, fma))?;
            let has_bias = ins.len() == 3;
            let mut out = Vec::with_capacity(y.len());
            for row in x.values.chunks(k) {
                for j in 0..n {
                    let wr = &w.values[j * k..(j + 1) * k];
                    let s: f64 = row.iter().zip(wr).map(|(a, b)| (a * b).abs()).sum();
                    let idx = out.len();
                    out.push(c * s + if has_bias { u * y[idx].abs() } else { 0.0 });
                }
            }
            out
        }
        Softmax => {
            let x = &ins[0];
            let ax = axis(node, x.shape.len());
            let (outer, n, inner) = split_axis(x.shape, ax);
            let mut out = vec![0.0; y.len()];
            let mut row = Vec::with_capacity(n);
            let mut yrow = Vec::with_capacity(n);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    row.clear();
                    row.extend((0..n).map(|j| x.values[at(j)]));
                    yrow.clear();
                    yrow.extend((0..n).map(|j| y[at(j)]));
                    let b = softmax_bound_rows(&row, &yrow, model)?;
                    for j in 0..n {
                        out[at(j)] = b[j];
                    }
                }
            }
            out
        }
        Layernorm => layernorm_bound(node, ins, y, model)?,
    })
}

/// Four-step softmax template over one row: shift, exponentiate, sum,
/// normalize.
pub fn softmax_bound_rows(x: &[f64], y: &[f64], model: &FpModel) -> Result<Vec<f64>, BoundError> {
    let u = model.u;
    let n = x.len();
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let eps_e: Vec<f64> = x
        .iter()
        .zip(&e)
        .map(|(&xv, &ev)| {
            let eps_z = u * (xv.abs() + m.abs());
            ev.abs() * eps_z + 2.0 * u * ev.abs()
        })
        .collect();
    let c = model.gamma_k(n - 1)?;
    let eps_s = c * e.iter().map(|v| v.abs()).sum::<f64>() + (c + 1.0) * eps_e.iter().sum::<f64>();
    Ok((0..n)
        .map(|j| eps_e[j] / s.abs() + e[j].abs() * eps_s / (s * s) + u * y[j].abs())
        .collect())
}

/// Composition of mean, center, square, variance, shift, sqrt, divide, scale
/// and bias sub-steps, each contributing fresh rounding and propagating the
/// errors of its operands to first order.
fn layernorm_bound(
    node: &OpNode,
    ins: &[OperandView<'_>],
    y: &[f64],
    model: &FpModel,
) -> Result<Vec<f64>, BoundError> {
    let u = model.u;
    let d = *ins[0].shape.last().unwrap();
    let gamma = &ins[1].values;
    let eps = layernorm_eps(node);
    let c = model.gamma_k(d - 1)?;
    let dn = d as f64;
    let mut out = Vec::with_capacity(y.len());
    for (r, row) in ins[0].values.chunks(d).enumerate() {
        let mu = row.iter().sum::<f64>() / dn;
        let e_mu = c * row.iter().map(|v| v.abs()).sum::<f64>() / dn + u * mu.abs();
        let diff: Vec<f64> = row.iter().map(|v| v - mu).collect();
        let e_diff: Vec<f64> = diff.iter().map(|dv| e_mu + u * dv.abs()).collect();
        let sq: Vec<f64> = diff.iter().map(|v| v * v).collect();
        let e_sq: Vec<f64> = (0..d).map(|j| 2.0 * diff[j].abs() * e_diff[j] + u * sq[j]).collect();
        let var = sq.iter().sum::<f64>() / dn;
        let e_sum = c * sq.iter().sum::<f64>() + (1.0 + c) * e_sq.iter().sum::<f64>();
        let e_var = e_sum / dn + u * var;
        let v = var + eps;
        let e_v = e_var + u * v;
        let s = v.sqrt();
        let e_s = e_v / (2.0 * s) + 2.0 * u * s;
        for j in 0..d {
            let q = diff[j] / s;
            let e_q = e_diff[j] / s + diff[j].abs() * e_s / (s * s) + u * q.abs();
            let o = q * gamma[j];
            let e_o = gamma[j].abs() * e_q + u * o.abs();
            out.push(e_o + u * y[r * d + j].abs());
        }
    }
    Ok(out)
}
