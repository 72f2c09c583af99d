//! Operator kernels, generic over the arithmetic type.
//!
//! Basic arithmetic runs natively in `R`. Transcendentals are evaluated in
//! FP64 and rounded once into `R`, which keeps the FP32 path within one
//! rounding of the FP64 reference.

use std::borrow::Cow;
use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::Debug;
use std::rc::Rc;

use num_traits::Float;

use super::{DeviceProfile, Reduction};
use crate::graph::{OpKind, OpNode};
use crate::rng::Rng;
use crate::tensor::{numel, Tensor};

pub trait Real: Float + Debug + Send + Sync + 'static {
    fn narrow(v: f64) -> Self;
    fn widen(self) -> f64;
    /// Tensor payload in this precision (FP64 prefers the shadow).
    fn view(t: &Tensor) -> Cow<'_, [Self]>;
}

impl Real for f32 {
    fn narrow(v: f64) -> Self {
        v as f32
    }
    fn widen(self) -> f64 {
        self as f64
    }
    fn view(t: &Tensor) -> Cow<'_, [Self]> {
        Cow::Borrowed(t.data())
    }
}

impl Real for f64 {
    fn narrow(v: f64) -> Self {
        v
    }
    fn widen(self) -> f64 {
        self
    }
    fn view(t: &Tensor) -> Cow<'_, [Self]> {
        match t.shadow() {
            Some(s) => Cow::Borrowed(s),
            None => Cow::Owned(t.to_f64()),
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub fn silu_f64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Exact FP64 unary function behind each elementwise kind.
pub fn unary_f64(kind: OpKind, x: f64) -> f64 {
    match kind {
        OpKind::Neg => -x,
        OpKind::Exp => x.exp(),
        OpKind::Log => x.ln(),
        OpKind::Sqrt => x.sqrt(),
        OpKind::Rsqrt => 1.0 / x.sqrt(),
        OpKind::Tanh => x.tanh(),
        OpKind::Relu => x.max(0.0),
        OpKind::Gelu => gelu_f64(x),
        OpKind::Silu => silu_f64(x),
        _ => unreachable!("not a unary kind: {kind}"),
    }
}

fn unary<R: Real>(kind: OpKind, x: R) -> R {
    match kind {
        OpKind::Neg => -x,
        OpKind::Relu => {
            if x > R::zero() {
                x
            } else {
                R::zero()
            }
        }
        _ => R::narrow(unary_f64(kind, x.widen())),
    }
}

fn binary<R: Real>(kind: OpKind, a: R, b: R) -> R {
    match kind {
        OpKind::Add => a + b,
        OpKind::Sub => a - b,
        OpKind::Mul => a * b,
        OpKind::Div => a / b,
        _ => unreachable!("not a binary kind: {kind}"),
    }
}

thread_local! {
    static PERMS: RefCell<HashMap<(u64, usize), Rc<Vec<usize>>>> = RefCell::new(HashMap::new());
}

/// Seed-deterministic permutation of `0..n`, cached per thread.
pub fn permutation(seed: u64, n: usize) -> Rc<Vec<usize>> {
    PERMS.with(|c| {
        c.borrow_mut()
            .entry((seed, n))
            .or_insert_with(|| Rc::new(Rng::new(seed).fork(n as u64).permutation(n)))
            .clone()
    })
}

fn fold_seq<R: Real>(it: impl Iterator<Item = R>) -> R {
    let mut it = it;
    let first = it.next().expect("non-empty");
    it.fold(first, |acc, v| acc + v)
}

fn tree<R: Real>(v: &[R]) -> R {
    match v.len() {
        1 => v[0],
        n => {
            let mid = n.div_ceil(2);
            tree(&v[..mid]) + tree(&v[mid..])
        }
    }
}

/// Sums a non-empty slice in the order prescribed by `strategy`.
pub fn reduce_sum<R: Real>(v: &[R], strategy: &Reduction) -> R {
    debug_assert!(!v.is_empty());
    match strategy {
        Reduction::Sequential => fold_seq(v.iter().copied()),
        Reduction::PairwiseTree => tree(v),
        Reduction::Blocked { block } => {
            let b = (*block).max(1);
            fold_seq(v.chunks(b).map(|c| fold_seq(c.iter().copied())))
        }
        Reduction::Permuted { seed } => {
            let p = permutation(*seed, v.len());
            fold_seq(p.iter().map(|&i| v[i]))
        }
    }
}

fn fma_seq<R: Real>(pairs: impl Iterator<Item = (R, R)>) -> R {
    let mut it = pairs;
    let (a0, b0) = it.next().expect("non-empty");
    it.fold(a0 * b0, |acc, (a, b)| a.mul_add(b, acc))
}

/// Dot product of two equal-length slices under the profile's reduction
/// order and fma policy.
pub fn dot<R: Real>(a: &[R], b: &[R], profile: &DeviceProfile) -> R {
    debug_assert_eq!(a.len(), b.len());
    if !profile.fma {
        let prods: Vec<R> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
        return reduce_sum(&prods, &profile.reduction);
    }
    match &profile.reduction {
        Reduction::Sequential => fma_seq(a.iter().copied().zip(b.iter().copied())),
        Reduction::PairwiseTree => {
            let pairs: Vec<R> = a
                .chunks(2)
                .zip(b.chunks(2))
                .map(|(x, y)| {
                    if x.len() == 2 {
                        x[1].mul_add(y[1], x[0] * y[0])
                    } else {
                        x[0] * y[0]
                    }
                })
                .collect();
            tree(&pairs)
        }
        Reduction::Blocked { block } => {
            let bs = (*block).max(1);
            fold_seq(
                a.chunks(bs)
                    .zip(b.chunks(bs))
                    .map(|(x, y)| fma_seq(x.iter().copied().zip(y.iter().copied()))),
            )
        }
        Reduction::Permuted { seed } => {
            let p = permutation(*seed, a.len());
            fma_seq(p.iter().map(|&i| (a[i], b[i])))
        }
    }
}

/// (outer, n, inner) decomposition around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn axis_of(node: &OpNode, rank: usize) -> usize {
    crate::graph::norm_axis(node.attr_int("axis").unwrap_or(-1), rank)
        .expect("axis validated at build time")
}

/// Input view handed to kernels.
pub struct In<'a, R> {
    pub shape: &'a [usize],
    pub data: &'a [R],
}

/// Evaluates one node. Shapes were validated at graph build time; the only
/// runtime failure is an out-of-range embedding index.
pub fn eval<R: Real>(
    node: &OpNode,
    ins: &[In<'_, R>],
    out_shape: &[usize],
    profile: &DeviceProfile,
) -> Result<Vec<R>, String> {
    use OpKind::*;
    let n_out = numel(out_shape);
    Ok(match node.kind {
        Add | Sub | Mul | Div => {
            let (a, b) = (ins[0].data, ins[1].data);
            let m = b.len();
            (0..n_out).map(|i| binary(node.kind, a[i], b[i % m])).collect()
        }
        Neg | Exp | Log | Sqrt | Rsqrt | Tanh | Relu | Gelu | Silu => {
            ins[0].data.iter().map(|&x| unary(node.kind, x)).collect()
        }
        Sum | Mean | Max | Min => {
            let ax = axis_of(node, ins[0].shape.len());
            let (outer, n, inner) = split_axis(ins[0].shape, ax);
            let x = ins[0].data;
            let mut out = Vec::with_capacity(n_out);
            let mut buf = Vec::with_capacity(n);
            for o in 0..outer {
                for i in 0..inner {
                    buf.clear();
                    buf.extend((0..n).map(|j| x[(o * n + j) * inner + i]));
                    out.push(match node.kind {
                        Sum => reduce_sum(&buf, &profile.reduction),
                        Mean => reduce_sum(&buf, &profile.reduction) / R::narrow(n as f64),
                        Max => buf.iter().copied().fold(R::neg_infinity(), R::max),
                        _ => buf.iter().copied().fold(R::infinity(), R::min),
                    });
                }
            }
            out
        }
        Matmul => matmul(ins[0].shape, ins[0].data, ins[1].shape, ins[1].data, profile),
        Linear => {
            let k = *ins[0].shape.last().unwrap();
            let nout = ins[1].shape[0];
            let w = ins[1].data;
            let bias = ins.get(2).map(|b| b.data);
            let mut out = Vec::with_capacity(n_out);
            for row in ins[0].data.chunks(k) {
                for j in 0..nout {
                    let d = dot(row, &w[j * k..(j + 1) * k], profile);
                    out.push(match bias {
                        Some(b) => d + b[j],
                        None => d,
                    });
                }
            }
            out
        }
        Softmax => {
            let ax = axis_of(node, ins[0].shape.len());
            let (outer, n, inner) = split_axis(ins[0].shape, ax);
            let x = ins[0].data;
            let mut out = vec![R::zero(); n_out];
            let mut e = Vec::with_capacity(n);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let m = (0..n).map(|j| x[at(j)]).fold(R::neg_infinity(), R::max);
                    e.clear();
                    e.extend((0..n).map(|j| unary(Exp, x[at(j)] - m)));
                    let s = reduce_sum(&e, &profile.reduction);
                    for j in 0..n {
                        out[at(j)] = e[j] / s;
                    }
                }
            }
            out
        }
        Layernorm => {
            let d = *ins[0].shape.last().unwrap();
            let eps = R::narrow(layernorm_eps(node));
            let (g, b) = (ins[1].data, ins[2].data);
            let dn = R::narrow(d as f64);
            let mut out = Vec::with_capacity(n_out);
            let mut diff = Vec::with_capacity(d);
            let mut sq = Vec::with_capacity(d);
            for row in ins[0].data.chunks(d) {
                let mu = reduce_sum(row, &profile.reduction) / dn;
                diff.clear();
                diff.extend(row.iter().map(|&v| v - mu));
                sq.clear();
                sq.extend(diff.iter().map(|&v| v * v));
                let var = reduce_sum(&sq, &profile.reduction) / dn;
                let s = unary(Sqrt, var + eps);
                for j in 0..d {
                    out.push(diff[j] / s * g[j] + b[j]);
                }
            }
            out
        }
        Concat => {
            let ax = axis_of(node, out_shape.len());
            let (outer, _, inner) = split_axis(out_shape, ax);
            let mut out = Vec::with_capacity(n_out);
            for o in 0..outer {
                for t in ins {
                    let w = t.shape[ax] * inner;
                    out.extend_from_slice(&t.data[o * w..(o + 1) * w]);
                }
            }
            out
        }
        Slice => {
            let ax = axis_of(node, ins[0].shape.len());
            let (outer, n, inner) = split_axis(ins[0].shape, ax);
            let start = node.attr_int("start").unwrap() as usize;
            let end = node.attr_int("end").unwrap() as usize;
            let mut out = Vec::with_capacity(n_out);
            for o in 0..outer {
                out.extend_from_slice(&ins[0].data[(o * n + start) * inner..(o * n + end) * inner]);
            }
            out
        }
        Reshape => ins[0].data.to_vec(),
        Embedding => {
            let (v, d) = (ins[1].shape[0], ins[1].shape[1]);
            let mut out = Vec::with_capacity(n_out);
            for &ix in ins[0].data {
                let f = ix.widen();
                if f.fract() != 0.0 || f < 0.0 || f >= v as f64 {
                    return Err(format!("embedding index {f} outside [0, {v})"));
                }
                let r = f as usize;
                out.extend_from_slice(&ins[1].data[r * d..(r + 1) * d]);
            }
            out
        }
    })
}

/// Layernorm epsilon, rounded to FP32 so both precisions use the same value.
pub fn layernorm_eps(node: &OpNode) -> f64 {
    node.attr_float("eps").unwrap_or(1e-5) as f32 as f64
}

fn matmul<R: Real>(
    ash: &[usize],
    a: &[R],
    bsh: &[usize],
    b: &[R],
    profile: &DeviceProfile,
) -> Vec<R> {
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = bsh[bsh.len() - 1];
    let batch = numel(&ash[..ash.len() - 2]);
    let b_batched = bsh.len() > 2;
    let mut out = Vec::with_capacity(batch * m * n);
    let mut bt = vec![R::zero(); k * n];
    for bi in 0..batch {
        if bi == 0 || b_batched {
            let bb = if b_batched { &b[bi * k * n..(bi + 1) * k * n] } else { b };
            for kk in 0..k {
                for j in 0..n {
                    bt[j * k + kk] = bb[kk * n + j];
                }
            }
        }
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        for row in ab.chunks(k) {
            for j in 0..n {
                out.push(dot(row, &bt[j * k..(j + 1) * k], profile));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(reduction: Reduction, fma: bool) -> DeviceProfile {
        DeviceProfile {
            id: "t".into(),
            reduction,
            fma,
        }
    }

    #[test]
    fn tree_order_matches_definition() {
        let v = [1.0f32, 2.0, 3.0, 4.0];
        assert_eq!(reduce_sum(&v, &Reduction::PairwiseTree), (1.0 + 2.0) + (3.0 + 4.0));
        for s in [
            Reduction::Sequential,
            Reduction::PairwiseTree,
            Reduction::Blocked { block: 3 },
            Reduction::Permuted { seed: 1 },
        ] {
            assert_eq!(reduce_sum(&[7.5f32], &s), 7.5);
        }
    }

    #[test]
    fn blocked_order() {
        let v = [1e8f32, 1.0, -1e8, 1.0];
        // blocks of two: (1e8+1) + (-1e8+1) = 1e8 + -1e8 = 0
        assert_eq!(reduce_sum(&v, &Reduction::Blocked { block: 2 }), 0.0);
        // sequential: ((1e8+1)-1e8)+1 = 1
        assert_eq!(reduce_sum(&v, &Reduction::Sequential), 1.0);
    }

    #[test]
    fn dot_exact_on_integers() {
        let a: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let b: Vec<f32> = (1..=9).rev().map(|v| v as f32).collect();
        let want: f32 = 165.0;
        for r in [
            Reduction::Sequential,
            Reduction::PairwiseTree,
            Reduction::Blocked { block: 4 },
            Reduction::Permuted { seed: 3 },
        ] {
            for fma in [false, true] {
                assert_eq!(dot(&a, &b, &p(r.clone(), fma)), want);
            }
        }
    }

    #[test]
    fn permutation_is_cached_and_deterministic() {
        let a = permutation(11, 50);
        let b = permutation(11, 50);
        assert!(Rc::ptr_eq(&a, &b));
        assert_ne!(*permutation(12, 50), *a);
    }
}
