#![allow(dead_code)]

use std::collections::BTreeMap;

use tolver_core::exec::Feeds;
use tolver_core::graph::{build_graph, AttrValue, Graph, InputSpec, OpKind, OpNode, Ref};
use tolver_core::rng::Rng;
use tolver_core::tensor::{numel, Tensor};

/// A graph holding one operator whose operands are all graph inputs.
pub struct OpCase {
    pub graph: Graph,
    pub names: Vec<String>,
    pub operands: Vec<Tensor>,
    /// Operands that carry real-valued (differentiable) data.
    pub differentiable: Vec<bool>,
}

impl OpCase {
    pub fn feeds(&self) -> Feeds {
        self.names.iter().cloned().zip(self.operands.iter().cloned()).collect()
    }

    pub fn with_operand(&self, k: usize, values: Vec<f64>) -> Feeds {
        let mut f = self.feeds();
        let shape = self.operands[k].shape().to_vec();
        f.insert(self.names[k].clone(), Tensor::from_f64(shape, values).unwrap());
        f
    }
}

/// FP32-representable values with an exact FP64 shadow.
pub fn tensor(shape: &[usize], values: Vec<f64>) -> Tensor {
    let v: Vec<f64> = values.into_iter().map(|x| x as f32 as f64).collect();
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let v = (0..numel(shape)).map(|_| rng.uniform_f64(lo, hi)).collect();
    tensor(shape, v)
}

/// Values of magnitude in `[lo, hi]` with random sign.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let v = (0..numel(shape))
        .map(|_| {
            let m = rng.uniform_f64(lo, hi);
            if rng.below(2) == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    tensor(shape, v)
}

/// Shuffled values at least `gap` apart, so max/min have no near-ties.
fn spread(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = numel(shape);
    let mut v: Vec<f64> = (0..n).map(|k| (k as f64 - n as f64 / 2.0) * gap + rng.uniform_f64(0.0, 0.25 * gap)).collect();
    let p = rng.permutation(n);
    v = p.iter().map(|&i| v[i]).collect();
    tensor(shape, v)
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn case(node: OpNode, operands: Vec<Tensor>, differentiable: Vec<bool>) -> OpCase {
    let names: Vec<String> = (0..operands.len()).map(|k| format!("x{k}")).collect();
    let mut node = node;
    node.inputs = names.iter().map(|n| Ref::Input(n.clone())).collect();
    let specs = names
        .iter()
        .zip(&operands)
        .map(|(n, t)| InputSpec::new(n.clone(), t.shape().to_vec()))
        .collect();
    let graph = build_graph(vec![node], specs, BTreeMap::new(), vec![0]).unwrap();
    OpCase {
        graph,
        names,
        operands,
        differentiable,
    }
}

fn rank2_or_3(rng: &mut Rng, max_last: usize) -> Vec<usize> {
    if rng.below(3) == 0 {
        vec![dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, max_last)]
    } else {
        vec![dim(rng, 1, 4), dim(rng, 1, max_last)]
    }
}

/// A random well-conditioned instance of `kind`: operands stay inside the
/// domain, away from kinks and ties, so finite differences are meaningful.
pub fn op_case(kind: OpKind, rng: &mut Rng) -> OpCase {
    use OpKind::*;
    let node = OpNode::new("op", kind, vec![]);
    let axis = |rng: &mut Rng, rank: usize| -> i64 { rng.below(rank) as i64 };
    match kind {
        Add | Sub | Mul | Div => {
            let a = rank2_or_3(rng, 32);
            let b = if rng.below(2) == 0 { a.clone() } else { a[a.len() - 1..].to_vec() };
            let y = if kind == Div {
                away_from_zero(rng, &b, 0.5, 2.0)
            } else {
                uniform(rng, &b, -2.0, 2.0)
            };
            case(node, vec![uniform(rng, &a, -2.0, 2.0), y], vec![true, true])
        }
        Neg | Tanh | Gelu | Silu => {
            let s = rank2_or_3(rng, 32);
            case(node, vec![uniform(rng, &s, -3.0, 3.0)], vec![true])
        }
        Relu => {
            let s = rank2_or_3(rng, 32);
            case(node, vec![away_from_zero(rng, &s, 1e-2, 3.0)], vec![true])
        }
        Exp => {
            let s = rank2_or_3(rng, 32);
            case(node, vec![uniform(rng, &s, -5.0, 5.0)], vec![true])
        }
        Log | Sqrt | Rsqrt => {
            let s = rank2_or_3(rng, 32);
            case(node, vec![uniform(rng, &s, 0.05, 4.0)], vec![true])
        }
        Sum | Mean | Max | Min => {
            let s = rank2_or_3(rng, 64);
            let ax = axis(rng, s.len());
            let x = if matches!(kind, Max | Min) {
                spread(rng, &s, 1e-2)
            } else {
                uniform(rng, &s, -1.0, 1.0)
            };
            case(node.with_attr("axis", AttrValue::Int(ax)), vec![x], vec![true])
        }
        Matmul => {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 64), dim(rng, 1, 8));
            let (a, b) = if rng.below(3) == 0 {
                let bs = dim(rng, 1, 3);
                (vec![bs, m, k], vec![bs, k, n])
            } else {
                (vec![m, k], vec![k, n])
            };
            case(node, vec![uniform(rng, &a, -1.0, 1.0), uniform(rng, &b, -1.0, 1.0)], vec![true, true])
        }
        Linear => {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 64), dim(rng, 1, 8));
            let mut ops = vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[n, k], -1.0, 1.0)];
            if rng.below(2) == 0 {
                ops.push(uniform(rng, &[n], -1.0, 1.0));
            }
            let d = vec![true; ops.len()];
            case(node, ops, d)
        }
        Softmax => {
            let s = rank2_or_3(rng, 32);
            let ax = axis(rng, s.len());
            case(node.with_attr("axis", AttrValue::Int(ax)), vec![uniform(rng, &s, -5.0, 5.0)], vec![true])
        }
        Layernorm => {
            let (r, d) = (dim(rng, 1, 4), dim(rng, 2, 64));
            let ops = vec![
                uniform(rng, &[r, d], -2.0, 2.0),
                uniform(rng, &[d], 0.5, 1.5),
                uniform(rng, &[d], -1.0, 1.0),
            ];
            case(node, ops, vec![true; 3])
        }
        Concat => {
            let s = rank2_or_3(rng, 16);
            let ax = axis(rng, s.len());
            let parts = dim(rng, 2, 3);
            let ops: Vec<Tensor> = (0..parts)
                .map(|_| {
                    let mut t = s.clone();
                    t[ax as usize] = dim(rng, 1, 4);
                    uniform(rng, &t, -1.0, 1.0)
                })
                .collect();
            case(node.with_attr("axis", AttrValue::Int(ax)), ops, vec![true; parts])
        }
        Slice => {
            let s = rank2_or_3(rng, 16);
            let ax = rng.below(s.len());
            let start = rng.below(s[ax]);
            let end = dim(rng, start + 1, s[ax]);
            let node = node
                .with_attr("axis", AttrValue::Int(ax as i64))
                .with_attr("start", AttrValue::Int(start as i64))
                .with_attr("end", AttrValue::Int(end as i64));
            case(node, vec![uniform(rng, &s, -1.0, 1.0)], vec![true])
        }
        Reshape => {
            let s = rank2_or_3(rng, 16);
            let n = numel(&s) as i64;
            let spec = if rng.below(2) == 0 { vec![-1] } else { vec![1, n] };
            case(node.with_attr("shape", AttrValue::Ints(spec)), vec![uniform(rng, &s, -1.0, 1.0)], vec![true])
        }
        Embedding => {
            let (t, v, d) = (dim(rng, 1, 8), dim(rng, 1, 16), dim(rng, 1, 16));
            let idx: Vec<f64> = (0..t).map(|_| rng.below(v) as f64).collect();
            let ops = vec![tensor(&[t], idx), uniform(rng, &[v, d], -1.0, 1.0)];
            case(node, ops, vec![false, true])
        }
    }
}

/// Max-norm relative error between two gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub struct CheckStats {
    pub cases: usize,
    pub failures: usize,
    pub worst: f64,
}

/// Compares every VJP of `kind` against central differences of
/// `<gout, f(x)>` on `cases` random instances.
pub fn grad_check(kind: OpKind, cases: usize, seed: u64, tol: f64) -> CheckStats {
    use tolver_core::attack::{vjp, Operand};
    use tolver_core::exec::execute_fp64_all;

    let mut rng = Rng::new(seed).fork(kind.tag() as u64);
    let mut st = CheckStats {
        cases,
        failures: 0,
        worst: 0.0,
    };
    for _ in 0..cases {
        let c = op_case(kind, &mut rng);
        let phi = |feeds: &Feeds, gout: &[f64]| -> f64 {
            let y = execute_fp64_all(&c.graph, feeds, &[]).unwrap().remove(0);
            y.iter().zip(gout).map(|(a, b)| a * b).sum()
        };
        let y = execute_fp64_all(&c.graph, &c.feeds(), &[]).unwrap().remove(0);
        let gout: Vec<f64> = (0..y.len()).map(|_| rng.normal()).collect();
        let data: Vec<Vec<f64>> = c.operands.iter().map(|t| t.values_f64()).collect();
        let ins: Vec<Operand<'_>> = c
            .operands
            .iter()
            .zip(&data)
            .map(|(t, d)| Operand {
                shape: t.shape(),
                data: d,
            })
            .collect();
        let grads = vjp(c.graph.node(0), &ins, &y, &gout, &c.differentiable);
        let mut bad = false;
        for (k, g) in grads.iter().enumerate() {
            if !c.differentiable[k] {
                bad |= g.is_some();
                continue;
            }
            let Some(g) = g else {
                bad = true;
                continue;
            };
            let mut fd = vec![0.0; data[k].len()];
            for j in 0..fd.len() {
                let h = 1e-5 * data[k][j].abs().max(1.0);
                let mut plus = data[k].clone();
                plus[j] += h;
                let mut minus = data[k].clone();
                minus[j] -= h;
                fd[j] = (phi(&c.with_operand(k, plus), &gout) - phi(&c.with_operand(k, minus), &gout)) / (2.0 * h);
            }
            let e = rel_err(g, &fd);
            st.worst = st.worst.max(e);
            bad |= !(e <= tol);
        }
        st.failures += bad as usize;
    }
    st
}

/// FP32 execution on a random pool profile against the FP64 oracle, checked
/// elementwise against the deterministic co-executed bound.
pub fn bound_check(kind: OpKind, cases: usize, seed: u64) -> CheckStats {
    use tolver_core::bounds::{node_bound, FpModel};
    use tolver_core::exec::{execute, execute_fp64_all, DeviceProfile};

    let pool = DeviceProfile::pool();
    let model = FpModel::deterministic();
    let mut rng = Rng::new(seed).fork(kind.tag() as u64);
    let mut st = CheckStats {
        cases,
        failures: 0,
        worst: 0.0,
    };
    for _ in 0..cases {
        let c = op_case(kind, &mut rng);
        let p = &pool[rng.below(pool.len())];
        let (out, _) = execute(&c.graph, &c.feeds(), p).unwrap();
        let reference = execute_fp64_all(&c.graph, &c.feeds(), &[]).unwrap().remove(0);
        let ops: Vec<&Tensor> = c.operands.iter().collect();
        let b = node_bound(&c.graph, 0, &ops, &out[0], p.fma, &model).unwrap();
        let y = out[0].to_f64();
        for ((a, r), e) in y.iter().zip(&reference).zip(&b.eps) {
            let d = (a - r).abs();
            if d > 0.0 {
                st.worst = st.worst.max(if *e > 0.0 { d / e } else { f64::INFINITY });
            }
        }
        st.failures += (b.violations(&y, &reference) > 0) as usize;
    }
    st
}

#[derive(Debug, Default)]
pub struct TamperStats {
    pub tampered: usize,
    pub detected: usize,
    pub honest: usize,
    pub accepted: usize,
}

fn flip(bytes: &mut [u8], rng: &mut Rng) {
    let bit = rng.below(bytes.len() * 8);
    bytes[bit / 8] ^= 1 << (bit % 8);
}

/// Single-bit tampers spread round-robin over weight leaves, node
/// signatures, encoded proofs, record interface hashes (or the revealed
/// frontier tensors) and the threshold file. Each trial also checks that the
/// untouched artifact verifies.
pub fn tamper_sweep(trials: usize, seed: u64) -> TamperStats {
    use tolver_core::calibration::{calibrate, PercentileGrid, DEFAULT_EPSILON};
    use tolver_core::commit::canon::{canon_tensor, op_signature};
    use tolver_core::commit::merkle::verify_encoded;
    use tolver_core::commit::{make_subgraph_record, verify, verify_subgraph_record, verify_threshold_file, ModelTrees};
    use tolver_core::exec::{execute, DeviceProfile};
    use tolver_core::graph::partition;
    use tolver_core::zoo::{build_model, ModelKind};

    let m = build_model(ModelKind::Transformer, seed).unwrap();
    let g = &m.graph;
    let mut rng = Rng::new(seed).fork(99);
    let data = m.sample_inputs(&mut rng, 4);
    let cal = calibrate(g, &data, &DeviceProfile::pool()[..2], &PercentileGrid::default(), DEFAULT_EPSILON).unwrap();
    let th = cal.thresholds(g, 3.0).unwrap();
    let trees = ModelTrees::build(g, &th).unwrap();
    let (r_w, r_g, r_e) = (trees.r_w(), trees.r_g(), trees.r_e());
    let th_bytes = th.to_bytes();
    let feeds = &data[0];
    let (_, trace) = execute(g, feeds, &DeviceProfile::sequential()).unwrap();
    let value = |r: &Ref| -> Option<&Tensor> {
        match r {
            Ref::Node(j) => trace.outputs.get(*j),
            Ref::Input(n) => feeds.get(n),
            Ref::Weight(n) => g.weight(n),
        }
    };
    let slices = partition(g.full(), 8).unwrap();
    let names: Vec<&String> = g.weights().keys().collect();

    let mut st = TamperStats::default();
    for t in 0..trials {
        let (honest, tampered) = match t % 5 {
            0 => {
                let k = rng.below(names.len());
                let leaf = canon_tensor(&g.weights()[names[k]]);
                let p = trees.weights.prove(k).unwrap();
                let mut bad = leaf.clone();
                flip(&mut bad, &mut rng);
                (verify(&r_w.0, &leaf, &p), verify(&r_w.0, &bad, &p))
            }
            1 => {
                let i = rng.below(g.len());
                let leaf = op_signature(g.node(i));
                let p = trees.graph.prove(i).unwrap();
                let mut bad = leaf.clone();
                flip(&mut bad, &mut rng);
                (verify(&r_g.0, &leaf, &p), verify(&r_g.0, &bad, &p))
            }
            2 => {
                let i = rng.below(g.len());
                let leaf = op_signature(g.node(i));
                let enc = trees.graph.prove(i).unwrap().encode();
                let mut bad = enc.clone();
                flip(&mut bad, &mut rng);
                (verify_encoded(&r_g.0, &leaf, &enc), verify_encoded(&r_g.0, &leaf, &bad))
            }
            3 => {
                let s = slices[rng.below(slices.len())];
                let f = g.frontiers(s).unwrap();
                let rec = make_subgraph_record(g, s, value, &trees).unwrap();
                let ins: Vec<&Tensor> = f.inputs.iter().map(|r| value(r).unwrap()).collect();
                let outs: Vec<&Tensor> = f.outputs.iter().map(|&o| &trace.outputs[o]).collect();
                let ok = verify_subgraph_record(g, &rec, &r_w, &r_g, &ins, &outs).is_ok();
                let caught = match rng.below(3) {
                    0 => {
                        let mut r = rec.clone();
                        flip(&mut r.h_in.0, &mut rng);
                        verify_subgraph_record(g, &r, &r_w, &r_g, &ins, &outs).is_err()
                    }
                    1 => {
                        let mut r = rec.clone();
                        flip(&mut r.h_out.0, &mut rng);
                        verify_subgraph_record(g, &r, &r_w, &r_g, &ins, &outs).is_err()
                    }
                    _ => {
                        let k = rng.below(outs.len());
                        let mut bits: Vec<u32> = outs[k].data().iter().map(|v| v.to_bits()).collect();
                        let e = rng.below(bits.len());
                        bits[e] ^= 1 << rng.below(32);
                        let forged =
                            Tensor::new_allow_nonfinite(outs[k].shape().to_vec(), bits.into_iter().map(f32::from_bits).collect())
                                .unwrap();
                        let mut o2 = outs.clone();
                        o2[k] = &forged;
                        verify_subgraph_record(g, &rec, &r_w, &r_g, &ins, &o2).is_err()
                    }
                };
                (ok, !caught)
            }
            _ => {
                let mut bad = th_bytes.clone();
                flip(&mut bad, &mut rng);
                (verify_threshold_file(&th_bytes, &r_e).is_ok(), verify_threshold_file(&bad, &r_e).is_ok())
            }
        };
        st.honest += 1;
        st.accepted += honest as usize;
        st.tampered += 1;
        st.detected += !tampered as usize;
    }
    st
}

/// Envelopes (alpha = 1) calibrated on `m` inputs drawn from stream 1 of
/// `seed`; held-out inputs should come from another stream.
pub fn envelopes(
    model: &tolver_core::zoo::ZooModel,
    m: usize,
    profiles: &[tolver_core::exec::DeviceProfile],
    seed: u64,
) -> tolver_core::calibration::ThresholdSet {
    use tolver_core::calibration::{calibrate, PercentileGrid, DEFAULT_EPSILON};
    let data = model.sample_inputs(&mut Rng::new(seed).fork(1), m);
    calibrate(&model.graph, &data, profiles, &PercentileGrid::default(), DEFAULT_EPSILON)
        .unwrap()
        .thresholds(&model.graph, 1.0)
        .unwrap()
}

/// A fault of ten times the largest committed absolute threshold at the node
/// or at any graph output, on every element, floored at 1e-6 so exact nodes
/// are still perturbed. Sizing against the outputs too keeps the fault
/// visible to a challenger who only sees final results.
pub fn fault(th: &tolver_core::calibration::ThresholdSet, g: &Graph, v: usize) -> tolver_core::exec::Injection {
    let top = |i: usize| th.ops[i].tau_abs.last().copied().unwrap_or(0.0);
    let cap = g.outputs().iter().map(|&o| top(o)).fold(top(v), f64::max);
    tolver_core::exec::Injection {
        node: v,
        delta: vec![(10.0 * cap).max(1e-6); numel(g.shape(v))],
    }
}
