use super::{OpKind, OpNode};
use crate::tensor::numel;

pub fn norm_axis(axis: i64, rank: usize) -> Result<usize, String> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if (0..r).contains(&a) {
        Ok(a as usize)
    } else {
        Err(format!("axis {axis} out of range for rank {rank}"))
    }
}

/// True when `rhs` broadcasts against `lhs`: a scalar or a trailing suffix.
pub(crate) fn broadcasts(lhs: &[usize], rhs: &[usize]) -> bool {
    numel(rhs) == 1 || (rhs.len() <= lhs.len() && lhs.ends_with(rhs))
}

fn arity(lo: usize, hi: usize, shapes: &[Vec<usize>]) -> Result<(), String> {
    if shapes.len() < lo || shapes.len() > hi {
        return Err(format!(
            "expected {lo}..={hi} inputs, got {}",
            shapes.len()
        ));
    }
    Ok(())
}

fn axis_attr(n: &OpNode, rank: usize) -> Result<usize, String> {
    norm_axis(n.attr_int("axis").unwrap_or(-1), rank)
}

/// Output shape of `n` given its input shapes.
pub fn infer_shape(n: &OpNode, s: &[Vec<usize>]) -> Result<Vec<usize>, String> {
    use OpKind::*;
    match n.kind {
        Add | Sub | Mul | Div => {
            arity(2, 2, s)?;
            if !broadcasts(&s[0], &s[1]) {
                return Err(format!("cannot broadcast {:?} onto {:?}", s[1], s[0]));
            }
            Ok(s[0].clone())
        }
        Neg | Exp | Log | Sqrt | Rsqrt | Tanh | Relu | Gelu | Silu => {
            arity(1, 1, s)?;
            Ok(s[0].clone())
        }
        Sum | Mean | Max | Min => {
            arity(1, 1, s)?;
            if s[0].is_empty() {
                return Err("cannot reduce a rank-0 tensor".into());
            }
            let ax = axis_attr(n, s[0].len())?;
            if s[0][ax] == 0 {
                return Err("reduction over an empty axis".into());
            }
            let mut out = s[0].clone();
            out.remove(ax);
            Ok(out)
        }
        Matmul => {
            arity(2, 2, s)?;
            let (a, b) = (&s[0], &s[1]);
            if a.len() < 2 || b.len() < 2 {
                return Err("matmul needs rank >= 2 operands".into());
            }
            let k = a[a.len() - 1];
            if b[b.len() - 2] != k {
                return Err(format!("inner dims differ: {a:?} x {b:?}"));
            }
            if b.len() > 2 && (b.len() != a.len() || a[..a.len() - 2] != b[..b.len() - 2]) {
                return Err(format!("batch dims differ: {a:?} x {b:?}"));
            }
            let mut out = a[..a.len() - 1].to_vec();
            out.push(b[b.len() - 1]);
            Ok(out)
        }
        Linear => {
            arity(2, 3, s)?;
            let (x, w) = (&s[0], &s[1]);
            if x.is_empty() || w.len() != 2 || w[1] != x[x.len() - 1] {
                return Err(format!("linear expects x[..,K], W[N,K]; got {x:?}, {w:?}"));
            }
            if s.len() == 3 && s[2] != [w[0]] {
                return Err(format!("bias shape {:?} != [{}]", s[2], w[0]));
            }
            let mut out = x[..x.len() - 1].to_vec();
            out.push(w[0]);
            Ok(out)
        }
        Softmax => {
            arity(1, 1, s)?;
            let ax = axis_attr(n, s[0].len())?;
            if s[0][ax] == 0 {
                return Err("softmax over an empty axis".into());
            }
            Ok(s[0].clone())
        }
        Layernorm => {
            arity(3, 3, s)?;
            let x = &s[0];
            let d = *x.last().ok_or("layernorm needs rank >= 1")?;
            if d == 0 || s[1] != [d] || s[2] != [d] {
                return Err(format!("gamma/beta must be [{d}]"));
            }
            Ok(x.clone())
        }
        Concat => {
            if s.is_empty() {
                return Err("concat needs inputs".into());
            }
            let ax = axis_attr(n, s[0].len())?;
            let mut out = s[0].clone();
            for t in &s[1..] {
                if t.len() != out.len()
                    || t.iter().zip(&out).enumerate().any(|(i, (a, b))| i != ax && a != b)
                {
                    return Err(format!("concat shapes disagree: {:?} vs {t:?}", s[0]));
                }
                out[ax] += t[ax];
            }
            Ok(out)
        }
        Slice => {
            arity(1, 1, s)?;
            let ax = axis_attr(n, s[0].len())?;
            let start = n.attr_int("start").ok_or("slice needs `start`")?;
            let end = n.attr_int("end").ok_or("slice needs `end`")?;
            if start < 0 || end <= start || end as usize > s[0][ax] {
                return Err(format!("bad slice range [{start}, {end}) on dim {}", s[0][ax]));
            }
            let mut out = s[0].clone();
            out[ax] = (end - start) as usize;
            Ok(out)
        }
        Reshape => {
            arity(1, 1, s)?;
            let spec = n.attr_ints("shape").ok_or("reshape needs `shape`")?;
            let total = numel(&s[0]);
            let known: i64 = spec.iter().filter(|&&d| d >= 0).product();
            let wild = spec.iter().filter(|&&d| d == -1).count();
            if wild > 1 || spec.iter().any(|&d| d < -1) {
                return Err(format!("bad reshape spec {spec:?}"));
            }
            let out: Vec<usize> = spec
                .iter()
                .map(|&d| {
                    if d == -1 {
                        if known == 0 {
                            0
                        } else {
                            total / known as usize
                        }
                    } else {
                        d as usize
                    }
                })
                .collect();
            if numel(&out) != total {
                return Err(format!("cannot reshape {:?} to {spec:?}", s[0]));
            }
            Ok(out)
        }
        Embedding => {
            arity(2, 2, s)?;
            if s[1].len() != 2 {
                return Err(format!("embedding table must be rank 2, got {:?}", s[1]));
            }
            let mut out = s[0].clone();
            out.push(s[1][1]);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AttrValue, Ref};

    fn node(kind: OpKind) -> OpNode {
        OpNode::new("n", kind, vec![Ref::Input("x".into())])
    }

    #[test]
    fn shapes() {
        assert_eq!(infer_shape(&node(OpKind::Add), &[vec![2, 3], vec![3]]).unwrap(), vec![2, 3]);
        assert!(infer_shape(&node(OpKind::Add), &[vec![2, 3], vec![2]]).is_err());
        let sum = node(OpKind::Sum).with_attr("axis", AttrValue::Int(0));
        assert_eq!(infer_shape(&sum, &[vec![4, 5]]).unwrap(), vec![5]);
        assert_eq!(infer_shape(&node(OpKind::Matmul), &[vec![2, 3], vec![3, 4]]).unwrap(), vec![2, 4]);
        assert_eq!(
            infer_shape(&node(OpKind::Matmul), &[vec![7, 2, 3], vec![7, 3, 4]]).unwrap(),
            vec![7, 2, 4]
        );
        assert_eq!(
            infer_shape(&node(OpKind::Linear), &[vec![5, 3], vec![4, 3], vec![4]]).unwrap(),
            vec![5, 4]
        );
        let r = node(OpKind::Reshape).with_attr("shape", AttrValue::Ints(vec![-1, 2]));
        assert_eq!(infer_shape(&r, &[vec![3, 4]]).unwrap(), vec![6, 2]);
        let c = node(OpKind::Concat).with_attr("axis", AttrValue::Int(1));
        assert_eq!(infer_shape(&c, &[vec![2, 1], vec![2, 3]]).unwrap(), vec![2, 4]);
        let sl = node(OpKind::Slice)
            .with_attr("axis", AttrValue::Int(0))
            .with_attr("start", AttrValue::Int(1))
            .with_attr("end", AttrValue::Int(3));
        assert_eq!(infer_shape(&sl, &[vec![4, 2]]).unwrap(), vec![2, 2]);
        assert_eq!(infer_shape(&node(OpKind::Embedding), &[vec![3], vec![10, 4]]).unwrap(), vec![3, 4]);
    }
}
