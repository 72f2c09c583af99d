//! Canonical byte encodings for tensors and operator signatures.

use sha2::{Digest as _, Sha256};

use crate::graph::{AttrValue, OpNode, Ref};
use crate::tensor::Tensor;

pub type Digest = [u8; 32];

pub fn sha256(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

/// dtype code, rank, dims, contiguous strides, then the LE payload.
pub fn canon_tensor(t: &Tensor) -> Vec<u8> {
    let shape = t.shape();
    let mut out = Vec::with_capacity(5 + 16 * shape.len() + 4 * t.len());
    out.push(0u8);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let mut stride = 1u64;
    let mut strides = vec![0u64; shape.len()];
    for (i, &d) in shape.iter().enumerate().rev() {
        strides[i] = stride;
        stride *= d as u64;
    }
    for s in strides {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_digest(t: &Tensor) -> Digest {
    sha256(&canon_tensor(t))
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_ref(out: &mut Vec<u8>, r: &Ref) {
    match r {
        Ref::Node(i) => {
            out.push(0);
            out.extend_from_slice(&(*i as u64).to_le_bytes());
        }
        Ref::Input(n) => {
            out.push(1);
            put_bytes(out, n.as_bytes());
        }
        Ref::Weight(n) => {
            out.push(2);
            put_bytes(out, n.as_bytes());
        }
    }
}

fn put_attr(out: &mut Vec<u8>, v: &AttrValue) {
    match v {
        AttrValue::Int(i) => {
            out.push(0);
            out.extend_from_slice(&i.to_le_bytes());
        }
        AttrValue::Float(f) => {
            out.push(1);
            out.extend_from_slice(&f.to_bits().to_le_bytes());
        }
        AttrValue::Str(s) => {
            out.push(2);
            put_bytes(out, s.as_bytes());
        }
        AttrValue::Ints(xs) => {
            out.push(3);
            out.extend_from_slice(&(xs.len() as u32).to_le_bytes());
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

/// Length-prefixed encoding of name, kind, kind tag, input refs and sorted
/// attributes.
pub fn op_signature(n: &OpNode) -> Vec<u8> {
    let mut out = Vec::new();
    put_bytes(&mut out, n.name.as_bytes());
    put_bytes(&mut out, n.kind.name().as_bytes());
    out.push(n.kind.tag());
    out.extend_from_slice(&(n.inputs.len() as u32).to_le_bytes());
    for r in &n.inputs {
        put_ref(&mut out, r);
    }
    out.extend_from_slice(&(n.attrs.len() as u32).to_le_bytes());
    for (k, v) in &n.attrs {
        put_bytes(&mut out, k.as_bytes());
        put_attr(&mut out, v);
    }
    out
}

/// H(concat over z of H(canon(z))).
pub fn interface_hash<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Digest {
    let mut h = Sha256::new();
    for t in tensors {
        h.update(tensor_digest(t));
    }
    h.finalize().into()
}
