//! Roots over weights, node signatures and thresholds; the result commitment;
//! subgraph records.

pub mod canon;
pub mod merkle;
mod record;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::calibration::ThresholdSet;
use crate::graph::Graph;
use crate::tensor::Tensor;
use canon::{canon_tensor, interface_hash, op_signature, sha256, Digest};
use merkle::{build_tree, MerkleTree};

pub use merkle::{verify, MerkleProof};
pub use record::{make_subgraph_record, verify_subgraph_record, RecordFailure, SubgraphRecord, WeightProof};

#[derive(Debug, Error, PartialEq)]
pub enum CommitError {
    #[error("cannot build a Merkle tree with zero leaves")]
    EmptyTree,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed {0}")]
    Malformed(String),
    #[error("meta is missing required key `{0}`")]
    MissingMeta(&'static str),
    #[error("no value for frontier tensor {0}")]
    MissingTensor(String),
}

/// 32-byte digest that serializes as lowercase hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Hash32(pub Digest);

impl std::fmt::Display for Hash32 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for Hash32 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Hash32 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let b = hex::decode(&s).map_err(serde::de::Error::custom)?;
        Ok(Hash32(
            b.try_into().map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))?,
        ))
    }
}

impl From<Digest> for Hash32 {
    fn from(d: Digest) -> Self {
        Hash32(d)
    }
}

/// Merkle trees a proposer commits to.
#[derive(Debug, Clone)]
pub struct ModelTrees {
    pub weight_names: Vec<String>,
    pub weights: MerkleTree,
    pub graph: MerkleTree,
    pub thresholds: MerkleTree,
}

impl ModelTrees {
    pub fn build(g: &Graph, thresholds: &ThresholdSet) -> Result<Self, CommitError> {
        let weight_names: Vec<String> = g.weights().keys().cloned().collect();
        let wl: Vec<Vec<u8>> = g.weights().values().map(canon_tensor).collect();
        // a weightless graph still needs a root
        let weights = if wl.is_empty() {
            build_tree(&[b"" as &[u8]])?
        } else {
            build_tree(&wl)?
        };
        let sl: Vec<Vec<u8>> = g.nodes().iter().map(op_signature).collect();
        Ok(Self {
            weight_names,
            weights,
            graph: build_tree(&sl)?,
            thresholds: build_tree(&thresholds.chunks())?,
        })
    }

    pub fn r_w(&self) -> Hash32 {
        Hash32(self.weights.root())
    }

    pub fn r_g(&self) -> Hash32 {
        Hash32(self.graph.root())
    }

    pub fn r_e(&self) -> Hash32 {
        Hash32(self.thresholds.root())
    }
}

pub fn threshold_root(t: &ThresholdSet) -> Result<Hash32, CommitError> {
    Ok(Hash32(build_tree(&t.chunks())?.root()))
}

/// Parses a threshold file and checks it against the committed root. The
/// bytes must be the canonical encoding, so two files that parse alike but
/// differ on disk cannot both verify.
pub fn verify_threshold_file(bytes: &[u8], r_e: &Hash32) -> Result<ThresholdSet, CommitError> {
    let t = ThresholdSet::from_bytes(bytes).map_err(|e| CommitError::Malformed(format!("threshold file: {e}")))?;
    if t.to_bytes() != bytes {
        return Err(CommitError::Malformed("threshold file is not canonically encoded".into()));
    }
    if threshold_root(&t)? != *r_e {
        return Err(CommitError::Malformed("threshold file does not match the committed root".into()));
    }
    Ok(t)
}

pub const REQUIRED_META: [&str; 4] = ["device", "kernel_version", "dtype", "window"];

/// Ordered key/value metadata bound into the commitment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Meta(pub Vec<(String, String)>);

impl Meta {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, k: &str, v: impl ToString) -> Self {
        self.set(k, v);
        self
    }

    pub fn set(&mut self, k: &str, v: impl ToString) {
        match self.0.iter_mut().find(|(key, _)| key == k) {
            Some(e) => e.1 = v.to_string(),
            None => self.0.push((k.to_string(), v.to_string())),
        }
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.0.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str())
    }

    pub fn validate(&self) -> Result<(), CommitError> {
        for k in REQUIRED_META {
            if self.get(k).is_none() {
                return Err(CommitError::MissingMeta(k));
            }
        }
        if self.get("window").unwrap().parse::<u64>().is_err() {
            return Err(CommitError::Malformed("meta window must be an integer tick count".into()));
        }
        Ok(())
    }

    /// u32 entry count, then length-prefixed key and value bytes per entry.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = (self.0.len() as u32).to_le_bytes().to_vec();
        for (k, v) in &self.0 {
            for s in [k, v] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commitment {
    pub c0: Hash32,
    pub r_w: Hash32,
    pub r_g: Hash32,
    pub r_e: Hash32,
    pub h_x: Hash32,
    pub h_y: Hash32,
    pub meta: Meta,
}

fn c0_of(r_w: &Hash32, r_g: &Hash32, h_x: &Hash32, h_y: &Hash32, meta: &Meta) -> Hash32 {
    let mut b = Vec::with_capacity(128);
    for h in [r_w, r_g, h_x, h_y] {
        b.extend_from_slice(&h.0);
    }
    b.extend_from_slice(&meta.canonical_bytes());
    Hash32(sha256(&b))
}

/// `C0 = H(r_w || r_g || H(x) || H(y) || meta)`; `H(x)` and `H(y)` are
/// interface hashes over the input and output tensors.
pub fn make_commitment(
    r_w: Hash32,
    r_g: Hash32,
    r_e: Hash32,
    x: &[&Tensor],
    y: &[&Tensor],
    meta: Meta,
) -> Result<Commitment, CommitError> {
    meta.validate()?;
    let h_x = Hash32(interface_hash(x.iter().copied()));
    let h_y = Hash32(interface_hash(y.iter().copied()));
    Ok(Commitment {
        c0: c0_of(&r_w, &r_g, &h_x, &h_y, &meta),
        r_w,
        r_g,
        r_e,
        h_x,
        h_y,
        meta,
    })
}

impl Commitment {
    /// Internal consistency: c0 matches the other fields and the meta binds
    /// `r_e`.
    pub fn verify(&self) -> bool {
        self.meta.validate().is_ok()
            && self.meta.get("threshold_root") == Some(self.r_e.to_string().as_str())
            && c0_of(&self.r_w, &self.r_g, &self.h_x, &self.h_y, &self.meta) == self.c0
    }

    /// Consistency plus agreement with revealed inputs and outputs.
    pub fn verify_against(&self, x: &[&Tensor], y: &[&Tensor]) -> bool {
        self.verify()
            && Hash32(interface_hash(x.iter().copied())) == self.h_x
            && Hash32(interface_hash(y.iter().copied())) == self.h_y
    }

    pub fn window(&self) -> u64 {
        self.meta.get("window").and_then(|w| w.parse().ok()).unwrap_or(0)
    }
}
