//! Binary SHA-256 Merkle tree with 0x00/0x01 domain separation and odd-node
//! duplication.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::canon::Digest;
use super::CommitError;

pub const PROOF_VERSION: u8 = 1;

pub fn leaf_hash(bytes: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update([0u8]);
    h.update(bytes);
    h.finalize().into()
}

pub fn node_hash(l: &Digest, r: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update([1u8]);
    h.update(l);
    h.update(r);
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    /// `levels[0]` holds leaf digests, the last level holds the root.
    levels: Vec<Vec<Digest>>,
}

pub fn build_tree<B: AsRef<[u8]>>(leaves: &[B]) -> Result<MerkleTree, CommitError> {
    if leaves.is_empty() {
        return Err(CommitError::EmptyTree);
    }
    let mut levels = vec![leaves.iter().map(|b| leaf_hash(b.as_ref())).collect::<Vec<_>>()];
    while levels.last().unwrap().len() > 1 {
        let cur = levels.last().unwrap();
        let next = cur
            .chunks(2)
            .map(|p| node_hash(&p[0], p.get(1).unwrap_or(&p[0])))
            .collect();
        levels.push(next);
    }
    Ok(MerkleTree { levels })
}

impl MerkleTree {
    pub fn root(&self) -> Digest {
        self.levels.last().unwrap()[0]
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }

    pub fn height(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn leaf(&self, i: usize) -> Option<&Digest> {
        self.levels[0].get(i)
    }

    pub fn prove(&self, index: usize) -> Result<MerkleProof, CommitError> {
        if index >= self.len() {
            return Err(CommitError::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        let mut siblings = Vec::with_capacity(self.height());
        let mut i = index;
        for level in &self.levels[..self.height()] {
            let sib = i ^ 1;
            siblings.push(*level.get(sib).unwrap_or(&level[i]));
            i /= 2;
        }
        Ok(MerkleProof {
            index: index as u32,
            siblings,
        })
    }
}

/// Inclusion proof; direction at level `l` is bit `l` of `index`
/// (1 = the sibling sits on the left).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub index: u32,
    #[serde(with = "hex_digests")]
    pub siblings: Vec<Digest>,
}

impl MerkleProof {
    pub fn depth(&self) -> usize {
        self.siblings.len()
    }

    /// version, u32 index, u8 depth, then per level a direction byte and the
    /// sibling digest.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 33 * self.depth());
        out.push(PROOF_VERSION);
        out.extend_from_slice(&self.index.to_le_bytes());
        out.push(self.depth() as u8);
        for (l, s) in self.siblings.iter().enumerate() {
            out.push(((self.index >> l) & 1) as u8);
            out.extend_from_slice(s);
        }
        out
    }

    pub fn decode(b: &[u8]) -> Result<MerkleProof, CommitError> {
        let bad = |m: &str| CommitError::Malformed(format!("proof: {m}"));
        if b.len() < 6 || b[0] != PROOF_VERSION {
            return Err(bad("bad header"));
        }
        let index = u32::from_le_bytes(b[1..5].try_into().unwrap());
        let depth = b[5] as usize;
        if b.len() != 6 + 33 * depth {
            return Err(bad("length does not match depth"));
        }
        if depth < 32 && (index as u64) >> depth != 0 {
            return Err(bad("index exceeds depth"));
        }
        let mut siblings = Vec::with_capacity(depth);
        for (l, chunk) in b[6..].chunks(33).enumerate() {
            if chunk[0] as u32 != (index >> l) & 1 {
                return Err(bad("direction disagrees with index"));
            }
            siblings.push(chunk[1..].try_into().unwrap());
        }
        Ok(MerkleProof { index, siblings })
    }
}

/// Recomputes the root from `leaf` along `proof`.
pub fn verify(root: &Digest, leaf: &[u8], proof: &MerkleProof) -> bool {
    let depth = proof.depth();
    if depth > 32 || (depth < 32 && (proof.index as u64) >> depth != 0) {
        return false;
    }
    let mut h = leaf_hash(leaf);
    for (l, s) in proof.siblings.iter().enumerate() {
        h = if (proof.index >> l) & 1 == 1 {
            node_hash(s, &h)
        } else {
            node_hash(&h, s)
        };
    }
    &h == root
}

/// Verifies a proof in wire format.
pub fn verify_encoded(root: &Digest, leaf: &[u8], proof: &[u8]) -> bool {
    MerkleProof::decode(proof).is_ok_and(|p| verify(root, leaf, &p))
}

pub(crate) mod hex_digests {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::Digest;

    pub fn serialize<S: Serializer>(v: &[Digest], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Digest>, D::Error> {
        let v: Vec<String> = Vec::deserialize(d)?;
        v.iter()
            .map(|h| {
                let b = hex::decode(h).map_err(serde::de::Error::custom)?;
                b.try_into().map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))
            })
            .collect()
    }
}
