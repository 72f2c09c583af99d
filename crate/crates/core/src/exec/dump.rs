use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExecError, Trace};
use crate::commit::canon::tensor_digest;
use crate::tensor::{read_tensor_file, write_tensor_file, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub profile_id: String,
    pub start: usize,
    pub count: usize,
    /// Hex SHA-256 of each node output's canonical bytes.
    pub digests: Vec<String>,
    pub input_digests: BTreeMap<String, String>,
    pub weights_digest: String,
}

fn io(e: impl std::fmt::Display) -> ExecError {
    ExecError::Tensor(TensorError::Io(e.to_string()))
}

/// Writes `<index>.naot` per node plus `manifest.json`.
pub fn write_trace_dump(dir: &Path, trace: &Trace) -> Result<(), ExecError> {
    std::fs::create_dir_all(dir).map_err(io)?;
    for (k, t) in trace.outputs.iter().enumerate() {
        write_tensor_file(&dir.join(format!("{}.naot", trace.start + k)), t)?;
    }
    let manifest = TraceManifest {
        profile_id: trace.profile_id.clone(),
        start: trace.start,
        count: trace.outputs.len(),
        digests: trace.outputs.iter().map(|t| hex::encode(tensor_digest(t))).collect(),
        input_digests: trace.input_digests.clone(),
        weights_digest: trace.weights_digest.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(io)?;
    std::fs::write(dir.join("manifest.json"), json).map_err(io)?;
    Ok(())
}

/// Reads a dump back and checks every tensor against the manifest digests.
pub fn read_trace_dump(dir: &Path) -> Result<Trace, ExecError> {
    let m: TraceManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).map_err(io)?).map_err(io)?;
    let mut outputs = Vec::with_capacity(m.count);
    for k in 0..m.count {
        let t = read_tensor_file(&dir.join(format!("{}.naot", m.start + k)))?;
        if hex::encode(tensor_digest(&t)) != m.digests[k] {
            return Err(io(format!("digest mismatch for node {}", m.start + k)));
        }
        outputs.push(t);
    }
    Ok(Trace {
        profile_id: m.profile_id,
        start: m.start,
        outputs,
        input_digests: m.input_digests,
        weights_digest: m.weights_digest,
    })
}
