use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_graph, Graph, GraphError, OpNode};
use crate::tensor::{read_tensor_file, write_tensor_file};

pub const GRAPH_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl InputSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightRef {
    pub name: String,
    pub file: String,
}

/// On-disk graph description; weights live in separate tensor files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub version: u32,
    pub nodes: Vec<OpNode>,
    pub inputs: Vec<InputSpec>,
    pub weights: Vec<WeightRef>,
    pub outputs: Vec<usize>,
}

impl GraphFile {
    pub fn from_graph(g: &Graph) -> Self {
        Self {
            version: GRAPH_FILE_VERSION,
            nodes: g.nodes.clone(),
            inputs: g.inputs.clone(),
            weights: g
                .weights
                .keys()
                .map(|n| WeightRef {
                    name: n.clone(),
                    file: format!("{n}.naot"),
                })
                .collect(),
            outputs: g.outputs.clone(),
        }
    }
}

/// Writes `graph.json`-style JSON at `path` and one tensor file per weight in
/// `weights_dir`.
pub fn save_graph(g: &Graph, path: &Path, weights_dir: &Path) -> Result<(), GraphError> {
    std::fs::create_dir_all(weights_dir)?;
    let file = GraphFile::from_graph(g);
    for w in &file.weights {
        write_tensor_file(&weights_dir.join(&w.file), &g.weights[&w.name])?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_graph(path: &Path, weights_dir: &Path) -> Result<Graph, GraphError> {
    let file: GraphFile = serde_json::from_slice(&std::fs::read(path)?)?;
    if file.version != GRAPH_FILE_VERSION {
        return Err(GraphError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unsupported graph file version {}", file.version),
        )));
    }
    let mut weights = BTreeMap::new();
    for w in &file.weights {
        weights.insert(w.name.clone(), read_tensor_file(&weights_dir.join(&w.file))?);
    }
    build_graph(file.nodes, file.inputs, weights, file.outputs)
}
