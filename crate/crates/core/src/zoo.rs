//! Small in-repo models: an MLP classifier, a mini CNN, a one-block
//! transformer encoder and a long residual chain for dispute benchmarks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::exec::Feeds;
use crate::graph::{build_graph, AttrValue, Graph, GraphError, InputSpec, OpKind, OpNode, Ref};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    Cnn,
    Transformer,
    Chain,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Mlp, ModelKind::Cnn, ModelKind::Transformer, ModelKind::Chain];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Cnn => "cnn",
            ModelKind::Transformer => "transformer",
            ModelKind::Chain => "chain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A built model. Classifiers have a single `[classes]` logits output.
#[derive(Debug, Clone)]
pub struct ZooModel {
    pub kind: ModelKind,
    pub graph: Graph,
    pub classes: usize,
}

impl ZooModel {
    pub fn logits_node(&self) -> usize {
        self.graph.outputs()[0]
    }

    /// `count` request inputs drawn from `rng`.
    pub fn sample_inputs(&self, rng: &mut Rng, count: usize) -> Vec<Feeds> {
        (0..count).map(|_| self.sample_input(rng)).collect()
    }

    pub fn sample_input(&self, rng: &mut Rng) -> Feeds {
        let spec = &self.graph.inputs()[0];
        let t = match self.kind {
            ModelKind::Mlp | ModelKind::Chain => rng.normal_tensor(&spec.shape, 1.0),
            ModelKind::Cnn => rng.uniform(&spec.shape, 0.0, 1.0).expect("valid range"),
            ModelKind::Transformer => {
                let v: Vec<f32> = (0..spec.shape[0]).map(|_| rng.below(TF_VOCAB) as f32).collect();
                Tensor::new(spec.shape.clone(), v).expect("finite")
            }
        };
        Feeds::from([(spec.name.clone(), t)])
    }
}

pub fn build_model(kind: ModelKind, seed: u64) -> Result<ZooModel, GraphError> {
    match kind {
        ModelKind::Mlp => mlp(seed),
        ModelKind::Cnn => cnn(seed),
        ModelKind::Transformer => transformer(seed),
        ModelKind::Chain => chain(CHAIN_BLOCKS, CHAIN_WIDTH, seed),
    }
}

/// Incremental graph construction with seeded weight initialisation.
pub struct GraphBuilder {
    nodes: Vec<OpNode>,
    inputs: Vec<InputSpec>,
    weights: BTreeMap<String, Tensor>,
    rng: Rng,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: vec![],
            inputs: vec![],
            weights: BTreeMap::new(),
            rng: Rng::new(seed),
        }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Ref {
        self.inputs.push(InputSpec::new(name, shape.to_vec()));
        Ref::Input(name.into())
    }

    pub fn weight(&mut self, name: &str, t: Tensor) -> Ref {
        self.weights.insert(name.into(), t);
        Ref::Weight(name.into())
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], sd: f64) -> Ref {
        let t = self.rng.normal_tensor(shape, sd);
        self.weight(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f32) -> Ref {
        let n = crate::tensor::numel(shape);
        self.weight(name, Tensor::new(shape.to_vec(), vec![v; n]).expect("finite"))
    }

    pub fn op(&mut self, name: impl Into<String>, kind: OpKind, inputs: Vec<Ref>) -> Ref {
        self.op_with(name, kind, inputs, &[])
    }

    pub fn op_with(&mut self, name: impl Into<String>, kind: OpKind, inputs: Vec<Ref>, attrs: &[(&str, AttrValue)]) -> Ref {
        let mut n = OpNode::new(name, kind, inputs);
        for (k, v) in attrs {
            n = n.with_attr(k, v.clone());
        }
        self.nodes.push(n);
        Ref::Node(self.nodes.len() - 1)
    }

    /// `x W^T + b` with `W ~ N(0, gain^2 / fan_in)` and a small random bias.
    pub fn dense(&mut self, name: &str, x: Ref, fan_in: usize, fan_out: usize, gain: f64) -> Ref {
        let w = self.normal(&format!("{name}.w"), &[fan_out, fan_in], gain / (fan_in as f64).sqrt());
        let b = self.normal(&format!("{name}.b"), &[fan_out], 0.02);
        self.op(name, OpKind::Linear, vec![x, w, b])
    }

    pub fn layernorm(&mut self, name: &str, x: Ref, d: usize) -> Ref {
        let g = self.rng.normal_tensor(&[d], 0.05);
        let g = Tensor::from_f64(vec![d], g.to_f64().iter().map(|v| 1.0 + v).collect()).expect("finite");
        let g = self.weight(&format!("{name}.gamma"), g);
        let b = self.normal(&format!("{name}.beta"), &[d], 0.02);
        self.op_with(name, OpKind::Layernorm, vec![x, g, b], &[("eps", AttrValue::Float(1e-5))])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn finish(self, outputs: Vec<usize>) -> Result<Graph, GraphError> {
        build_graph(self.nodes, self.inputs, self.weights, outputs)
    }
}

fn node(r: &Ref) -> usize {
    match r {
        Ref::Node(i) => *i,
        _ => unreachable!("builder ops return node refs"),
    }
}

pub const CLASSES: usize = 10;

fn mlp(seed: u64) -> Result<ZooModel, GraphError> {
    let mut b = GraphBuilder::new(seed);
    let x = b.input("x", &[1, 16]);
    let mut h = b.dense("stem", x, 16, 32, 1.0);
    for k in 0..5 {
        let n = b.layernorm(&format!("b{k}.ln"), h.clone(), 32);
        let u = b.dense(&format!("b{k}.up"), n, 32, 64, 1.0);
        let a = b.op(format!("b{k}.act"), OpKind::Gelu, vec![u]);
        let d = b.dense(&format!("b{k}.down"), a, 64, 32, 0.5);
        h = b.op(format!("b{k}.res"), OpKind::Add, vec![h, d]);
    }
    let n = b.layernorm("head.ln", h, 32);
    let z = b.dense("head", n, 32, CLASSES, 2.0);
    let out = b.op_with("logits", OpKind::Reshape, vec![z], &[("shape", AttrValue::Ints(vec![CLASSES as i64]))]);
    let o = node(&out);
    Ok(ZooModel {
        kind: ModelKind::Mlp,
        graph: b.finish(vec![o])?,
        classes: CLASSES,
    })
}

/// Gather indices for a 3x3 convolution on an `h x w` row-major grid with
/// zero padding; out-of-image taps point at row `h * w` (the zero row).
fn im2col_indices(h: usize, w: usize, stride: usize) -> (Tensor, usize) {
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut idx = Vec::with_capacity(oh * ow * 9);
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (y, x) = ((oy * stride) as i64 + dy, (ox * stride) as i64 + dx);
                    let inside = (0..h as i64).contains(&y) && (0..w as i64).contains(&x);
                    idx.push(if inside { (y as usize * w + x as usize) as f32 } else { (h * w) as f32 });
                }
            }
        }
    }
    (Tensor::new(vec![idx.len()], idx).expect("finite"), oh * ow)
}

struct ConvCtx {
    pad: BTreeMap<usize, Ref>,
}

impl ConvCtx {
    fn pad(&mut self, b: &mut GraphBuilder, c: usize) -> Ref {
        self.pad
            .entry(c)
            .or_insert_with(|| b.constant(&format!("pad{c}"), &[1, c], 0.0))
            .clone()
    }
}

/// 3x3 convolution as concat(zero row) -> gather -> reshape -> linear.
#[allow(clippy::too_many_arguments)]
fn conv(
    b: &mut GraphBuilder,
    ctx: &mut ConvCtx,
    name: &str,
    x: Ref,
    idx: &Ref,
    positions: usize,
    cin: usize,
    cout: usize,
    gain: f64,
) -> Ref {
    let pad = ctx.pad(b, cin);
    let p = b.op_with(format!("{name}.pad"), OpKind::Concat, vec![x, pad], &[("axis", AttrValue::Int(0))]);
    let g = b.op(format!("{name}.gather"), OpKind::Embedding, vec![idx.clone(), p]);
    let cols = b.op_with(
        format!("{name}.cols"),
        OpKind::Reshape,
        vec![g],
        &[("shape", AttrValue::Ints(vec![positions as i64, 9 * cin as i64]))],
    );
    b.dense(name, cols, 9 * cin, cout, gain)
}

fn cnn(seed: u64) -> Result<ZooModel, GraphError> {
    let mut b = GraphBuilder::new(seed);
    let mut ctx = ConvCtx { pad: BTreeMap::new() };
    let x = b.input("x", &[64, 1]);
    let (i8, p8) = im2col_indices(8, 8, 1);
    let (i4, p4) = im2col_indices(8, 8, 2);
    let (i4b, _) = im2col_indices(4, 4, 1);
    let idx8 = b.weight("im2col8", i8);
    let idx_down = b.weight("im2col8s2", i4);
    let idx4 = b.weight("im2col4", i4b);
    let c = 8;
    let s = conv(&mut b, &mut ctx, "stem", x, &idx8, p8, 1, c, 2f64.sqrt());
    let mut h = b.op("stem.relu", OpKind::Relu, vec![s]);
    let block = |b: &mut GraphBuilder, ctx: &mut ConvCtx, name: &str, h: Ref, idx: &Ref, pos: usize, c: usize| {
        let a = conv(b, ctx, &format!("{name}.c1"), h.clone(), idx, pos, c, c, 2f64.sqrt());
        let a = b.op(format!("{name}.relu1"), OpKind::Relu, vec![a]);
        let a = conv(b, ctx, &format!("{name}.c2"), a, idx, pos, c, c, 0.5);
        let r = b.op(format!("{name}.res"), OpKind::Add, vec![h, a]);
        b.op(format!("{name}.relu2"), OpKind::Relu, vec![r])
    };
    for k in 0..5 {
        h = block(&mut b, &mut ctx, &format!("b{k}"), h, &idx8, p8, c);
    }
    let d = conv(&mut b, &mut ctx, "down", h, &idx_down, p4, c, 2 * c, 2f64.sqrt());
    h = b.op("down.relu", OpKind::Relu, vec![d]);
    h = block(&mut b, &mut ctx, "b5", h, &idx4, p4, 2 * c);
    let pooled = b.op_with("pool", OpKind::Mean, vec![h], &[("axis", AttrValue::Int(0))]);
    let out = b.dense("logits", pooled, 2 * c, CLASSES, 2.0);
    let o = node(&out);
    Ok(ZooModel {
        kind: ModelKind::Cnn,
        graph: b.finish(vec![o])?,
        classes: CLASSES,
    })
}

pub const TF_VOCAB: usize = 32;
const TF_LEN: usize = 8;
const TF_DIM: usize = 64;
const TF_HEADS: usize = 16;
const TF_FFN: usize = 128;

/// Post-norm encoder block with per-head projections. The attention
/// scale is folded into the query weights.
fn transformer(seed: u64) -> Result<ZooModel, GraphError> {
    let mut b = GraphBuilder::new(seed);
    let dh = TF_DIM / TF_HEADS;
    let ids = b.input("ids", &[TF_LEN]);
    let table = b.normal("tok_emb", &[TF_VOCAB, TF_DIM], 1.0);
    let pos = b.normal("pos_emb", &[TF_LEN, TF_DIM], 0.1);
    let e = b.op("embed", OpKind::Embedding, vec![ids, table]);
    let e = b.op("embed.pos", OpKind::Add, vec![e, pos]);
    let x = b.layernorm("embed.ln", e, TF_DIM);
    let mut ctxs = Vec::with_capacity(TF_HEADS);
    for h in 0..TF_HEADS {
        let q = b.dense(&format!("h{h}.q"), x.clone(), TF_DIM, dh, 1.0 / (dh as f64).sqrt());
        let k = b.dense(&format!("h{h}.k"), x.clone(), TF_DIM, dh, 1.0);
        let v = b.dense(&format!("h{h}.v"), x.clone(), TF_DIM, dh, 1.0);
        let s = b.op(format!("h{h}.scores"), OpKind::Linear, vec![q, k]);
        let p = b.op_with(format!("h{h}.attn"), OpKind::Softmax, vec![s], &[("axis", AttrValue::Int(-1))]);
        ctxs.push(b.op(format!("h{h}.ctx"), OpKind::Matmul, vec![p, v]));
    }
    let cat = b.op_with("heads", OpKind::Concat, ctxs, &[("axis", AttrValue::Int(-1))]);
    let o = b.dense("attn.out", cat, TF_DIM, TF_DIM, 1.0);
    let r = b.op("attn.res", OpKind::Add, vec![x, o]);
    let h1 = b.layernorm("attn.ln", r, TF_DIM);
    let u = b.dense("ffn.up", h1.clone(), TF_DIM, TF_FFN, 1.0);
    let a = b.op("ffn.act", OpKind::Gelu, vec![u]);
    let d = b.dense("ffn.down", a, TF_FFN, TF_DIM, 1.0);
    let r = b.op("ffn.res", OpKind::Add, vec![h1, d]);
    let h2 = b.layernorm("ffn.ln", r, TF_DIM);
    let pooled = b.op_with("pool", OpKind::Mean, vec![h2], &[("axis", AttrValue::Int(0))]);
    let out = b.dense("logits", pooled, TF_DIM, CLASSES, 2.0);
    let o = node(&out);
    Ok(ZooModel {
        kind: ModelKind::Transformer,
        graph: b.finish(vec![o])?,
        classes: CLASSES,
    })
}

pub const CHAIN_BLOCKS: usize = 1024;
pub const CHAIN_WIDTH: usize = 16;

/// `blocks` residual steps `h <- h + W_b h`, two nodes each.
pub fn chain(blocks: usize, width: usize, seed: u64) -> Result<ZooModel, GraphError> {
    chain_shaped(blocks, &[width], seed)
}

/// The chain applied to `rows` independent vectors at once.
pub fn batched_chain(blocks: usize, rows: usize, width: usize, seed: u64) -> Result<ZooModel, GraphError> {
    chain_shaped(blocks, &[rows, width], seed)
}

fn chain_shaped(blocks: usize, shape: &[usize], seed: u64) -> Result<ZooModel, GraphError> {
    let width = *shape.last().expect("rank >= 1");
    let mut b = GraphBuilder::new(seed);
    let mut h = b.input("x", shape);
    let sd = 0.5 / ((blocks * width) as f64).sqrt();
    for k in 0..blocks {
        let w = b.normal(&format!("w{k}"), &[width, width], sd);
        let l = b.op(format!("mix{k}"), OpKind::Linear, vec![h.clone(), w]);
        h = b.op(format!("res{k}"), OpKind::Add, vec![h, l]);
    }
    let o = node(&h);
    Ok(ZooModel {
        kind: ModelKind::Chain,
        graph: b.finish(vec![o])?,
        classes: 0,
    })
}
