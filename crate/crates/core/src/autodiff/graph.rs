//! Symbolic computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is a topologically ordered list of primitive ops referencing
//! earlier nodes. Leaves are named inputs and named parameters. [`forward`]
//! evaluates into a fresh [`Evaluation`] (the per-call scratch), [`backward`]
//! replays the tape in reverse and returns gradients for every parameter and
//! every input. Shapes are checked at evaluation time, so one graph serves
//! any batch size.
//!
//! Tensor rank conventions: dense ops work on `[B, n]`, temporal ops on
//! `[B, H, C]`, per-sample reductions produce `[B]`, full reductions `[1]`.

use std::collections::BTreeMap;

use super::scalar::{sigmoid, softplus as stable_softplus};
use super::tensor::Tensor;
use crate::{CoreError, Result};

pub type NodeId = usize;

/// Named parameter store. BTreeMap keeps iteration order deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Merge another set into this one; duplicate names are a usage error.
    pub fn merge(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.map {
            if self.map.contains_key(&k) {
                return Err(CoreError::usage(format!("duplicate parameter name {k}")));
            }
            self.map.insert(k, v);
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Param(String),
    /// x:[B,n] * w:[n,m] + b:[m] -> [B,m]
    Affine { x: NodeId, w: NodeId, b: NodeId },
    /// x:[B,H,Cin], w:[Cout,Cin,K] (K odd), b:[Cout] -> [B,H,Cout];
    /// stride 1, zero same-padding.
    Conv1d { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Square(NodeId),
    /// Hard clamp; gradient passes inside [lo, hi], zero outside.
    Clamp(NodeId, f64, f64),
    /// Full reduction -> [1]
    Sum(NodeId),
    /// Full reduction -> [1]
    Mean(NodeId),
    /// Last-axis concat of two rank-2 tensors.
    Concat(NodeId, NodeId),
    /// [B,H,C] -> [B,H*C]
    Flatten(NodeId),
    /// [B,h*c] -> [B,h,c]
    Unflatten(NodeId, usize, usize),
    /// Column slice [start, end) of a rank-2 tensor.
    SliceCols(NodeId, usize, usize),
    /// [B,1] -> [B]
    Squeeze(NodeId),
    /// Mean over the time axis: [B,H,C] -> [B,C]
    MeanTime(NodeId),
    /// Broadcast-add a per-channel bias over time: [B,H,C] + [B,C]
    AddTimeBias { x: NodeId, bias: NodeId },
    /// Sinusoidal embedding of a step value: [B] or [B,1] -> [B,dim]
    SinusoidalEmbed { k: NodeId, dim: usize },
    /// Row-wise diagonal-Gaussian log-density:
    /// x:[B,d], mean:[B,d], log_std:[d] or [B,d] -> [B]
    GaussianLogProb { x: NodeId, mean: NodeId, log_std: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::Conv1d { .. } => "conv1d",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Square(_) => "square",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(..) => "concat",
            Op::Flatten(_) => "flatten",
            Op::Unflatten(..) => "unflatten",
            Op::SliceCols(..) => "slice_cols",
            Op::Squeeze(_) => "squeeze",
            Op::MeanTime(_) => "mean_time",
            Op::AddTimeBias { .. } => "add_time_bias",
            Op::SinusoidalEmbed { .. } => "sinusoidal_embed",
            Op::GaussianLogProb { .. } => "gaussian_log_prob",
        }
    }
}

/// Immutable, topologically ordered op list with named outputs.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Op>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn output_node(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::usage(format!("graph has no output named {name}")))
    }

    pub fn output_names(&self) -> impl Iterator<Item = &String> {
        self.outputs.keys()
    }

    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Input(n) => Some(n.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Param(n) => Some(n.as_str()),
                _ => None,
            })
            .collect()
    }
}

/// Builds a [`Graph`]. Inputs and params are deduplicated by name so a
/// parameter referenced from several places is one node.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Op>,
    outputs: BTreeMap<String, NodeId>,
    input_ids: BTreeMap<String, NodeId>,
    param_ids: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(op);
        id
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        let name = name.into();
        if let Some(&id) = self.input_ids.get(&name) {
            return id;
        }
        let id = self.push(Op::Input(name.clone()));
        self.input_ids.insert(name, id);
        id
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        let name = name.into();
        if let Some(&id) = self.param_ids.get(&name) {
            return id;
        }
        let id = self.push(Op::Param(name.clone()));
        self.param_ids.insert(name, id);
        id
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Conv1d { x, w, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSigmoid(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::AddConst(x, c))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b))
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten(x))
    }

    pub fn unflatten(&mut self, x: NodeId, h: usize, c: usize) -> NodeId {
        self.push(Op::Unflatten(x, h, c))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceCols(x, start, end))
    }

    pub fn squeeze(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Squeeze(x))
    }

    pub fn mean_time(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanTime(x))
    }

    pub fn add_time_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddTimeBias { x, bias })
    }

    pub fn sinusoidal_embed(&mut self, k: NodeId, dim: usize) -> NodeId {
        self.push(Op::SinusoidalEmbed { k, dim })
    }

    pub fn gaussian_log_prob(&mut self, x: NodeId, mean: NodeId, log_std: NodeId) -> NodeId {
        self.push(Op::GaussianLogProb { x, mean, log_std })
    }

    pub fn output(&mut self, name: impl Into<String>, node: NodeId) {
        self.outputs.insert(name.into(), node);
    }

    pub fn build(self) -> Graph {
        Graph { nodes: self.nodes, outputs: self.outputs }
    }
}

/// Per-call scratch: cached forward value of every node.
#[derive(Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn output(&self, graph: &Graph, name: &str) -> Result<&Tensor> {
        Ok(&self.values[graph.output_node(name)?])
    }
}

/// Gradients keyed by parameter / input name.
#[derive(Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
            && self.inputs.values().all(|t| t.all_finite())
    }
}

fn ctx(id: NodeId, op: &Op, msg: impl std::fmt::Display) -> String {
    format!("node {id} ({}): {msg}", op.name())
}


/// Frequencies for the sinusoidal step embedding; `half` >= 1.
fn sin_embed_freqs(half: usize) -> Vec<f64> {
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    (0..half)
        .map(|i| (-(10_000.0f64.ln()) * i as f64 / denom).exp())
        .collect()
}

/// Evaluate the graph on the given bindings. Missing bindings, shape
/// violations and non-finite results are structured errors naming the node.
pub fn forward(graph: &Graph, params: &ParamSet, inputs: &[(&str, &Tensor)]) -> Result<Evaluation> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (id, op) in graph.nodes.iter().enumerate() {
        let t = eval_node(id, op, &values, params, inputs)?;
        if !t.all_finite() {
            return Err(CoreError::non_finite(ctx(id, op, "output contains NaN/Inf")));
        }
        values.push(t);
    }
    Ok(Evaluation { values })
}

fn lookup_input(name: &str, inputs: &[(&str, &Tensor)]) -> Option<Tensor> {
    inputs
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| (*t).clone())
}

fn eval_node(
    id: NodeId,
    op: &Op,
    values: &[Tensor],
    params: &ParamSet,
    inputs: &[(&str, &Tensor)],
) -> Result<Tensor> {
    let val = |n: NodeId| &values[n];
    match op {
        Op::Input(name) => lookup_input(name, inputs)
            .ok_or_else(|| CoreError::usage(ctx(id, op, format!("input {name} not bound")))),
        Op::Param(name) => params
            .get(name)
            .cloned()
            .ok_or_else(|| CoreError::usage(ctx(id, op, format!("parameter {name} not bound")))),
        Op::Affine { x, w, b } => {
            let (x, w, b) = (val(*x), val(*w), val(*b));
            let (bs, n) = as_matrix_shape(x)
                .ok_or_else(|| CoreError::shape(ctx(id, op, "x must be rank 2")))?;
            let (wn, m) = as_matrix_shape(w)
                .ok_or_else(|| CoreError::shape(ctx(id, op, "w must be rank 2")))?;
            if wn != n || b.shape() != [m] {
                return Err(CoreError::shape(ctx(
                    id,
                    op,
                    format!("x {:?} w {:?} b {:?}", x.shape(), w.shape(), b.shape()),
                )));
            }
            let xv = x.values();
            let wv = w.values();
            let bv = b.values();
            let mut out = vec![0.0; bs * m];
            for bi in 0..bs {
                let orow = &mut out[bi * m..(bi + 1) * m];
                orow.copy_from_slice(bv);
                let xrow = &xv[bi * n..(bi + 1) * n];
                for i in 0..n {
                    let xi = xrow[i];
                    let wrow = &wv[i * m..(i + 1) * m];
                    for j in 0..m {
                        orow[j] += xi * wrow[j];
                    }
                }
            }
            Tensor::new(vec![bs, m], out)
        }
        Op::Conv1d { x, w, b } => {
            let (x, w, b) = (val(*x), val(*w), val(*b));
            if x.rank() != 3 || w.rank() != 3 {
                return Err(CoreError::shape(ctx(id, op, "x and w must be rank 3")));
            }
            let (bs, h, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            if wcin != cin || b.shape() != [cout] || k % 2 == 0 {
                return Err(CoreError::shape(ctx(
                    id,
                    op,
                    format!("x {:?} w {:?} b {:?} (kernel must be odd)", x.shape(), w.shape(), b.shape()),
                )));
            }
            let pad = (k - 1) / 2;
            let xv = x.values();
            let wv = w.values();
            let bv = b.values();
            let mut out = vec![0.0; bs * h * cout];
            for bi in 0..bs {
                for t in 0..h {
                    let orow = &mut out[(bi * h + t) * cout..(bi * h + t + 1) * cout];
                    orow.copy_from_slice(bv);
                    for j in 0..k {
                        let ti = t as isize + j as isize - pad as isize;
                        if ti < 0 || ti >= h as isize {
                            continue;
                        }
                        let xrow = &xv[(bi * h + ti as usize) * cin..(bi * h + ti as usize + 1) * cin];
                        for co in 0..cout {
                            let wrow = &wv[(co * cin) * k..];
                            let mut acc = 0.0;
                            for (ci, &xc) in xrow.iter().enumerate() {
                                acc += xc * wrow[ci * k + j];
                            }
                            orow[co] += acc;
                        }
                    }
                }
            }
            Tensor::new(vec![bs, h, cout], out)
        }
        Op::Relu(x) => Ok(val(*x).map(|v| v.max(0.0))),
        Op::Tanh(x) => Ok(val(*x).map(f64::tanh)),
        Op::Softplus(x) => Ok(val(*x).map(stable_softplus)),
        Op::Sigmoid(x) => Ok(val(*x).map(sigmoid)),
        Op::LogSigmoid(x) => Ok(val(*x).map(|v| -stable_softplus(-v))),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if ta.shape() != tb.shape() {
                return Err(CoreError::shape(ctx(
                    id,
                    op,
                    format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                )));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |u, v| u + v,
                Op::Sub(..) => |u, v| u - v,
                _ => |u, v| u * v,
            };
            let vals = ta
                .values()
                .iter()
                .zip(tb.values())
                .map(|(&u, &v)| f(u, v))
                .collect();
            Tensor::new(ta.shape().to_vec(), vals)
        }
        Op::Scale(x, c) => Ok(val(*x).map(|v| v * c)),
        Op::AddConst(x, c) => Ok(val(*x).map(|v| v + c)),
        Op::Square(x) => Ok(val(*x).map(|v| v * v)),
        Op::Clamp(x, lo, hi) => Ok(val(*x).map(|v| v.clamp(*lo, *hi))),
        Op::Sum(x) => Ok(Tensor::scalar(val(*x).values().iter().sum())),
        Op::Mean(x) => {
            let t = val(*x);
            Ok(Tensor::scalar(t.values().iter().sum::<f64>() / t.len() as f64))
        }
        Op::Concat(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (ba, na) = as_matrix_shape(ta)
                .ok_or_else(|| CoreError::shape(ctx(id, op, "lhs must be rank 2")))?;
            let (bb, nb) = as_matrix_shape(tb)
                .ok_or_else(|| CoreError::shape(ctx(id, op, "rhs must be rank 2")))?;
            if ba != bb {
                return Err(CoreError::shape(ctx(id, op, format!("batch {ba} vs {bb}"))));
            }
            let mut out = vec![0.0; ba * (na + nb)];
            for bi in 0..ba {
                out[bi * (na + nb)..bi * (na + nb) + na]
                    .copy_from_slice(&ta.values()[bi * na..(bi + 1) * na]);
                out[bi * (na + nb) + na..(bi + 1) * (na + nb)]
                    .copy_from_slice(&tb.values()[bi * nb..(bi + 1) * nb]);
            }
            Tensor::new(vec![ba, na + nb], out)
        }
        Op::Flatten(x) => {
            let t = val(*x);
            if t.rank() != 3 {
                return Err(CoreError::shape(ctx(id, op, "expects rank 3")));
            }
            Tensor::new(
                vec![t.shape()[0], t.shape()[1] * t.shape()[2]],
                t.values().to_vec(),
            )
        }
        Op::Unflatten(x, h, c) => {
            let t = val(*x);
            let (bs, n) = as_matrix_shape(t)
                .ok_or_else(|| CoreError::shape(ctx(id, op, "expects rank 2")))?;
            if n != h * c {
                return Err(CoreError::shape(ctx(id, op, format!("{n} != {h}*{c}"))));
            }
            Tensor::new(vec![bs, *h, *c], t.values().to_vec())
        }
        Op::SliceCols(x, start, end) => {
            let t = val(*x);
            let (bs, n) = as_matrix_shape(t)
                .ok_or_else(|| CoreError::shape(ctx(id, op, "expects rank 2")))?;
            if *start >= *end || *end > n {
                return Err(CoreError::shape(ctx(id, op, format!("slice {start}..{end} of {n}"))));
            }
            let m = end - start;
            let mut out = vec![0.0; bs * m];
            for bi in 0..bs {
                out[bi * m..(bi + 1) * m]
                    .copy_from_slice(&t.values()[bi * n + start..bi * n + end]);
            }
            Tensor::new(vec![bs, m], out)
        }
        Op::Squeeze(x) => {
            let t = val(*x);
            let (bs, n) = as_matrix_shape(t)
                .ok_or_else(|| CoreError::shape(ctx(id, op, "expects rank 2")))?;
            if n != 1 {
                return Err(CoreError::shape(ctx(id, op, format!("[B,{n}] not [B,1]"))));
            }
            Tensor::new(vec![bs], t.values().to_vec())
        }
        Op::MeanTime(x) => {
            let t = val(*x);
            if t.rank() != 3 {
                return Err(CoreError::shape(ctx(id, op, "expects rank 3")));
            }
            let (bs, h, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut out = vec![0.0; bs * c];
            for bi in 0..bs {
                for ti in 0..h {
                    let row = &t.values()[(bi * h + ti) * c..(bi * h + ti + 1) * c];
                    for (ci, &v) in row.iter().enumerate() {
                        out[bi * c + ci] += v;
                    }
                }
                for ci in 0..c {
                    out[bi * c + ci] /= h as f64;
                }
            }
            Tensor::new(vec![bs, c], out)
        }
        Op::AddTimeBias { x, bias } => {
            let (t, tb) = (val(*x), val(*bias));
            if t.rank() != 3 {
                return Err(CoreError::shape(ctx(id, op, "x expects rank 3")));
            }
            let (bs, h, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            if tb.shape() != [bs, c] {
                return Err(CoreError::shape(ctx(
                    id,
                    op,
                    format!("bias {:?} for x {:?}", tb.shape(), t.shape()),
                )));
            }
            let mut out = t.values().to_vec();
            for bi in 0..bs {
                let brow = &tb.values()[bi * c..(bi + 1) * c];
                for ti in 0..h {
                    let orow = &mut out[(bi * h + ti) * c..(bi * h + ti + 1) * c];
                    for (ci, &bv) in brow.iter().enumerate() {
                        orow[ci] += bv;
                    }
                }
            }
            Tensor::new(vec![bs, h, c], out)
        }
        Op::SinusoidalEmbed { k, dim } => {
            let t = val(*k);
            let bs = match t.shape() {
                [b] => *b,
                [b, 1] => *b,
                s => {
                    return Err(CoreError::shape(ctx(id, op, format!("k shape {s:?}"))));
                }
            };
            if dim % 2 != 0 || *dim == 0 {
                return Err(CoreError::shape(ctx(id, op, "dim must be positive and even")));
            }
            let half = dim / 2;
            let freqs = sin_embed_freqs(half);
            let mut out = vec![0.0; bs * dim];
            for bi in 0..bs {
                let kv = t.values()[bi];
                for (i, &f) in freqs.iter().enumerate() {
                    out[bi * dim + i] = (kv * f).sin();
                    out[bi * dim + half + i] = (kv * f).cos();
                }
            }
            Tensor::new(vec![bs, *dim], out)
        }
        Op::GaussianLogProb { x, mean, log_std } => {
            let (tx, tm, tl) = (val(*x), val(*mean), val(*log_std));
            let (bs, d) = as_matrix_shape(tx)
                .ok_or_else(|| CoreError::shape(ctx(id, op, "x must be rank 2")))?;
            if tm.shape() != [bs, d] {
                return Err(CoreError::shape(ctx(
                    id,
                    op,
                    format!("mean {:?} for x {:?}", tm.shape(), tx.shape()),
                )));
            }
            let shared = match tl.shape() {
                [ld] if *ld == d => true,
                [lb, ld] if *lb == bs && *ld == d => false,
                s => {
                    return Err(CoreError::shape(ctx(id, op, format!("log_std shape {s:?}"))));
                }
            };
            const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
            let mut out = vec![0.0; bs];
            for bi in 0..bs {
                let mut acc = 0.0;
                for di in 0..d {
                    let ls = if shared {
                        tl.values()[di]
                    } else {
                        tl.values()[bi * d + di]
                    };
                    let z = (tx.values()[bi * d + di] - tm.values()[bi * d + di]) / ls.exp();
                    acc += -ls - HALF_LN_2PI - 0.5 * z * z;
                }
                out[bi] = acc;
            }
            Tensor::new(vec![bs], out)
        }
    }
}

fn as_matrix_shape(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [b, n] => Some((*b, *n)),
        _ => None,
    }
}

/// Reverse pass from a named output. The output must be a scalar unless a
/// seed tensor of matching shape is supplied. Returns gradients for every
/// parameter and every input of the graph.
pub fn backward(
    graph: &Graph,
    eval: &Evaluation,
    output: &str,
    seed: Option<&Tensor>,
) -> Result<Gradients> {
    let out_id = graph.output_node(output)?;
    if eval.values.len() != graph.nodes.len() {
        return Err(CoreError::usage("backward called with a stale evaluation"));
    }
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; graph.nodes.len()];
    let out_val = &eval.values[out_id];
    match seed {
        Some(s) => {
            if s.shape() != out_val.shape() {
                return Err(CoreError::shape(format!(
                    "seed shape {:?} vs output shape {:?}",
                    s.shape(),
                    out_val.shape()
                )));
            }
            grads[out_id] = Some(s.values().to_vec());
        }
        None => {
            if out_val.len() != 1 {
                return Err(CoreError::usage(format!(
                    "output {output} is not scalar; supply a seed"
                )));
            }
            grads[out_id] = Some(vec![1.0]);
        }
    }

    for id in (0..graph.nodes.len()).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        backward_node(id, &graph.nodes[id], &g, &eval.values, &mut grads)?;
        grads[id] = Some(g);
    }

    let mut out = Gradients::default();
    for (id, op) in graph.nodes.iter().enumerate() {
        let g = grads[id]
            .take()
            .unwrap_or_else(|| vec![0.0; eval.values[id].len()]);
        let t = Tensor::new(eval.values[id].shape().to_vec(), g)?;
        match op {
            Op::Param(name) => {
                out.params.insert(name.clone(), t);
            }
            Op::Input(name) => {
                out.inputs.insert(name.clone(), t);
            }
            _ => {}
        }
    }
    Ok(out)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: &[f64]) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => grads[id] = Some(contribution.to_vec()),
    }
}

fn backward_node(
    id: NodeId,
    op: &Op,
    g: &[f64],
    values: &[Tensor],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    match op {
        Op::Input(_) | Op::Param(_) => {}
        Op::Affine { x, w, b } => {
            let (tx, tw) = (&values[*x], &values[*w]);
            let (bs, n) = (tx.shape()[0], tx.shape()[1]);
            let m = tw.shape()[1];
            let xv = tx.values();
            let wv = tw.values();
            let mut dx = vec![0.0; bs * n];
            let mut dw = vec![0.0; n * m];
            let mut db = vec![0.0; m];
            for bi in 0..bs {
                let grow = &g[bi * m..(bi + 1) * m];
                for (j, &gj) in grow.iter().enumerate() {
                    db[j] += gj;
                }
                let xrow = &xv[bi * n..(bi + 1) * n];
                for i in 0..n {
                    let wrow = &wv[i * m..(i + 1) * m];
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += grow[j] * wrow[j];
                    }
                    dx[bi * n + i] = acc;
                    let xi = xrow[i];
                    let dwrow = &mut dw[i * m..(i + 1) * m];
                    for j in 0..m {
                        dwrow[j] += xi * grow[j];
                    }
                }
            }
            accumulate(grads, *x, &dx);
            accumulate(grads, *w, &dw);
            accumulate(grads, *b, &db);
        }
        Op::Conv1d { x, w, b } => {
            let (tx, tw) = (&values[*x], &values[*w]);
            let (bs, h, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (cout, _, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
            let pad = (k - 1) / 2;
            let xv = tx.values();
            let wv = tw.values();
            let mut dx = vec![0.0; bs * h * cin];
            let mut dw = vec![0.0; cout * cin * k];
            let mut db = vec![0.0; cout];
            for bi in 0..bs {
                for t in 0..h {
                    let grow = &g[(bi * h + t) * cout..(bi * h + t + 1) * cout];
                    for (co, &gc) in grow.iter().enumerate() {
                        db[co] += gc;
                    }
                    for j in 0..k {
                        let ti = t as isize + j as isize - pad as isize;
                        if ti < 0 || ti >= h as isize {
                            continue;
                        }
                        let xoff = (bi * h + ti as usize) * cin;
                        for (co, &gc) in grow.iter().enumerate() {
                            for ci in 0..cin {
                                dx[xoff + ci] += gc * wv[(co * cin + ci) * k + j];
                                dw[(co * cin + ci) * k + j] += gc * xv[xoff + ci];
                            }
                        }
                    }
                }
            }
            accumulate(grads, *x, &dx);
            accumulate(grads, *w, &dw);
            accumulate(grads, *b, &db);
        }
        Op::Relu(x) => {
            let xin = values[*x].values();
            let dx: Vec<f64> = g
                .iter()
                .zip(xin)
                .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                .collect();
            accumulate(grads, *x, &dx);
        }
        Op::Tanh(x) => {
            let y = values[id].values();
            let dx: Vec<f64> = g.iter().zip(y).map(|(&gi, &yi)| gi * (1.0 - yi * yi)).collect();
            accumulate(grads, *x, &dx);
        }
        Op::Softplus(x) => {
            let xin = values[*x].values();
            let dx: Vec<f64> = g.iter().zip(xin).map(|(&gi, &xi)| gi * sigmoid(xi)).collect();
            accumulate(grads, *x, &dx);
        }
        Op::Sigmoid(x) => {
            let y = values[id].values();
            let dx: Vec<f64> = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (1.0 - yi)).collect();
            accumulate(grads, *x, &dx);
        }
        Op::LogSigmoid(x) => {
            let xin = values[*x].values();
            let dx: Vec<f64> = g.iter().zip(xin).map(|(&gi, &xi)| gi * sigmoid(-xi)).collect();
            accumulate(grads, *x, &dx);
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g);
            accumulate(grads, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g);
            let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
            accumulate(grads, *b, &neg);
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (values[*a].values(), values[*b].values());
            let da: Vec<f64> = g.iter().zip(tb).map(|(&gi, &bi)| gi * bi).collect();
            let db: Vec<f64> = g.iter().zip(ta).map(|(&gi, &ai)| gi * ai).collect();
            accumulate(grads, *a, &da);
            accumulate(grads, *b, &db);
        }
        Op::Scale(x, c) => {
            let dx: Vec<f64> = g.iter().map(|&v| v * c).collect();
            accumulate(grads, *x, &dx);
        }
        Op::AddConst(x, _) => accumulate(grads, *x, g),
        Op::Square(x) => {
            let xin = values[*x].values();
            let dx: Vec<f64> = g.iter().zip(xin).map(|(&gi, &xi)| gi * 2.0 * xi).collect();
            accumulate(grads, *x, &dx);
        }
        Op::Clamp(x, lo, hi) => {
            let xin = values[*x].values();
            let dx: Vec<f64> = g
                .iter()
                .zip(xin)
                .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { 0.0 })
                .collect();
            accumulate(grads, *x, &dx);
        }
        Op::Sum(x) => {
            let n = values[*x].len();
            accumulate(grads, *x, &vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = values[*x].len();
            accumulate(grads, *x, &vec![g[0] / n as f64; n]);
        }
        Op::Concat(a, b) => {
            let (ta, tb) = (&values[*a], &values[*b]);
            let (bs, na) = (ta.shape()[0], ta.shape()[1]);
            let nb = tb.shape()[1];
            let mut da = vec![0.0; bs * na];
            let mut db = vec![0.0; bs * nb];
            for bi in 0..bs {
                da[bi * na..(bi + 1) * na]
                    .copy_from_slice(&g[bi * (na + nb)..bi * (na + nb) + na]);
                db[bi * nb..(bi + 1) * nb]
                    .copy_from_slice(&g[bi * (na + nb) + na..(bi + 1) * (na + nb)]);
            }
            accumulate(grads, *a, &da);
            accumulate(grads, *b, &db);
        }
        Op::Flatten(x) | Op::Unflatten(x, _, _) | Op::Squeeze(x) => accumulate(grads, *x, g),
        Op::SliceCols(x, start, end) => {
            let t = &values[*x];
            let (bs, n) = (t.shape()[0], t.shape()[1]);
            let m = end - start;
            let mut dx = vec![0.0; bs * n];
            for bi in 0..bs {
                dx[bi * n + start..bi * n + end].copy_from_slice(&g[bi * m..(bi + 1) * m]);
            }
            accumulate(grads, *x, &dx);
        }
        Op::MeanTime(x) => {
            let t = &values[*x];
            let (bs, h, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut dx = vec![0.0; bs * h * c];
            for bi in 0..bs {
                for ti in 0..h {
                    for ci in 0..c {
                        dx[(bi * h + ti) * c + ci] = g[bi * c + ci] / h as f64;
                    }
                }
            }
            accumulate(grads, *x, &dx);
        }
        Op::AddTimeBias { x, bias } => {
            let t = &values[*x];
            let (bs, h, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            accumulate(grads, *x, g);
            let mut db = vec![0.0; bs * c];
            for bi in 0..bs {
                for ti in 0..h {
                    for ci in 0..c {
                        db[bi * c + ci] += g[(bi * h + ti) * c + ci];
                    }
                }
            }
            accumulate(grads, *bias, &db);
        }
        Op::SinusoidalEmbed { k, dim } => {
            let tk = &values[*k];
            let bs = tk.len();
            let half = dim / 2;
            let freqs = sin_embed_freqs(half);
            let mut dk = vec![0.0; bs];
            for bi in 0..bs {
                let kv = tk.values()[bi];
                let mut acc = 0.0;
                for (i, &f) in freqs.iter().enumerate() {
                    acc += g[bi * dim + i] * f * (kv * f).cos();
                    acc -= g[bi * dim + half + i] * f * (kv * f).sin();
                }
                dk[bi] = acc;
            }
            accumulate(grads, *k, &dk);
        }
        Op::GaussianLogProb { x, mean, log_std } => {
            let (tx, tm, tl) = (&values[*x], &values[*mean], &values[*log_std]);
            let (bs, d) = (tx.shape()[0], tx.shape()[1]);
            let shared = tl.rank() == 1;
            let mut dx = vec![0.0; bs * d];
            let mut dm = vec![0.0; bs * d];
            let mut dl = vec![0.0; tl.len()];
            for bi in 0..bs {
                let gb = g[bi];
                for di in 0..d {
                    let ls = if shared {
                        tl.values()[di]
                    } else {
                        tl.values()[bi * d + di]
                    };
                    let inv_sigma = (-ls).exp();
                    let z = (tx.values()[bi * d + di] - tm.values()[bi * d + di]) * inv_sigma;
                    dx[bi * d + di] = -z * inv_sigma * gb;
                    dm[bi * d + di] = z * inv_sigma * gb;
                    let dls = (z * z - 1.0) * gb;
                    if shared {
                        dl[di] += dls;
                    } else {
                        dl[bi * d + di] = dls;
                    }
                }
            }
            accumulate(grads, *x, &dx);
            accumulate(grads, *mean, &dm);
            accumulate(grads, *log_std, &dl);
        }
    }
    Ok(())
}
