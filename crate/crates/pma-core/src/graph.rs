//! Define-by-run reverse-mode differentiation. A `Graph` records every
//! executed operation; `backward` walks the record in exact reverse order and
//! accumulates gradients into the leased `Param` cells.
//!
//! Discrete choices (max-pool argmaxes, learned orderings) flow through a
//! decision tape. Recording a forward and replaying its decisions evaluates
//! the same piecewise-smooth branch, which is what finite differencing must
//! probe when hard argmax paths are treated as constants.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::scan::{self, Discretization};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemFn {
    Exp,
    Sigmoid,
    Silu,
    Softplus,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl ElemFn {
    fn apply(self, x: f64) -> f64 {
        match self {
            ElemFn::Exp => x.exp(),
            ElemFn::Sigmoid => sigmoid(x),
            ElemFn::Silu => x * sigmoid(x),
            ElemFn::Softplus => softplus(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            ElemFn::Exp => x.exp(),
            ElemFn::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ElemFn::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            ElemFn::Softplus => sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Indices(Vec<usize>),
    Order(Vec<usize>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecisionLog {
    items: Vec<Decision>,
}

impl DecisionLog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn orders(&self) -> Vec<&[usize]> {
        self.items
            .iter()
            .filter_map(|d| match d {
                Decision::Order(o) => Some(o.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// Build a replayable log directly; used by degeneracy tests that force
    /// specific orderings through the learned path.
    pub fn from_items(items: Vec<Decision>) -> DecisionLog {
        DecisionLog { items }
    }
}

#[derive(Debug)]
enum TapeMode {
    /// Compute decisions fresh and forget them.
    Passive,
    Record,
    Replay { cursor: usize },
}

#[derive(Debug)]
struct ScanRecord {
    x: NodeId,
    delta: NodeId,
    b: NodeId,
    c: NodeId,
    a: NodeId,
    d: NodeId,
    prompt: Option<NodeId>,
    scheme: Discretization,
    /// Discretized coefficients, T×S each.
    a_bar: Vec<f64>,
    b_bar: Vec<f64>,
    /// Hidden states, channel-major: h[((e·T)+t)·S + s].
    h: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    ParamLeaf {
        param: Param,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Unary {
        f: ElemFn,
        x: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
    },
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    NeighborMaxPool {
        x: NodeId,
        /// Chosen source row per output element, row-major m×d.
        argmax: Vec<usize>,
    },
    GatherRows {
        x: NodeId,
        perm: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    MeanRows {
        x: NodeId,
    },
    MaxRows {
        x: NodeId,
        argmax: Vec<usize>,
    },
    SumAll {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    CausalConv {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
    },
    Scan(Box<ScanRecord>),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::ParamLeaf { .. } => vec![],
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Unary { x, .. }
            | Op::SoftmaxRows { x }
            | Op::NeighborMaxPool { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::MeanRows { x }
            | Op::MaxRows { x, .. }
            | Op::SumAll { x } => vec![*x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::LayerNormRows { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::CausalConv { x, w, bias } => vec![*x, *w, *bias],
            Op::Scan(rec) => {
                let mut v = vec![rec.x, rec.delta, rec.b, rec.c, rec.a, rec.d];
                if let Some(p) = rec.prompt {
                    v.push(p);
                }
                v
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: TapeMode,
    log: DecisionLog,
    stopped_params: HashSet<u64>,
    param_nodes: HashMap<u64, NodeId>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::with_mode(TapeMode::Passive)
    }

    /// Forward pass that records every discrete decision for later replay.
    pub fn recording() -> Graph {
        Graph::with_mode(TapeMode::Record)
    }

    /// Forward pass that replays previously recorded discrete decisions.
    pub fn replaying(log: DecisionLog) -> Graph {
        let mut g = Graph::with_mode(TapeMode::Replay { cursor: 0 });
        g.log = log;
        g
    }

    fn with_mode(mode: TapeMode) -> Graph {
        Graph {
            nodes: Vec::new(),
            mode,
            log: DecisionLog::default(),
            stopped_params: HashSet::new(),
            param_nodes: HashMap::new(),
            consumed: false,
        }
    }

    pub fn decisions(&self) -> DecisionLog {
        self.log.clone()
    }

    /// Ids of parameters whose values fed a hard order decision; gradients do
    /// not flow through that path.
    pub fn stopped_param_ids(&self) -> &HashSet<u64> {
        &self.stopped_params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Row sums of every softmax node in execution order; lets tests check
    /// normalization of attention maps without exposing internals.
    pub fn softmax_row_sums(&self) -> Vec<f64> {
        let mut sums = Vec::new();
        for node in &self.nodes {
            if matches!(node.op, Op::SoftmaxRows { .. }) {
                let t = &node.value;
                for i in 0..t.rows() {
                    sums.push(t.row(i).iter().sum());
                }
            }
        }
        sums
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Lease a parameter's current value into the graph. Repeated leases of
    /// the same cell share one node so gradient accumulation stays single.
    pub fn param(&mut self, p: &Param) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&p.id()) {
            return id;
        }
        let id = self.push(p.value(), Op::ParamLeaf { param: p.clone() });
        self.param_nodes.insert(p.id(), id);
        id
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let t = &self.nodes[id].value;
        (t.rows(), t.cols())
    }

    // ── decision tape ────────────────────────────────────────────────────

    fn is_replaying(&self) -> bool {
        matches!(self.mode, TapeMode::Replay { .. })
    }

    fn take_replayed(&mut self) -> Result<Decision> {
        if let TapeMode::Replay { cursor } = &mut self.mode {
            match self.log.items.get(*cursor) {
                Some(d) => {
                    let d = d.clone();
                    *cursor += 1;
                    Ok(d)
                }
                None => Err(Error::DecisionReplay("decision log exhausted".into())),
            }
        } else {
            unreachable!("take_replayed outside replay mode")
        }
    }

    fn record_decision(&mut self, d: Decision) {
        if matches!(self.mode, TapeMode::Record) {
            self.log.items.push(d);
        }
    }

    /// Route a hard ordering decision through the tape. The parameters
    /// upstream of `src` are marked gradient-stopped: the ordering is treated
    /// as a constant of the program.
    pub fn decide_order<F>(&mut self, src: NodeId, compute: F) -> Result<Vec<usize>>
    where
        F: FnOnce(&Tensor) -> Result<Vec<usize>>,
    {
        for p in self.ancestor_params(src) {
            self.stopped_params.insert(p.id());
        }
        let order = if self.is_replaying() {
            match self.take_replayed()? {
                Decision::Order(v) => v,
                _ => {
                    return Err(Error::DecisionReplay(
                        "expected a recorded order decision".into(),
                    ))
                }
            }
        } else {
            compute(&self.nodes[src].value)?
        };
        self.record_decision(Decision::Order(order.clone()));
        Ok(order)
    }

    fn ancestor_params(&self, src: NodeId) -> Vec<Param> {
        let mut seen = vec![false; src + 1];
        let mut stack = vec![src];
        let mut out = Vec::new();
        seen[src] = true;
        while let Some(id) = stack.pop() {
            if let Op::ParamLeaf { param } = &self.nodes[id].op {
                out.push(param.clone());
            }
            for input in self.nodes[id].op.inputs() {
                if !seen[input] {
                    seen[input] = true;
                    stack.push(input);
                }
            }
        }
        out
    }

    // ── forward operations ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a].value.shape().to_vec(),
                rhs: self.nodes[b].value.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            &mut out,
            m,
            ka,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x);
        let src = self.nodes[x].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.nodes[a].value.same_shape(&self.nodes[b].value) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a].value.shape().to_vec(),
                rhs: self.nodes[b].value.shape().to_vec(),
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.nodes[a].value.same_shape(&self.nodes[b].value) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a].value.shape().to_vec(),
                rhs: self.nodes[b].value.shape().to_vec(),
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[x].value.data().iter().map(|v| v * factor).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { x, factor }))
    }

    /// Broadcast a width-n bias vector over every row of an m×n tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x);
        if self.nodes[bias].value.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x].value.shape().to_vec(),
                rhs: self.nodes[bias].value.shape().to_vec(),
            });
        }
        let bv = self.nodes[bias].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = self.nodes[x].value.row(i);
            for j in 0..n {
                out.push(row[j] + bv[j]);
            }
        }
        let shape = self.nodes[x].value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias { x, bias }))
    }

    pub fn elementwise(&mut self, f: ElemFn, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[x].value.data().iter().map(|&v| f.apply(v)).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Unary { f, x }))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.elementwise(ElemFn::Exp, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.elementwise(ElemFn::Sigmoid, x)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.elementwise(ElemFn::Silu, x)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.elementwise(ElemFn::Softplus, x)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = self.nodes[x].value.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / sum));
        }
        let shape = self.nodes[x].value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows { x }))
    }

    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (m, n) = self.dims2(x);
        if self.nodes[gamma].value.numel() != n || self.nodes[beta].value.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: self.nodes[x].value.shape().to_vec(),
                rhs: self.nodes[gamma].value.shape().to_vec(),
            });
        }
        let gv = self.nodes[gamma].value.data().to_vec();
        let bv = self.nodes[beta].value.data().to_vec();
        let mut out = Vec::with_capacity(m * n);
        let mut means = Vec::with_capacity(m);
        let mut inv_stds = Vec::with_capacity(m);
        for i in 0..m {
            let row = self.nodes[x].value.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv_std);
            for j in 0..n {
                out.push((row[j] - mean) * inv_std * gv[j] + bv[j]);
            }
        }
        let shape = self.nodes[x].value.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
        ))
    }

    /// out[i][c] = max over j ∈ neighbors[i] of x[j][c]; gradient routes to
    /// the argmax element, ties to the lowest row index.
    pub fn neighbor_max_pool(&mut self, x: NodeId, neighbors: &[Vec<usize>]) -> Result<NodeId> {
        let (m, d) = self.dims2(x);
        if neighbors.len() != m {
            return Err(Error::ShapeMismatch {
                op: "neighbor_max_pool",
                lhs: vec![neighbors.len()],
                rhs: vec![m],
            });
        }
        for list in neighbors {
            if list.is_empty() {
                return Err(Error::InvalidArgument {
                    op: "neighbor_max_pool",
                    reason: "empty neighbor list".into(),
                });
            }
            for &j in list {
                if j >= m {
                    return Err(Error::IndexOutOfRange {
                        op: "neighbor_max_pool",
                        index: j,
                        len: m,
                    });
                }
            }
        }
        let argmax = if self.is_replaying() {
            match self.take_replayed()? {
                Decision::Indices(v) => v,
                _ => {
                    return Err(Error::DecisionReplay(
                        "expected a recorded index decision".into(),
                    ))
                }
            }
        } else {
            let xv = &self.nodes[x].value;
            let mut arg = Vec::with_capacity(m * d);
            for list in neighbors {
                for c in 0..d {
                    let mut best_j = usize::MAX;
                    let mut best = f64::NEG_INFINITY;
                    for &j in list {
                        let v = xv.get2(j, c);
                        if v > best || (v == best && j < best_j) {
                            best = v;
                            best_j = j;
                        }
                    }
                    arg.push(best_j);
                }
            }
            arg
        };
        if argmax.len() != m * d || argmax.iter().any(|&j| j >= m) {
            return Err(Error::DecisionReplay(format!(
                "neighbor_max_pool argmax length {} does not match {}×{}",
                argmax.len(),
                m,
                d
            )));
        }
        self.record_decision(Decision::Indices(argmax.clone()));
        let xv = &self.nodes[x].value;
        let mut out = Vec::with_capacity(m * d);
        for i in 0..m {
            for c in 0..d {
                out.push(xv.get2(argmax[i * d + c], c));
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, d], out)?,
            Op::NeighborMaxPool { x, argmax },
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let (m, d) = self.dims2(x);
        validate_permutation(perm, m)?;
        let xv = &self.nodes[x].value;
        let mut out = Vec::with_capacity(m * d);
        for &src in perm {
            out.extend_from_slice(xv.row(src));
        }
        Ok(self.push(
            Tensor::new(vec![m, d], out)?,
            Op::GatherRows {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_rows",
                reason: "no parts".into(),
            });
        }
        let d = self.dims2(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (pm, pd) = self.dims2(p);
            if pd != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0]].value.shape().to_vec(),
                    rhs: self.nodes[p].value.shape().to_vec(),
                });
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.nodes[p].value.data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_cols",
                reason: "no parts".into(),
            });
        }
        let m = self.dims2(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (pm, pd) = self.dims2(p);
            if pm != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0]].value.shape().to_vec(),
                    rhs: self.nodes[p].value.shape().to_vec(),
                });
            }
            cols += pd;
        }
        let mut out = Vec::with_capacity(m * cols);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.nodes[p].value.row(i));
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, cols], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, d) = self.dims2(x);
        if start >= end || end > m {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                len: m,
            });
        }
        let out = self.nodes[x].value.data()[start * d..end * d].to_vec();
        Ok(self.push(
            Tensor::new(vec![end - start, d], out)?,
            Op::SliceRows { x, start },
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, d) = self.dims2(x);
        if start >= end || end > d {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                len: d,
            });
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&self.nodes[x].value.row(i)[start..end]);
        }
        Ok(self.push(
            Tensor::new(vec![m, end - start], out)?,
            Op::SliceCols { x, start },
        ))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, d) = self.dims2(x);
        let mut out = vec![0.0; d];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(self.nodes[x].value.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows { x }))
    }

    pub fn max_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, d) = self.dims2(x);
        let argmax = if self.is_replaying() {
            match self.take_replayed()? {
                Decision::Indices(v) => v,
                _ => {
                    return Err(Error::DecisionReplay(
                        "expected a recorded index decision".into(),
                    ))
                }
            }
        } else {
            let xv = &self.nodes[x].value;
            let mut arg = Vec::with_capacity(d);
            for c in 0..d {
                let mut best_i = 0;
                let mut best = f64::NEG_INFINITY;
                for i in 0..m {
                    let v = xv.get2(i, c);
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                arg.push(best_i);
            }
            arg
        };
        if argmax.len() != d || argmax.iter().any(|&i| i >= m) {
            return Err(Error::DecisionReplay(format!(
                "max_rows argmax length {} does not match width {}",
                argmax.len(),
                d
            )));
        }
        self.record_decision(Decision::Indices(argmax.clone()));
        let xv = &self.nodes[x].value;
        let out: Vec<f64> = (0..d).map(|c| xv.get2(argmax[c], c)).collect();
        Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MaxRows { x, argmax }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }))
    }

    /// Mean over the batch of −log softmax(logits)[label].
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, c) = self.dims2(logits);
        if labels.len() != b {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![labels.len()],
                rhs: vec![b],
            });
        }
        for &l in labels {
            if l >= c {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: l,
                    len: c,
                });
            }
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = self.nodes[logits].value.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            loss += sum.ln() + mx - row[label];
            probs.extend(exps.iter().map(|e| e / sum));
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: Tensor::new(vec![b, c], probs)?,
            },
        ))
    }

    /// Depthwise causal convolution over the time axis: with kernel width K,
    /// out[t][e] = bias[e] + Σ_j w[e][j] · x[t−K+1+j][e], zero left padding.
    pub fn causal_conv1d(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let (t_len, e_ch) = self.dims2(x);
        let (we, k) = self.dims2(w);
        if we != e_ch || self.nodes[bias].value.numel() != e_ch {
            return Err(Error::ShapeMismatch {
                op: "causal_conv1d",
                lhs: self.nodes[x].value.shape().to_vec(),
                rhs: self.nodes[w].value.shape().to_vec(),
            });
        }
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[w].value.data();
        let bv = self.nodes[bias].value.data();
        let mut out = vec![0.0; t_len * e_ch];
        for t in 0..t_len {
            for e in 0..e_ch {
                let mut acc = bv[e];
                for j in 0..k {
                    let u = t as isize - (k as isize - 1) + j as isize;
                    if u >= 0 {
                        acc += wv[e * k + j] * xv[u as usize * e_ch + e];
                    }
                }
                out[t * e_ch + e] = acc;
            }
        }
        Ok(self.push(
            Tensor::new(vec![t_len, e_ch], out)?,
            Op::CausalConv { x, w, bias },
        ))
    }

    /// Selective state-space scan. Shapes: x T×E, delta T×1 (positive), b and
    /// c T×S, a length S (negative), d length E, prompt T×S when present.
    /// Per channel e: h_t = ā_t ⊙ h_{t−1} + b̄_t·x_t[e],
    /// y_t[e] = ⟨c_t + p_t, h_t⟩ + d[e]·x_t[e].
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: NodeId,
        delta: NodeId,
        b: NodeId,
        c: NodeId,
        a: NodeId,
        d: NodeId,
        prompt: Option<NodeId>,
        scheme: Discretization,
    ) -> Result<NodeId> {
        let (t_len, e_ch) = self.dims2(x);
        let s_state = self.nodes[a].value.numel();
        let check = |id: NodeId, rows: usize, cols: usize, what: &'static str| -> Result<()> {
            let got = &self.nodes[id].value;
            if got.rows() != rows || got.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: what,
                    lhs: got.shape().to_vec(),
                    rhs: vec![rows, cols],
                });
            }
            Ok(())
        };
        check(delta, t_len, 1, "selective_scan delta")?;
        check(b, t_len, s_state, "selective_scan b")?;
        check(c, t_len, s_state, "selective_scan c")?;
        if let Some(p) = prompt {
            check(p, t_len, s_state, "selective_scan prompt")?;
        }
        if self.nodes[d].value.numel() != e_ch {
            return Err(Error::ShapeMismatch {
                op: "selective_scan d",
                lhs: self.nodes[d].value.shape().to_vec(),
                rhs: vec![e_ch],
            });
        }
        let dv = self.nodes[delta].value.data();
        if let Some(bad) = dv.iter().find(|v| **v <= 0.0) {
            return Err(Error::InvalidArgument {
                op: "selective_scan",
                reason: format!("delta must be positive, got {}", bad),
            });
        }

        let av = self.nodes[a].value.data();
        let bv = self.nodes[b].value.data();
        let mut a_bar = vec![0.0; t_len * s_state];
        let mut b_bar = vec![0.0; t_len * s_state];
        for t in 0..t_len {
            for s in 0..s_state {
                let (ab, bb) = scan::discretize_pair(av[s], dv[t], bv[t * s_state + s], scheme);
                a_bar[t * s_state + s] = ab;
                b_bar[t * s_state + s] = bb;
            }
        }

        // c + p fused once.
        let cv = self.nodes[c].value.data();
        let cp: Vec<f64> = match prompt {
            Some(p) => cv
                .iter()
                .zip(self.nodes[p].value.data())
                .map(|(cc, pp)| cc + pp)
                .collect(),
            None => cv.to_vec(),
        };

        let xv = self.nodes[x].value.data();
        let ddv = self.nodes[d].value.data();
        let mut h = vec![0.0; e_ch * t_len * s_state];
        let mut y = vec![0.0; t_len * e_ch];
        let mut state = vec![0.0; s_state];
        for e in 0..e_ch {
            state.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..t_len {
                let xt = xv[t * e_ch + e];
                let row = t * s_state;
                let mut dot = 0.0;
                for s in 0..s_state {
                    let hs = a_bar[row + s] * state[s] + b_bar[row + s] * xt;
                    state[s] = hs;
                    dot += cp[row + s] * hs;
                }
                h[(e * t_len + t) * s_state..(e * t_len + t + 1) * s_state]
                    .copy_from_slice(&state);
                y[t * e_ch + e] = dot + ddv[e] * xt;
            }
        }
        Ok(self.push(
            Tensor::new(vec![t_len, e_ch], y)?,
            Op::Scan(Box::new(ScanRecord {
                x,
                delta,
                b,
                c,
                a,
                d,
                prompt,
                scheme,
                a_bar,
                b_bar,
                h,
            })),
        ))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse traversal from `loss` (a scalar node). Gradients accumulate
    /// into the trainable `Param` cells leased by this graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::DoubleBackward);
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                reason: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss].value.shape()
                ),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(id, &gy, &mut grads);
        }
        Ok(())
    }

    fn add_grad(grads: &mut [Option<Vec<f64>>], id: NodeId, numel: usize) -> &mut Vec<f64> {
        grads[id].get_or_insert_with(|| vec![0.0; numel])
    }

    fn backprop_node(&self, id: NodeId, gy: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::ParamLeaf { param } => {
                param.accumulate_grad(gy);
            }
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let t = &self.nodes[*a].value;
                    (t.rows(), t.cols())
                };
                let n = self.nodes[*b].value.cols();
                {
                    let ga = Self::add_grad(grads, *a, m * k);
                    matmul_nt_acc(gy, self.nodes[*b].value.data(), ga, m, n, k);
                }
                {
                    let gb = Self::add_grad(grads, *b, k * n);
                    matmul_tn_acc(self.nodes[*a].value.data(), gy, gb, k, m, n);
                }
            }
            Op::Transpose { x } => {
                let (m, n) = {
                    let t = &self.nodes[*x].value;
                    (t.rows(), t.cols())
                };
                let gx = Self::add_grad(grads, *x, m * n);
                // gy has shape n×m.
                for j in 0..n {
                    for i in 0..m {
                        gx[i * n + j] += gy[j * m + i];
                    }
                }
            }
            Op::Add { a, b } => {
                let numel = node.value.numel();
                {
                    let ga = Self::add_grad(grads, *a, numel);
                    for (g, v) in ga.iter_mut().zip(gy) {
                        *g += v;
                    }
                }
                let gb = Self::add_grad(grads, *b, numel);
                for (g, v) in gb.iter_mut().zip(gy) {
                    *g += v;
                }
            }
            Op::Mul { a, b } => {
                let numel = node.value.numel();
                {
                    let bv = self.nodes[*b].value.data();
                    let ga = Self::add_grad(grads, *a, numel);
                    for i in 0..numel {
                        ga[i] += gy[i] * bv[i];
                    }
                }
                let av = self.nodes[*a].value.data();
                let gb = Self::add_grad(grads, *b, numel);
                for i in 0..numel {
                    gb[i] += gy[i] * av[i];
                }
            }
            Op::Scale { x, factor } => {
                let gx = Self::add_grad(grads, *x, node.value.numel());
                for (g, v) in gx.iter_mut().zip(gy) {
                    *g += factor * v;
                }
            }
            Op::AddBias { x, bias } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                {
                    let gx = Self::add_grad(grads, *x, m * n);
                    for (g, v) in gx.iter_mut().zip(gy) {
                        *g += v;
                    }
                }
                let gb = Self::add_grad(grads, *bias, n);
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += gy[i * n + j];
                    }
                }
            }
            Op::Unary { f, x } => {
                let xv = self.nodes[*x].value.data();
                let gx = Self::add_grad(grads, *x, xv.len());
                for i in 0..xv.len() {
                    gx[i] += gy[i] * f.derivative(xv[i]);
                }
            }
            Op::SoftmaxRows { x } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let yv = node.value.data();
                let gx = Self::add_grad(grads, *x, m * n);
                for i in 0..m {
                    let yrow = &yv[i * n..(i + 1) * n];
                    let grow = &gy[i * n..(i + 1) * n];
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        gx[i * n + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                ..
            } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let xv = self.nodes[*x].value.data();
                let gv = self.nodes[*gamma].value.data();
                {
                    let gx = Self::add_grad(grads, *x, m * n);
                    for i in 0..m {
                        let istd = inv_std[i];
                        let mu = mean[i];
                        // dxhat = gy ⊙ gamma; project out mean and scale dirs.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (xv[i * n + j] - mu) * istd;
                            let dxhat = gy[i * n + j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let xhat = (xv[i * n + j] - mu) * istd;
                            let dxhat = gy[i * n + j] * gv[j];
                            gx[i * n + j] += istd
                                * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                    }
                }
                {
                    let gg = Self::add_grad(grads, *gamma, n);
                    for i in 0..m {
                        let istd = inv_std[i];
                        let mu = mean[i];
                        for j in 0..n {
                            let xhat = (xv[i * n + j] - mu) * istd;
                            gg[j] += gy[i * n + j] * xhat;
                        }
                    }
                }
                let gb = Self::add_grad(grads, *beta, n);
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += gy[i * n + j];
                    }
                }
            }
            Op::NeighborMaxPool { x, argmax } => {
                let (m, d) = (node.value.rows(), node.value.cols());
                let gx = Self::add_grad(grads, *x, self.nodes[*x].value.numel());
                for i in 0..m {
                    for c in 0..d {
                        gx[argmax[i * d + c] * d + c] += gy[i * d + c];
                    }
                }
            }
            Op::GatherRows { x, perm } => {
                let d = node.value.cols();
                let gx = Self::add_grad(grads, *x, self.nodes[*x].value.numel());
                for (i, &src) in perm.iter().enumerate() {
                    for c in 0..d {
                        gx[src * d + c] += gy[i * d + c];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let d = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pm = self.nodes[p].value.rows();
                    let gp = Self::add_grad(grads, p, pm * d);
                    for (g, v) in gp.iter_mut().zip(&gy[offset..offset + pm * d]) {
                        *g += v;
                    }
                    offset += pm * d;
                }
            }
            Op::ConcatCols { parts } => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pd = self.nodes[p].value.cols();
                    let gp = Self::add_grad(grads, p, m * pd);
                    for i in 0..m {
                        for j in 0..pd {
                            gp[i * pd + j] += gy[i * total + offset + j];
                        }
                    }
                    offset += pd;
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gx = Self::add_grad(grads, *x, self.nodes[*x].value.numel());
                for (g, v) in gx[start * d..(start + rows) * d].iter_mut().zip(gy) {
                    *g += v;
                }
            }
            Op::SliceCols { x, start } => {
                let rows = node.value.rows();
                let width = node.value.cols();
                let full = self.nodes[*x].value.cols();
                let gx = Self::add_grad(grads, *x, self.nodes[*x].value.numel());
                for i in 0..rows {
                    for j in 0..width {
                        gx[i * full + start + j] += gy[i * width + j];
                    }
                }
            }
            Op::MeanRows { x } => {
                let m = self.nodes[*x].value.rows();
                let d = node.value.cols();
                let inv = 1.0 / m as f64;
                let gx = Self::add_grad(grads, *x, m * d);
                for i in 0..m {
                    for j in 0..d {
                        gx[i * d + j] += gy[j] * inv;
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let d = node.value.cols();
                let gx = Self::add_grad(grads, *x, self.nodes[*x].value.numel());
                for (c, &i) in argmax.iter().enumerate() {
                    gx[i * d + c] += gy[c];
                }
            }
            Op::SumAll { x } => {
                let gx = Self::add_grad(grads, *x, self.nodes[*x].value.numel());
                for g in gx.iter_mut() {
                    *g += gy[0];
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (bsz, c) = (probs.rows(), probs.cols());
                let scale = gy[0] / bsz as f64;
                let gx = Self::add_grad(grads, *logits, bsz * c);
                for i in 0..bsz {
                    for j in 0..c {
                        let indicator = if labels[i] == j { 1.0 } else { 0.0 };
                        gx[i * c + j] += scale * (probs.get2(i, j) - indicator);
                    }
                }
            }
            Op::CausalConv { x, w, bias } => {
                let (t_len, e_ch) = (node.value.rows(), node.value.cols());
                let k = self.nodes[*w].value.cols();
                let xv = self.nodes[*x].value.data();
                let wv = self.nodes[*w].value.data();
                {
                    let gx = Self::add_grad(grads, *x, t_len * e_ch);
                    for t in 0..t_len {
                        for e in 0..e_ch {
                            let g = gy[t * e_ch + e];
                            if g == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                let u = t as isize - (k as isize - 1) + j as isize;
                                if u >= 0 {
                                    gx[u as usize * e_ch + e] += g * wv[e * k + j];
                                }
                            }
                        }
                    }
                }
                {
                    let gw = Self::add_grad(grads, *w, e_ch * k);
                    for t in 0..t_len {
                        for e in 0..e_ch {
                            let g = gy[t * e_ch + e];
                            if g == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                let u = t as isize - (k as isize - 1) + j as isize;
                                if u >= 0 {
                                    gw[e * k + j] += g * xv[u as usize * e_ch + e];
                                }
                            }
                        }
                    }
                }
                let gb = Self::add_grad(grads, *bias, e_ch);
                for t in 0..t_len {
                    for e in 0..e_ch {
                        gb[e] += gy[t * e_ch + e];
                    }
                }
            }
            Op::Scan(rec) => self.backprop_scan(rec, gy, grads),
        }
    }

    fn backprop_scan(&self, rec: &ScanRecord, gy: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let t_len = self.nodes[rec.x].value.rows();
        let e_ch = self.nodes[rec.x].value.cols();
        let s_state = self.nodes[rec.a].value.numel();
        let xv = self.nodes[rec.x].value.data();
        let cv = self.nodes[rec.c].value.data();
        let dv = self.nodes[rec.delta].value.data();
        let av = self.nodes[rec.a].value.data();
        let bv = self.nodes[rec.b].value.data();
        let ddv = self.nodes[rec.d].value.data();
        let cp: Vec<f64> = match rec.prompt {
            Some(p) => cv
                .iter()
                .zip(self.nodes[p].value.data())
                .map(|(cc, pp)| cc + pp)
                .collect(),
            None => cv.to_vec(),
        };

        let mut gx = vec![0.0; t_len * e_ch];
        let mut gcp = vec![0.0; t_len * s_state];
        let mut ga_bar = vec![0.0; t_len * s_state];
        let mut gb_bar = vec![0.0; t_len * s_state];
        let mut gd = vec![0.0; e_ch];
        let mut dh = vec![0.0; s_state];

        for e in 0..e_ch {
            dh.iter_mut().for_each(|v| *v = 0.0);
            let hbase = e * t_len * s_state;
            for t in (0..t_len).rev() {
                let g = gy[t * e_ch + e];
                let xt = xv[t * e_ch + e];
                let row = t * s_state;
                gd[e] += g * xt;
                let mut gx_te = ddv[e] * g;
                let h_t = &rec.h[hbase + row..hbase + row + s_state];
                for s in 0..s_state {
                    // y_t[e] contribution into h_t and (c+p)_t.
                    dh[s] += g * cp[row + s];
                    gcp[row + s] += g * h_t[s];
                }
                for s in 0..s_state {
                    let h_prev = if t == 0 {
                        0.0
                    } else {
                        rec.h[hbase + row - s_state + s]
                    };
                    let dhs = dh[s];
                    ga_bar[row + s] += dhs * h_prev;
                    gb_bar[row + s] += dhs * xt;
                    gx_te += dhs * rec.b_bar[row + s];
                    dh[s] = rec.a_bar[row + s] * dhs;
                }
                gx[t * e_ch + e] += gx_te;
            }
        }

        // Chain a_bar/b_bar back to a, delta, b.
        let mut ga = vec![0.0; s_state];
        let mut gdelta = vec![0.0; t_len];
        let mut gb = vec![0.0; t_len * s_state];
        for t in 0..t_len {
            let row = t * s_state;
            for s in 0..s_state {
                let a_bar = rec.a_bar[row + s];
                let (phi, dphi_da) = scan::phi_and_da(av[s], dv[t], rec.scheme);
                ga[s] += ga_bar[row + s] * dv[t] * a_bar;
                gdelta[t] += ga_bar[row + s] * av[s] * a_bar;
                gb[row + s] += gb_bar[row + s] * phi;
                let dphi_ddelta = match rec.scheme {
                    Discretization::ZohExact => a_bar,
                    Discretization::Euler => 1.0,
                };
                gdelta[t] += gb_bar[row + s] * bv[row + s] * dphi_ddelta;
                ga[s] += gb_bar[row + s] * bv[row + s] * dphi_da;
            }
        }

        {
            let acc = Self::add_grad(grads, rec.x, t_len * e_ch);
            for (g, v) in acc.iter_mut().zip(&gx) {
                *g += v;
            }
        }
        {
            let acc = Self::add_grad(grads, rec.delta, t_len);
            for (g, v) in acc.iter_mut().zip(&gdelta) {
                *g += v;
            }
        }
        {
            let acc = Self::add_grad(grads, rec.b, t_len * s_state);
            for (g, v) in acc.iter_mut().zip(&gb) {
                *g += v;
            }
        }
        {
            let acc = Self::add_grad(grads, rec.c, t_len * s_state);
            for (g, v) in acc.iter_mut().zip(&gcp) {
                *g += v;
            }
        }
        if let Some(p) = rec.prompt {
            let acc = Self::add_grad(grads, p, t_len * s_state);
            for (g, v) in acc.iter_mut().zip(&gcp) {
                *g += v;
            }
        }
        {
            let acc = Self::add_grad(grads, rec.a, s_state);
            for (g, v) in acc.iter_mut().zip(&ga) {
                *g += v;
            }
        }
        let acc = Self::add_grad(grads, rec.d, e_ch);
        for (g, v) in acc.iter_mut().zip(&gd) {
            *g += v;
        }
    }
}

pub(crate) fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "length {} does not match {}",
            perm.len(),
            n
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n {
            return Err(Error::InvalidPermutation(format!(
                "index {} out of range for {}",
                p, n
            )));
        }
        if seen[p] {
            return Err(Error::InvalidPermutation(format!("duplicate index {}", p)));
        }
        seen[p] = true;
    }
    Ok(())
}
