//! Reverse-mode tape over a closed set of tensor operations.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients into the trainable parameters of a
//! [`ParameterStore`]. Frozen parameters enter the graph as constants, so no
//! gradient is ever computed for them.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dense::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use super::params::ParameterStore;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Fixed sparse operator: `out[dst] += weight * x[src]` for each entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, dst: usize, src: usize, weight: f64) {
        self.entries.push((dst, src, weight));
    }
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Rc<[usize]>),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Dropout(NodeId, Vec<f64>),
    CrossEntropy {
        logits: NodeId,
        targets: Rc<[usize]>,
        ignore_id: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(NodeId),
    Spmm(NodeId, Rc<SparseMatrix>),
    SegmentMax(NodeId, Vec<Option<usize>>),
    SegmentSoftmax(NodeId, Rc<[usize]>),
    EdgeWeightedSum {
        x: NodeId,
        alpha: NodeId,
        src: Rc<[usize]>,
        dst: Rc<[usize]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::gradients`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
    grad_enabled: bool,
    params: HashMap<String, NodeId>,
    param_leaves: Vec<(NodeId, usize)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
            grad_enabled: true,
            params: HashMap::new(),
            param_leaves: Vec::new(),
        }
    }

    /// A graph that never tracks gradients; every leaf is a constant.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Fail any operation whose output contains NaN or infinity.
    pub fn checked(mut self) -> Self {
        self.checked = true;
        self
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf holding `value`. Gradients are tracked when `requires_grad`
    /// is set and the graph is not in inference mode.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Bind a named parameter. Repeated requests for the same name return
    /// the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let index = store
            .index_of(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let p = store.get_index(index);
        let id = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(name.to_string(), id);
        if self.nodes[id.0].requires_grad {
            self.param_leaves.push((id, index));
        }
        Ok(id)
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Shape {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 || self.shape(b).len() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if self.value(bias).len() != n {
            return Err(self.shape_err("add_bias", a, bias));
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for r in 0..m {
            for (x, y) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *x += y;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add_bias", t, Op::AddBias(a, bias), &[a, bias])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("scale", t, Op::Scale(a, factor), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape {
                op: "concat_cols",
                left: vec![],
                right: vec![],
            });
        };
        let m = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != m || self.shape(p).len() != 2 {
                return Err(self.shape_err("concat_cols", first, p));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(m, total, data)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if start + len > n {
            return Err(Error::OutOfRange {
                what: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&self.value(a).row(r)[start..start + len]);
        }
        let t = Tensor::matrix(m, len, data)?;
        self.push("slice_cols", t, Op::SliceCols(a, start), &[a])
    }

    /// Row gather; used for embedding lookup and for picking edge endpoints.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(table).dims2();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            if i >= m {
                return Err(Error::OutOfRange {
                    what: "gather_rows",
                    index: i,
                    size: m,
                });
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        let t = Tensor::matrix(ids.len(), n, data)?;
        self.push("gather_rows", t, Op::GatherRows(table, ids.into()), &[table])
    }

    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.gather_rows(table, ids)
    }

    /// Softmax over the last dimension. Entries where `mask` is true are
    /// excluded and receive exactly zero weight. A fully masked row is an
    /// error.
    pub fn softmax_last_dim(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::Shape {
                    op: "softmax_last_dim",
                    left: self.shape(a).to_vec(),
                    right: vec![mask.len()],
                });
            }
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let masked = |c: usize| mask.is_some_and(|mk| mk[r * n + c]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..n {
                if !masked(c) {
                    max = max.max(x[r * n + c]);
                }
            }
            if (0..n).all(masked) {
                return Err(Error::NonFinite("softmax_last_dim (fully masked row)"));
            }
            let mut sum = 0.0;
            for c in 0..n {
                if !masked(c) {
                    let e = (x[r * n + c] - max).exp();
                    out[r * n + c] = e;
                    sum += e;
                }
            }
            for v in &mut out[r * n..(r + 1) * n] {
                *v /= sum;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("softmax_last_dim", t, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2();
        if self.value(gamma).len() != n {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        if self.value(beta).len() != n {
            return Err(self.shape_err("layer_norm", x, beta));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("leaky_relu", t, Op::LeakyRelu(a, slope), &[a])
    }

    /// Inverted dropout with a mask drawn from `seed`. A rate of zero
    /// returns `a` itself.
    pub fn dropout(&mut self, a: NodeId, rate: f64, seed: u64) -> Result<NodeId> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, k)| x * k)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("dropout", t, Op::Dropout(a, mask), &[a])
    }

    /// Mean cross-entropy of `logits` rows against `targets`, skipping rows
    /// whose target equals `ignore_id`. With every row ignored the loss is 0.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], ignore_id: usize) -> Result<NodeId> {
        let (m, n) = self.value(logits).dims2();
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..n {
                probs[r * n + c] = (row[c] - lse).exp();
            }
            let t = targets[r];
            if t == ignore_id {
                continue;
            }
            if t >= n {
                return Err(Error::OutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    size: n,
                });
            }
            total += lse - row[t];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                ignore_id,
                probs,
                count,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Sparse-dense product: `out[dst] += w · x[src]` over the matrix entries.
    pub fn spmm(&mut self, x: NodeId, adj: Rc<SparseMatrix>) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2();
        if adj.cols != m {
            return Err(Error::Shape {
                op: "spmm",
                left: vec![adj.rows, adj.cols],
                right: self.shape(x).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; adj.rows * n];
        for &(dst, src, w) in &adj.entries {
            let s = &xv[src * n..(src + 1) * n];
            for (o, v) in out[dst * n..(dst + 1) * n].iter_mut().zip(s) {
                *o += w * v;
            }
        }
        let t = Tensor::matrix(adj.rows, n, out)?;
        self.push("spmm", t, Op::Spmm(x, adj), &[x])
    }

    /// Per-column max over the sources listed for each destination row.
    /// Rows with no entries are zero.
    pub fn segment_max(&mut self, x: NodeId, adj: &SparseMatrix) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2();
        if adj.cols != m {
            return Err(Error::Shape {
                op: "segment_max",
                left: vec![adj.rows, adj.cols],
                right: self.shape(x).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let mut arg: Vec<Option<usize>> = vec![None; adj.rows * n];
        for &(dst, src, _) in &adj.entries {
            for c in 0..n {
                let slot = &mut arg[dst * n + c];
                match *slot {
                    Some(best) if xv[best * n + c] >= xv[src * n + c] => {}
                    _ => *slot = Some(src),
                }
            }
        }
        let out = arg
            .iter()
            .enumerate()
            .map(|(i, a)| a.map_or(0.0, |s| xv[s * n + i % n]))
            .collect();
        let t = Tensor::matrix(adj.rows, n, out)?;
        self.push("segment_max", t, Op::SegmentMax(x, arg), &[x])
    }

    /// Softmax over groups of rows sharing a segment id, independently per
    /// column. `x` is `E × H`, `segments[e]` names the group of row `e`.
    pub fn segment_softmax(&mut self, x: NodeId, segments: &[usize]) -> Result<NodeId> {
        let (e, h) = self.value(x).dims2();
        if segments.len() != e {
            return Err(Error::Shape {
                op: "segment_softmax",
                left: self.shape(x).to_vec(),
                right: vec![segments.len()],
            });
        }
        let groups = segments.iter().copied().max().map_or(0, |m| m + 1);
        let xv = self.value(x).data();
        let mut max = vec![f64::NEG_INFINITY; groups * h];
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..h {
                max[s * h + c] = max[s * h + c].max(xv[r * h + c]);
            }
        }
        let mut out = vec![0.0; e * h];
        let mut sum = vec![0.0; groups * h];
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..h {
                let v = (xv[r * h + c] - max[s * h + c]).exp();
                out[r * h + c] = v;
                sum[s * h + c] += v;
            }
        }
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..h {
                out[r * h + c] /= sum[s * h + c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("segment_softmax", t, Op::SegmentSoftmax(x, segments.into()), &[x])
    }

    /// `out[dst[e]] += alpha[e] · x[src[e]]` with a learned per-edge weight.
    pub fn edge_weighted_sum(
        &mut self,
        x: NodeId,
        alpha: NodeId,
        src: &[usize],
        dst: &[usize],
        num_out: usize,
    ) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2();
        if self.value(alpha).len() != src.len() || src.len() != dst.len() {
            return Err(self.shape_err("edge_weighted_sum", x, alpha));
        }
        let xv = self.value(x).data();
        let av = self.value(alpha).data();
        let mut out = vec![0.0; num_out * n];
        for (e, (&s, &d)) in src.iter().zip(dst).enumerate() {
            if s >= m || d >= num_out {
                return Err(Error::OutOfRange {
                    what: "edge_weighted_sum",
                    index: s.max(d),
                    size: m.min(num_out),
                });
            }
            let w = av[e];
            for c in 0..n {
                out[d * n + c] += w * xv[s * n + c];
            }
        }
        let t = Tensor::matrix(num_out, n, out)?;
        self.push(
            "edge_weighted_sum",
            t,
            Op::EdgeWeightedSum {
                x,
                alpha,
                src: src.into(),
                dst: dst.into(),
            },
            &[x, alpha],
        )
    }

    /// Gradients of scalar `loss` with respect to every node that tracks
    /// gradients.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backpropagate `loss` and add the resulting gradients to the trainable
    /// parameters bound on this graph. Repeated calls accumulate.
    pub fn backward(&self, loss: NodeId, store: &mut ParameterStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for &(node, index) in &self.param_leaves {
            if let Some(g) = grads.get(node) {
                store.accumulate_grad(index, g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |id: NodeId, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|da| gemm_nt(g, bv, da, m, n, k));
                acc(*b, &|db| gemm_tn(av, g, db, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).rows();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|da| gemm_nn(g, bv, da, m, n, k));
                acc(*b, &|db| gemm_tn(g, av, db, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &|da| add_into(da, g));
                acc(*b, &|db| add_into(db, g));
            }
            Op::AddBias(a, b) => {
                let n = self.value(*b).len();
                acc(*a, &|da| add_into(da, g));
                acc(*b, &|db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|da| {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                acc(*b, &|db| {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &|da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi * f;
                }
            }),
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &|dp| {
                        for r in 0..m {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2();
                let w = node.value.cols();
                acc(*a, &|da| {
                    for r in 0..m {
                        add_into(&mut da[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::GatherRows(a, ids) => {
                let n = self.value(*a).cols();
                acc(*a, &|da| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut da[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(*a, &|da| {
                    for r in 0..y.len() / n {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            da[r * n + c] += ys[c] * (gs[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                let m = xhat.len() / n;
                let gv = self.value(*gamma).data();
                acc(*gamma, &|dg| {
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                acc(*beta, &|db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
                acc(*x, &|dx| {
                    for r in 0..m {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            sum_d += d;
                            sum_dx += d * xhat[r * n + c];
                        }
                        let k = inv_std[r] / n as f64;
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            dx[r * n + c] += k * (n as f64 * d - sum_d - xhat[r * n + c] * sum_dx);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &|da| {
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let xv = self.value(*a).data();
                acc(*a, &|da| {
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(xv) {
                        *d += if *x > 0.0 { *gi } else { slope * gi };
                    }
                });
            }
            Op::Dropout(a, mask) => acc(*a, &|da| {
                for ((d, gi), k) in da.iter_mut().zip(g).zip(mask) {
                    *d += gi * k;
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                ignore_id,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let n = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &|dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_id {
                            continue;
                        }
                        for c in 0..n {
                            let p = probs[r * n + c] - if c == t { 1.0 } else { 0.0 };
                            dl[r * n + c] += scale * p;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Spmm(x, adj) => {
                let n = self.value(*x).cols();
                acc(*x, &|dx| {
                    for &(dst, src, w) in &adj.entries {
                        for c in 0..n {
                            dx[src * n + c] += w * g[dst * n + c];
                        }
                    }
                });
            }
            Op::SegmentMax(x, arg) => {
                let n = self.value(*x).cols();
                acc(*x, &|dx| {
                    for (i, a) in arg.iter().enumerate() {
                        if let Some(src) = a {
                            dx[src * n + i % n] += g[i];
                        }
                    }
                });
            }
            Op::SegmentSoftmax(x, segments) => {
                let h = node.value.cols();
                let y = node.value.data();
                let groups = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; groups * h];
                for (r, &s) in segments.iter().enumerate() {
                    for c in 0..h {
                        dot[s * h + c] += y[r * h + c] * g[r * h + c];
                    }
                }
                acc(*x, &|dx| {
                    for (r, &s) in segments.iter().enumerate() {
                        for c in 0..h {
                            dx[r * h + c] += y[r * h + c] * (g[r * h + c] - dot[s * h + c]);
                        }
                    }
                });
            }
            Op::EdgeWeightedSum { x, alpha, src, dst } => {
                let n = self.value(*x).cols();
                let xv = self.value(*x).data();
                let av = self.value(*alpha).data();
                acc(*x, &|dx| {
                    for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                        for c in 0..n {
                            dx[s * n + c] += av[e] * g[d * n + c];
                        }
                    }
                });
                acc(*alpha, &|da| {
                    for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                        let mut dot = 0.0;
                        for c in 0..n {
                            dot += g[d * n + c] * xv[s * n + c];
                        }
                        da[e] += dot;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
