//! Recording graph (a Wengert tape) and reverse-mode traversal.
//!
//! Nodes are appended in evaluation order, so the node index order is a
//! topological order and `backward` is a single reverse sweep. Every op is
//! 2-D in spirit: leading axes are folded into rows, the trailing axis is the
//! feature axis.

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, gemm};
use crate::tensor::Tensor;

/// Value substituted for masked attention scores. Finite so that every
/// tensor in the graph stays finite; `exp` of it underflows to exactly 0.
pub const MASK_VALUE: f64 = -1e30;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kind recorded for each node.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul { a: usize, b: usize, n: usize, k: usize, p: usize },
    Transpose(usize),
    Sigmoid(usize),
    Silu(usize),
    Gelu(usize),
    Relu(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    CausalMask(usize),
    Sum(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Sigmoid(_) => "sigmoid",
            Op::Silu(_) => "silu",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layernorm",
            Op::Embedding { .. } => "embedding_lookup",
            Op::ConcatRows(_) => "concat_seq",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::CausalMask(_) => "causal_mask",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy_next_token",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Summary of one recorded node, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub op: &'static str,
    pub output: usize,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRecord {
                op: n.op.name(),
                output: i,
                shape: n.value.shape().to_vec(),
                requires_grad: n.requires_grad,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let out = map(va, |x| x * s);
        let rg = self.rg(a.0);
        self.push(out, Op::Scale(a.0, s), rg)
    }

    /// `a[.., n, k] · b[k, p] -> [.., n, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().is_empty() || vb.shape().len() != 2 || va.cols() != vb.shape()[0] {
            return Err(shape_err("matmul", va, vb));
        }
        let (n, k, p) = (va.rows(), va.cols(), vb.shape()[1]);
        let mut data = vec![0.0; n * p];
        gemm(n, k, p, va.data(), false, vb.data(), false, &mut data, 0.0);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = p;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::MatMul { a: a.0, b: b.0, n, k, p }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(AutodiffError::Contract(format!(
                "transpose expects a 2-D tensor, got {:?}",
                va.shape()
            )));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let src = va.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(a.0);
        Ok(self.push(out, Op::Transpose(a.0), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), kernels::sigmoid);
        let rg = self.rg(a.0);
        self.push(out, Op::Sigmoid(a.0), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x * kernels::sigmoid(x));
        let rg = self.rg(a.0);
        self.push(out, Op::Silu(a.0), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), kernels::gelu);
        let rg = self.rg(a.0);
        self.push(out, Op::Gelu(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        let rg = self.rg(a.0);
        self.push(out, Op::Relu(a.0), rg)
    }

    /// Softmax over the trailing axis, stabilized by max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        if c == 0 {
            return Err(AutodiffError::Contract("softmax over an empty axis".into()));
        }
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(a.0);
        Ok(self.push(out, Op::Softmax(a.0), rg))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if vg.numel() != d || vb.numel() != d {
            return Err(shape_err("layernorm", vx, vg));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            out,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd },
            rg,
        ))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(AutodiffError::Contract(format!(
                "embedding table must be 2-D, got {:?}",
                vt.shape()
            )));
        }
        let (vocab, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(AutodiffError::Vocabulary { id, vocab });
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table.0);
        Ok(self.push(out, Op::Embedding { table: table.0, ids: ids.to_vec() }, rg))
    }

    /// Concatenates along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(AutodiffError::Contract("concat of zero tensors".into()));
        };
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != d {
                return Err(shape_err("concat_seq", self.value(*first), vp));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if start + len > vx.rows() {
            return Err(AutodiffError::Contract(format!(
                "row slice {start}..{} out of bounds for {:?}",
                start + len,
                vx.shape()
            )));
        }
        let data = vx.data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::new(vec![len, d], data)?;
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::SliceRows { x: x.0, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = (vx.rows(), vx.cols());
        if start + len > d {
            return Err(AutodiffError::Contract(format!(
                "column slice {start}..{} out of bounds for {:?}",
                start + len,
                vx.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * d + start..r * d + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::SliceCols { x: x.0, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(AutodiffError::Contract("concat of zero tensors".into()));
        };
        let rows = self.value(*first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Replaces entries above the diagonal of a square score matrix with
    /// [`MASK_VALUE`].
    pub fn causal_mask(&mut self, scores: Var) -> Result<Var> {
        let vs = self.value(scores);
        let s = vs.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(AutodiffError::Contract(format!(
                "causal mask expects a square matrix, got {s:?}"
            )));
        }
        let t = s[0];
        let mut out = vs.clone();
        for i in 0..t {
            for j in i + 1..t {
                out.data_mut()[i * t + j] = MASK_VALUE;
            }
        }
        let rg = self.rg(scores.0);
        Ok(self.push(out, Op::CausalMask(scores.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(total), Op::Sum(a.0), rg)
    }

    /// Mean negative log-likelihood of `targets[t]` under `softmax(logits[t])`
    /// over the positions where `mask[t]` is set.
    pub fn cross_entropy_next_token(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let vl = self.value(logits);
        let (t_len, vocab) = (vl.rows(), vl.cols());
        if targets.len() != t_len || mask.len() != t_len {
            return Err(AutodiffError::Contract(format!(
                "{t_len} logit rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(AutodiffError::Contract(
                "cross entropy needs at least one unmasked position".into(),
            ));
        }
        let mut probs = Vec::with_capacity(count * vocab);
        let mut total = 0.0;
        for t in 0..t_len {
            if !mask[t] {
                continue;
            }
            let y = targets[t];
            if y >= vocab {
                return Err(AutodiffError::Vocabulary { id: y, vocab });
            }
            let row = vl.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let loss = Tensor::scalar(total / count as f64);
        let rg = self.rg(logits.0);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added into the
    /// `grad` buffers of every reachable leaf that requires grad; they keep
    /// accumulating across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let nodes = &self.nodes;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |idx: usize, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[idx].requires_grad {
                    return;
                }
                let buf = adj[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.numel()]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| add_into(buf, &g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc(*a, &mut |buf| {
                        for ((o, gi), y) in buf.iter_mut().zip(&g).zip(vb) {
                            *o += gi * y;
                        }
                    });
                    acc(*b, &mut |buf| {
                        for ((o, gi), x) in buf.iter_mut().zip(&g).zip(va) {
                            *o += gi * x;
                        }
                    });
                }
                Op::Scale(a, s) => acc(*a, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(&g) {
                        *o += s * gi;
                    }
                }),
                Op::MatMul { a, b, n, k, p } => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    // dA = dC · Bᵀ ; dB = Aᵀ · dC
                    acc(*a, &mut |buf| gemm(*n, *p, *k, &g, false, vb, true, buf, 1.0));
                    acc(*b, &mut |buf| gemm(*k, *n, *p, va, true, &g, false, buf, 1.0));
                }
                Op::Transpose(a) => {
                    let s = nodes[*a].value.shape();
                    let (r, c) = (s[0], s[1]);
                    acc(*a, &mut |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc(*a, &mut |buf| {
                        for ((o, gi), yi) in buf.iter_mut().zip(&g).zip(y) {
                            *o += gi * yi * (1.0 - yi);
                        }
                    });
                }
                Op::Silu(a) => {
                    let x = nodes[*a].value.data();
                    acc(*a, &mut |buf| {
                        for ((o, gi), xi) in buf.iter_mut().zip(&g).zip(x) {
                            let s = kernels::sigmoid(*xi);
                            *o += gi * s * (1.0 + xi * (1.0 - s));
                        }
                    });
                }
                Op::Gelu(a) => {
                    let x = nodes[*a].value.data();
                    acc(*a, &mut |buf| {
                        for ((o, gi), xi) in buf.iter_mut().zip(&g).zip(x) {
                            *o += gi * kernels::gelu_grad(*xi);
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = nodes[*a].value.data();
                    acc(*a, &mut |buf| {
                        for ((o, gi), xi) in buf.iter_mut().zip(&g).zip(x) {
                            if *xi > 0.0 {
                                *o += gi;
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    acc(*a, &mut |buf| {
                        for ((o, gr), yr) in
                            buf.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c))
                        {
                            let dot: f64 = gr.iter().zip(yr).map(|(u, v)| u * v).sum();
                            for j in 0..c {
                                o[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gam = nodes[*gamma].value.data();
                    let d = gam.len();
                    acc(*x, &mut |buf| {
                        let mut dxhat = vec![0.0; d];
                        for (r, rs) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxhat[j] = gr[j] * gam[j];
                            }
                            let m1 = dxhat.iter().sum::<f64>() / d as f64;
                            let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>()
                                / d as f64;
                            let o = &mut buf[r * d..(r + 1) * d];
                            for j in 0..d {
                                o[j] += rs * (dxhat[j] - m1 - hr[j] * m2);
                            }
                        }
                    });
                    acc(*gamma, &mut |buf| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                buf[j] += gr[j] * hr[j];
                            }
                        }
                    });
                    acc(*beta, &mut |buf| {
                        for gr in g.chunks(d) {
                            add_into(buf, gr);
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[*table].value.cols();
                    acc(*table, &mut |buf| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].value.numel();
                        acc(p, &mut |buf| add_into(buf, &g[off..off + len]));
                        off += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    let d = node.value.cols();
                    let off = start * d;
                    acc(*x, &mut |buf| add_into(&mut buf[off..off + g.len()], &g));
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut col = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        acc(p, &mut |buf| {
                            for (r, o) in buf.chunks_mut(w).enumerate() {
                                add_into(o, &g[r * total + col..r * total + col + w]);
                            }
                        });
                        col += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let w = node.value.cols();
                    let d = nodes[*x].value.cols();
                    acc(*x, &mut |buf| {
                        for (r, gr) in g.chunks(w).enumerate() {
                            add_into(&mut buf[r * d + start..r * d + start + w], gr);
                        }
                    });
                }
                Op::CausalMask(a) => {
                    let t = node.value.cols();
                    acc(*a, &mut |buf| {
                        for i in 0..t {
                            for j in 0..=i {
                                buf[i * t + j] += g[i * t + j];
                            }
                        }
                    });
                }
                Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
                Op::CrossEntropy { logits, targets, mask, probs, count } => {
                    let vocab = nodes[*logits].value.cols();
                    let w = g[0] / *count as f64;
                    acc(*logits, &mut |buf| {
                        let mut k = 0;
                        for (t, &on) in mask.iter().enumerate() {
                            if !on {
                                continue;
                            }
                            let pr = &probs[k * vocab..(k + 1) * vocab];
                            let o = &mut buf[t * vocab..(t + 1) * vocab];
                            for j in 0..vocab {
                                o[j] += w * pr[j];
                            }
                            o[targets[t]] -= w;
                            k += 1;
                        }
                    });
                }
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(existing) => add_into(existing.data_mut(), &g),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("same shape")
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}
