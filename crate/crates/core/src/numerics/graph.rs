//! Eager reverse-mode value graph.
//!
//! Each forward pass records its nodes into a fresh [`ValueGraph`]; calling
//! [`ValueGraph::backward`] on a scalar node walks the record in reverse and
//! returns the adjoint of every node. Values and adjoints are held in `f64`
//! so finite-difference oracles can check gradients tightly.
//!
//! Sorting never appears as a node: callers sort by the current forward
//! values and apply the resulting permutation with [`ValueGraph::gather`],
//! so gradients flow through the values along a fixed permutation.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Affine(NodeId, f64),
    DivScalar(NodeId, NodeId),
    SubScalar(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    LnEps(NodeId, f64),
    Sigmoid(NodeId),
    Softmax(NodeId),
    CausalSoftmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm(NodeId, Vec<f64>),
    Sum(NodeId),
    Mean(NodeId),
    Gather(NodeId, Vec<usize>),
    ExclusiveCumsum(NodeId),
    Concat(Vec<NodeId>),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    EmbedRows(NodeId, Vec<usize>),
    Reshape(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// Recorded forward computation. Single-threaded; discard after `backward`.
#[derive(Default, Debug)]
pub struct ValueGraph {
    nodes: Vec<Node>,
}

/// Adjoints of every node with respect to one scalar root.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`; zeros when unreachable.
    pub fn get(&self, id: NodeId) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.sizes[id.0]],
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.grads[id.0].as_ref().map_or(0.0, |g| g[0])
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape.iter().product::<usize>() / cols.max(1), cols)
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ValueGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<NodeId> {
        check_shape(&shape, value.len())?;
        Ok(self.push(value, shape, Op::Leaf))
    }

    pub fn vector(&mut self, value: Vec<f64>) -> NodeId {
        let n = value.len();
        self.push(value, vec![n], Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.push(vec![x], vec![], Op::Leaf)
    }

    /// Input that never propagates a gradient (a detached value).
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<NodeId> {
        check_shape(&shape, value.len())?;
        Ok(self.push(value, shape, Op::Constant))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].value.len() != self.nodes[b.0].value.len() {
            return Err(Error::usage(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn is_scalar(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.len() == 1
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(value, shape, op)
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(value, shape, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(
        &mut self,
        m: NodeId,
        row: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (_, cols) = rows_cols(self.shape(m));
        if self.nodes[row.0].value.len() != cols {
            return Err(Error::usage(format!(
                "row broadcast: matrix {:?} vs row {:?}",
                self.shape(m),
                self.shape(row)
            )));
        }
        let vm = &self.nodes[m.0].value;
        let vr = &self.nodes[row.0].value;
        let value = vm
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vr[i % cols]))
            .collect();
        let shape = self.nodes[m.0].shape.clone();
        Ok(self.push(value, shape, op))
    }

    /// `m[r, c] + row[c]`.
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast(m, row, Op::AddRow(m, row), |x, y| x + y)
    }

    /// `m[r, c] * row[c]`.
    pub fn mul_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast(m, row, Op::MulRow(m, row), |x, y| x * y)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        self.map(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    /// Tensor divided by a scalar node.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.is_scalar(s) {
            return Err(Error::usage("div_scalar: divisor is not a scalar"));
        }
        let d = self.scalar_value(s);
        Ok(self.map(a, Op::DivScalar(a, s), |x| x / d))
    }

    /// Tensor minus a scalar node.
    pub fn sub_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.is_scalar(s) {
            return Err(Error::usage("sub_scalar: subtrahend is not a scalar"));
        }
        let d = self.scalar_value(s);
        Ok(self.map(a, Op::SubScalar(a, s), |x| x - d))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = matrix_dims(self.shape(a))?;
        let (k2, n) = matrix_dims(self.shape(b))?;
        if k != k2 {
            return Err(Error::usage(format!(
                "matmul: inner dimensions {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b)))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = matrix_dims(self.shape(a))?;
        let (n, k2) = matrix_dims(self.shape(b))?;
        if k != k2 {
            return Err(Error::usage(format!(
                "matmul_nt: inner dimensions {k} and {k2} differ"
            )));
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ra = &va[i * k..(i + 1) * k];
            for j in 0..n {
                let rb = &vb[j * k..(j + 1) * k];
                out[i * n + j] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            }
        }
        Ok(self.push(out, vec![m, n], Op::MatMulNt(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// `ln(a + eps)`.
    pub fn ln_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.map(a, Op::LnEps(a, eps), |x| (x + eps).ln())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Softmax along the last axis, with max-subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = rows_cols(self.shape(a));
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Softmax(a))
    }

    /// Row softmax of a square score matrix with entries above the diagonal
    /// masked out (row `i` attends to columns `0..=i`).
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = matrix_dims(self.shape(a))?;
        if rows != cols {
            return Err(Error::usage("causal_softmax: scores must be square"));
        }
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            softmax_in_place(&mut row[..=r]);
            row[r + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(self.push(out, vec![rows, cols], Op::CausalSoftmax(a)))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = rows_cols(self.shape(a));
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::LogSoftmax(a))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let (rows, cols) = rows_cols(self.shape(a));
        let mut out = self.nodes[a.0].value.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::LayerNorm(a, inv_std))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], vec![], Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![s], vec![], Op::Mean(a))
    }

    /// Flat-index gather into a vector: `out[k] = a[indices[k]]`.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(Error::usage(format!(
                "gather index {bad} out of range for {} elements",
                v.len()
            )));
        }
        let value = indices.iter().map(|&i| v[i]).collect();
        let n = indices.len();
        Ok(self.push(value, vec![n], Op::Gather(a, indices)))
    }

    pub fn exclusive_cumsum(&mut self, a: NodeId) -> NodeId {
        let mut acc = 0.0;
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| {
                let c = acc;
                acc += x;
                c
            })
            .collect::<Vec<_>>();
        let n = value.len();
        self.push(value, vec![n], Op::ExclusiveCumsum(a))
    }

    /// Flattening concatenation into a vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let value: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.nodes[p.0].value.iter().copied())
            .collect();
        let n = value.len();
        self.push(value, vec![n], Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = matrix_dims(self.shape(a))?;
        if start >= end || end > cols {
            return Err(Error::usage(format!(
                "slice_cols {start}..{end} invalid for {cols} columns"
            )));
        }
        let v = &self.nodes[a.0].value;
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        Ok(self.push(out, vec![rows, w], Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = matrix_dims(self.shape(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims(self.shape(p))?;
            if r != rows {
                return Err(Error::usage("concat_cols: row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(out, vec![rows, total], Op::ConcatCols(parts.to_vec())))
    }

    /// Rows of a `[n, d]` table selected by `indices` (embedding lookup).
    pub fn embed_rows(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (n, d) = matrix_dims(self.shape(table))?;
        let v = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            if i >= n {
                return Err(Error::usage(format!("row {i} out of range for {n} rows")));
            }
            out.extend_from_slice(&v[i * d..(i + 1) * d]);
        }
        let m = indices.len();
        Ok(self.push(out, vec![m, d], Op::EmbedRows(table, indices)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        check_shape(&shape, self.nodes[a.0].value.len())?;
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(value, shape, Op::Reshape(a)))
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(root)
            )));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads, &sizes);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, sizes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], sizes: &[usize]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], sizes[a.0], |ga| add_into(ga, g));
                accumulate(&mut grads[b.0], sizes[b.0], |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], sizes[a.0], |ga| add_into(ga, g));
                accumulate(&mut grads[b.0], sizes[b.0], |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                });
                accumulate(&mut grads[b.0], sizes[b.0], |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddRow(m, row) => {
                let cols = sizes[row.0];
                accumulate(&mut grads[m.0], sizes[m.0], |gm| add_into(gm, g));
                accumulate(&mut grads[row.0], cols, |gr| {
                    for (k, &x) in g.iter().enumerate() {
                        gr[k % cols] += x;
                    }
                });
            }
            Op::MulRow(m, row) => {
                let cols = sizes[row.0];
                let (vm, vr) = (val(*m), val(*row));
                accumulate(&mut grads[m.0], sizes[m.0], |gm| {
                    for (k, &x) in g.iter().enumerate() {
                        gm[k] += x * vr[k % cols];
                    }
                });
                accumulate(&mut grads[row.0], cols, |gr| {
                    for (k, &x) in g.iter().enumerate() {
                        gr[k % cols] += x * vm[k];
                    }
                });
            }
            Op::Affine(a, scale) => {
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += scale * y)
                });
            }
            Op::DivScalar(a, s) => {
                let d = val(*s)[0];
                let va = val(*a);
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y / d)
                });
                let ds: f64 = g.iter().zip(va).map(|(y, x)| -y * x / (d * d)).sum();
                accumulate(&mut grads[s.0], 1, |gs| gs[0] += ds);
            }
            Op::SubScalar(a, s) => {
                accumulate(&mut grads[a.0], sizes[a.0], |ga| add_into(ga, g));
                let ds: f64 = -g.iter().sum::<f64>();
                accumulate(&mut grads[s.0], 1, |gs| gs[0] += ds);
            }
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&self.nodes[a.0].shape);
                let n = rows_cols(&self.nodes[b.0].shape).1;
                let (va, vb) = (val(*a), val(*b));
                // dA = G B^T
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &vb[p * n..(p + 1) * n];
                            ga[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = A^T G
                accumulate(&mut grads[b.0], sizes[b.0], |gb| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = va[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            row.iter_mut().zip(gi).for_each(|(x, y)| *x += a_ip * y);
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = rows_cols(&self.nodes[a.0].shape);
                let n = rows_cols(&self.nodes[b.0].shape).0;
                let (va, vb) = (val(*a), val(*b));
                // out = A B^T: dA = G B, dB = G^T A
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    matmul_acc(g, vb, ga, m, n, k);
                });
                accumulate(&mut grads[b.0], sizes[b.0], |gb| {
                    for i in 0..m {
                        let ai = &va[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let row = &mut gb[j * k..(j + 1) * k];
                            row.iter_mut().zip(ai).for_each(|(x, y)| *x += gij * y);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    for k in 0..g.len() {
                        if va[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * out[k];
                    }
                });
            }
            Op::LnEps(a, eps) => {
                let va = val(*a);
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / (va[k] + eps);
                    }
                });
            }
            Op::Sigmoid(a) => {
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                });
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let (rows, cols) = rows_cols(&node.shape);
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    for r in 0..rows {
                        let s = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += s[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = rows_cols(&node.shape);
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    for r in 0..rows {
                        let lo = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..cols {
                            ga[r * cols + c] += gr[c] - lo[c].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let (rows, cols) = rows_cols(&node.shape);
                let nf = cols as f64;
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gmean = gr.iter().sum::<f64>() / nf;
                        let gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for c in 0..cols {
                            ga[r * cols + c] += inv_std[r] * (gr[c] - gmean - y[c] * gy);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    ga.iter_mut().for_each(|x| *x += g0)
                });
            }
            Op::Mean(a) => {
                let g0 = g[0] / sizes[a.0].max(1) as f64;
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    ga.iter_mut().for_each(|x| *x += g0)
                });
            }
            Op::Gather(a, idx) => {
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    for (k, &i) in idx.iter().enumerate() {
                        ga[i] += g[k];
                    }
                });
            }
            Op::ExclusiveCumsum(a) => {
                // d out[i] / d in[j] = 1 for j < i
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    let mut suffix = 0.0;
                    for j in (0..g.len()).rev() {
                        ga[j] += suffix;
                        suffix += g[j];
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = sizes[p.0];
                    accumulate(&mut grads[p.0], n, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, w) = rows_cols(&node.shape);
                let cols = rows_cols(&self.nodes[a.0].shape).1;
                accumulate(&mut grads[a.0], sizes[a.0], |ga| {
                    for r in 0..rows {
                        add_into(
                            &mut ga[r * cols + start..r * cols + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = rows_cols(&node.shape);
                let mut off = 0;
                for p in parts {
                    let w = rows_cols(&self.nodes[p.0].shape).1;
                    accumulate(&mut grads[p.0], sizes[p.0], |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::EmbedRows(table, idx) => {
                let d = rows_cols(&self.nodes[table.0].shape).1;
                accumulate(&mut grads[table.0], sizes[table.0], |gt| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::Reshape(a) => {
                accumulate(&mut grads[a.0], sizes[a.0], |ga| add_into(ga, g));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::usage(format!(
            "shape {shape:?} needs {n} values, got {len}"
        )));
    }
    Ok(())
}

fn matrix_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        _ => Err(Error::usage(format!(
            "expected a matrix, got shape {shape:?}"
        ))),
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &x)| *o += a_ip * x);
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
