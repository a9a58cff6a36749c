//! Reverse-mode differentiation over an append-only node arena.
//!
//! Every operation appends a node whose parents already exist, so the arena
//! order is a topological order and the graph is acyclic by construction.
//! `backward` walks the arena once in reverse.

use crate::error::{CcsError, Result};

use super::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    /// Gradient goes to the larger operand; ties go to the first.
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Relu(Var),
    RowSoftmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    /// Winning row per column.
    MaxRows(Var, Vec<usize>),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Expand(Var),
    SqDist(Var, Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::SqDist(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Relu(a)
            | Op::RowSoftmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::MaxRows(a, _)
            | Op::Reshape(a)
            | Op::SliceRows(a, _)
            | Op::Gather(a, _)
            | Op::Expand(a) => vec![*a],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// A single-writer differentiation graph.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(CcsError::dim(op, t.shape(), &[0, 0]))
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(g, c)| *g += c),
        None => *slot = Some(contribution.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a differentiable leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Smallest distance of any hinge, max or selection input from its
    /// switching point seen so far. Zero means an exact kink was evaluated.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Records the distance from a non-differentiable switch taken outside
    /// the graph (for example an arg-min selection on values).
    pub fn note_kink_margin(&mut self, margin: f64) {
        self.kink_margin = self.kink_margin.min(margin.abs());
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(CcsError::dim("matmul", ta.shape(), tb.shape()));
        }
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = da[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims("transpose", ta)?;
        let t = Tensor::new(vec![n, m], transpose_data(ta.data(), m, n))?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(CcsError::dim("elementwise", ta.shape(), tb.shape()));
        }
        let mut margin = f64::INFINITY;
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Max => {
                    margin = margin.min((x - y).abs());
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
            })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.note_kink_margin(margin);
        Ok(self.push(t, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Max)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.exp()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Exp(a))
    }

    /// `max(0, x)` with subgradient 0 at exactly 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let margin = ta
            .data()
            .iter()
            .map(|x| x.abs())
            .fold(f64::INFINITY, f64::min);
        let data = ta
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.note_kink_margin(margin);
        self.push(t, Op::Relu(a))
    }

    /// Softmax over each row, with per-row max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims("row_softmax", ta)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(ta.row(i), &mut out[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::RowSoftmax(a)))
    }

    /// Log of the row softmax, in log-sum-exp form.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims("log_softmax", ta)?;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = ta.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Column sums: `m×n -> 1×n`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims("sum_rows", ta)?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(ta.row(i)) {
                *o += x;
            }
        }
        let t = Tensor::new(vec![1, n], out)?;
        Ok(self.push(t, Op::SumRows(a)))
    }

    /// Column maxima: `m×n -> 1×n`; ties go to the earliest row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims("max_rows", ta)?;
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut winners = vec![0usize; n];
        let mut runner_up = vec![f64::NEG_INFINITY; n];
        for i in 0..m {
            for (j, &x) in ta.row(i).iter().enumerate() {
                if x > out[j] {
                    runner_up[j] = out[j];
                    out[j] = x;
                    winners[j] = i;
                } else if x > runner_up[j] {
                    runner_up[j] = x;
                }
            }
        }
        let margin = if m > 1 {
            out.iter()
                .zip(&runner_up)
                .map(|(a, b)| a - b)
                .fold(f64::INFINITY, f64::min)
        } else {
            f64::INFINITY
        };
        let t = Tensor::new(vec![1, n], out)?;
        self.note_kink_margin(margin);
        Ok(self.push(t, Op::MaxRows(a, winners)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CcsError::Contract("concat of zero tensors".into()))?;
        let (_, n) = matrix_dims("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (m, n2) = matrix_dims("concat_rows", t)?;
            if n2 != n {
                return Err(CcsError::dim(
                    "concat_rows",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            rows += m;
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CcsError::Contract("concat of zero tensors".into()))?;
        let (m, _) = matrix_dims("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (m2, n) = matrix_dims("concat_cols", t)?;
            if m2 != m {
                return Err(CcsError::dim(
                    "concat_cols",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims("slice_rows", ta)?;
        if len == 0 || start + len > m {
            return Err(CcsError::dim("slice_rows", ta.shape(), &[start, len]));
        }
        let data = ta.data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data)?;
        Ok(self.push(t, Op::SliceRows(a, start)))
    }

    /// Picks entries by flat row-major index into a `1×k` row.
    pub fn gather(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if flat.is_empty() || flat.iter().any(|&i| i >= ta.numel()) {
            return Err(CcsError::dim("gather", ta.shape(), &[flat.len()]));
        }
        let data = flat.iter().map(|&i| ta.data()[i]).collect();
        let t = Tensor::new(vec![1, flat.len()], data)?;
        Ok(self.push(t, Op::Gather(a, flat.to_vec())))
    }

    /// Broadcasts a `1×1`, `1×n` or `m×1` matrix (or a one-element tensor)
    /// to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = match shape {
            [m, n] => (*m, *n),
            _ => return Err(CcsError::dim("expand", ta.shape(), shape)),
        };
        let (sm, sn) = if ta.is_scalar() {
            (1, 1)
        } else {
            matrix_dims("expand", ta)?
        };
        if !((sm == 1 || sm == m) && (sn == 1 || sn == n)) {
            return Err(CcsError::dim("expand", ta.shape(), shape));
        }
        let src = ta.data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let si = if sm == 1 { 0 } else { i };
                let sj = if sn == 1 { 0 } else { j };
                data.push(src[si * sn + sj]);
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::Expand(a)))
    }

    /// Pairwise squared Euclidean distances between rows: `m×d, k×d -> m×k`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, d) = matrix_dims("sq_dist", ta)?;
        let (k, d2) = matrix_dims("sq_dist", tb)?;
        if d != d2 {
            return Err(CcsError::dim("sq_dist", ta.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(m * k);
        for i in 0..m {
            let ra = ta.row(i);
            for j in 0..k {
                let rb = tb.row(j);
                out.push(ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let t = Tensor::new(vec![m, k], out)?;
        Ok(self.push(t, Op::SqDist(a, b)))
    }

    /// `x·w + b` with the `1×n` bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let shape = self.value(xw).shape().to_vec();
        let bias = self.expand(b, &shape)?;
        self.add(xw, bias)
    }

    /// Accumulates `d loss / d leaf` into every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(CcsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data()[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = ta.data()[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                accumulate(&mut grads[a.0], &transpose_data(g, m, n));
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    BinaryKind::Add => (g.to_vec(), g.to_vec()),
                    BinaryKind::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    BinaryKind::Mul => (
                        g.iter().zip(tb).map(|(g, y)| g * y).collect(),
                        g.iter().zip(ta).map(|(g, x)| g * x).collect(),
                    ),
                    BinaryKind::Max => g
                        .iter()
                        .zip(ta.iter().zip(tb))
                        .map(|(&g, (x, y))| if x >= y { (g, 0.0) } else { (0.0, g) })
                        .unzip(),
                };
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::RowSoftmax(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = g[r.clone()]
                        .iter()
                        .zip(&y[r.clone()])
                        .map(|(g, y)| g * y)
                        .sum();
                    for j in r {
                        ga[j] = y[j] * (g[j] - dot);
                    }
                }
                accumulate(&mut grads[a.0], &ga);
            }
            Op::LogSoftmax(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let gsum: f64 = g[r.clone()].iter().sum();
                    for j in r {
                        ga[j] = g[j] - y[j].exp() * gsum;
                    }
                }
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(&mut grads[a.0], &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                accumulate(&mut grads[a.0], &vec![g[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let m = self.value(*a).shape()[0];
                accumulate(&mut grads[a.0], &g.repeat(m));
            }
            Op::MaxRows(a, winners) => {
                let ta = self.value(*a);
                let n = ta.shape()[1];
                let mut ga = vec![0.0; ta.numel()];
                for (j, &i) in winners.iter().enumerate() {
                    ga[i * n + j] = g[j];
                }
                accumulate(&mut grads[a.0], &ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out.shape()[0], out.shape()[1]);
                let mut col = 0;
                for p in parts {
                    let n = self.value(*p).shape()[1];
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(m * n);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * total + col..i * total + col + n]);
                        }
                        accumulate(&mut grads[p.0], &gp);
                    }
                    col += n;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let n = ta.shape()[1];
                let mut ga = vec![0.0; ta.numel()];
                ga[start * n..start * n + g.len()].copy_from_slice(g);
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Gather(a, flat) => {
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (&i, &gi) in flat.iter().zip(g) {
                    ga[i] += gi;
                }
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Expand(a) => {
                let ta = self.value(*a);
                let (sm, sn) = if ta.is_scalar() {
                    (1, 1)
                } else {
                    (ta.shape()[0], ta.shape()[1])
                };
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let mut ga = vec![0.0; ta.numel()];
                for i in 0..m {
                    for j in 0..n {
                        let si = if sm == 1 { 0 } else { i };
                        let sj = if sn == 1 { 0 } else { j };
                        ga[si * sn + sj] += g[i * n + j];
                    }
                }
                accumulate(&mut grads[a.0], &ga);
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, d) = (ta.shape()[0], ta.shape()[1]);
                let k = tb.shape()[0];
                let mut ga = vec![0.0; m * d];
                let mut gb = vec![0.0; k * d];
                for i in 0..m {
                    let ra = ta.row(i);
                    for j in 0..k {
                        let w = 2.0 * g[i * k + j];
                        if w == 0.0 {
                            continue;
                        }
                        let rb = tb.row(j);
                        for c in 0..d {
                            let diff = w * (ra[c] - rb[c]);
                            ga[i * d + c] += diff;
                            gb[j * d + c] -= diff;
                        }
                    }
                }
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], &gb);
                }
            }
        }
    }
}

fn transpose_data(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}
