use super::kernels::{self, axpy, dot};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    RowDot(Var, Var),
    RowMax {
        x: Var,
        arg: Vec<usize>,
    },
    SumAll(Var),
    MeanRows(Var),
    Diag(Var),
    ZeroDiag(Var),
    SumSquares(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The differentiation tape. Nodes are appended in evaluation order, so the
/// node list is already a topological order of the computation.
///
/// A graph is single-owner: it is `Send` but offers no shared mutation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims2() != b.dims2() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric {
            op,
            detail: "NaN input".into(),
        });
    }
    Ok(())
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor { shape, data },
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = kernels::transpose(self.value(a).data(), m, n);
        self.push(vec![n, m], out, Op::Transpose(a), &[a])
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_dims(name, self.value(a), self.value(b))?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(row).numel() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c), &[x])
    }

    /// Multiplies every entry by a one-element node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self
            .value(s)
            .item()
            .map_err(|_| Error::shape("scale_by", self.shape(x), self.shape(s)))?;
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Exp(x), &[x])
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * kernels::phi_cdf(v))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        check_finite("softmax_rows", self.value(x))?;
        let (m, n) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        debug_assert_eq!(out.len(), m * n);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::SoftmaxRows(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        check_finite("log_softmax_rows", self.value(x))?;
        let (_, n) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmaxRows(x), &[x]))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::contract("layer_norm eps must be non-negative"));
        }
        let (m, n) = self.dims(x);
        if self.value(gamma).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(beta)));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let denom = var + eps;
            let is = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` become zero.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::contract("l2_normalize_rows eps must be positive"));
        }
        let (m, n) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        let mut norms = vec![0.0; m];
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            let norm = dot(row, row).sqrt();
            norms[i] = norm;
            if norm < eps {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::L2NormalizeRows { x, norms, eps }, &[x]))
    }

    /// Row-wise inner products of two equal-shape matrices, as a `1 x m` row.
    /// Equals the diagonal of `a * b^T`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("row_dot", self.value(a), self.value(b))?;
        let (m, n) = self.dims(a);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = (0..m)
            .map(|i| dot(&av[i * n..(i + 1) * n], &bv[i * n..(i + 1) * n]))
            .collect();
        Ok(self.push(vec![1, m], out, Op::RowDot(a, b), &[a, b]))
    }

    /// Maximum of each row, as a `1 x m` row. Ties resolve to the first index.
    pub fn row_max(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xs = self.value(x).data();
        let mut arg = vec![0; m];
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            arg[i] = best;
            out[i] = row[best];
        }
        self.push(vec![1, m], out, Op::RowMax { x, arg }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(vec![1, 1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks_exact(n) {
            axpy(1.0 / m as f64, row, &mut out);
        }
        self.push(vec![1, n], out, Op::MeanRows(x), &[x])
    }

    /// Diagonal of a square matrix as a `1 x n` row.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m != n {
            return Err(Error::shape("diag", self.shape(x), &[n, n]));
        }
        let xs = self.value(x).data();
        let out = (0..n).map(|i| xs[i * n + i]).collect();
        Ok(self.push(vec![1, n], out, Op::Diag(x), &[x]))
    }

    pub fn zero_diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m != n {
            return Err(Error::shape("zero_diag", self.shape(x), &[n, n]));
        }
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            out[i * n + i] = 0.0;
        }
        Ok(self.push(vec![n, n], out, Op::ZeroDiag(x), &[x]))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let xs = self.value(x).data();
        let s = dot(xs, xs);
        self.push(vec![1, 1], vec![s], Op::SumSquares(x), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let n = self.dims(first).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let m = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pn;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let pn = self.dims(p).1;
            let pv = self.value(p).data();
            for i in 0..m {
                out[i * total + off..i * total + off + pn].copy_from_slice(&pv[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + end]);
        }
        Ok(self.push(vec![m, w], out, Op::SliceCols(x, start, end), &[x]))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::contract("gather_rows needs at least one id"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::contract(format!(
                    "row id {id} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(&tv[id * n..(id + 1) * n]);
        }
        Ok(self.push(
            vec![ids.len(), n],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Reverse sweep from a scalar node. Returns gradients for every leaf
    /// that requires them; shared inputs accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[i].value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                if let Some(ga) = self.slot(grads, a) {
                    kernels::matmul_nt_acc(g, self.value(b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::matmul_tn_acc(self.value(a).data(), g, gb, m, k, n);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).0;
                if let Some(ga) = self.slot(grads, a) {
                    kernels::matmul_nn_acc(g, self.value(b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::matmul_tn_acc(g, self.value(a).data(), gb, m, n, k);
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = self.dims(a);
                if let Some(ga) = self.slot(grads, a) {
                    let gt = kernels::transpose(g, n, m);
                    axpy(1.0, &gt, ga);
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.slot(grads, b) {
                    axpy(1.0, g, gb);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.slot(grads, b) {
                    axpy(-1.0, g, gb);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(self.value(b).data()) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(self.value(a).data()) {
                        *o += gi * ai;
                    }
                }
            }
            &Op::AddRow(x, row) => {
                if let Some(gx) = self.slot(grads, x) {
                    axpy(1.0, g, gx);
                }
                let n = self.dims(x).1;
                if let Some(gr) = self.slot(grads, row) {
                    for grow in g.chunks_exact(n) {
                        axpy(1.0, grow, gr);
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, x) {
                    axpy(c, g, gx);
                }
            }
            &Op::ScaleBy(x, s) => {
                let c = self.value(s).data()[0];
                if let Some(gx) = self.slot(grads, x) {
                    axpy(c, g, gx);
                }
                if let Some(gs) = self.slot(grads, s) {
                    gs[0] += dot(g, self.value(x).data());
                }
            }
            &Op::Exp(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((o, gi), &xi) in gx.iter_mut().zip(g).zip(self.value(x).data()) {
                        *o += gi * (kernels::phi_cdf(xi) + xi * kernels::phi_pdf(xi));
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                let n = self.dims(x).1;
                if let Some(gx) = self.slot(grads, x) {
                    for ((grow, yrow), orow) in g
                        .chunks_exact(n)
                        .zip(y.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let s = dot(grow, yrow);
                        for j in 0..n {
                            orow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(x) => {
                let n = self.dims(x).1;
                if let Some(gx) = self.slot(grads, x) {
                    for ((grow, yrow), orow) in g
                        .chunks_exact(n)
                        .zip(y.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let s: f64 = grow.iter().sum();
                        for j in 0..n {
                            orow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x);
                let gam = self.value(*gamma).data();
                if let Some(gb) = self.slot(grads, *beta) {
                    for grow in g.chunks_exact(n) {
                        axpy(1.0, grow, gb);
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let h = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = g[i * n + j] * gam[j];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh = dot(&dxhat, h);
                        let is = inv_std[i];
                        for j in 0..n {
                            gx[i * n + j] += is / nf * (nf * dxhat[j] - sum_d - h[j] * sum_dh);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let n = self.dims(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &norm) in norms.iter().enumerate() {
                        if norm < *eps {
                            continue;
                        }
                        let grow = &g[i * n..(i + 1) * n];
                        let yrow = &y[i * n..(i + 1) * n];
                        let proj = dot(grow, yrow);
                        for j in 0..n {
                            gx[i * n + j] += (grow[j] - yrow[j] * proj) / norm;
                        }
                    }
                }
            }
            &Op::RowDot(a, b) => {
                let (_, n) = self.dims(a);
                if let Some(ga) = self.slot(grads, a) {
                    let bv = self.value(b).data();
                    for (i, &gi) in g.iter().enumerate() {
                        axpy(gi, &bv[i * n..(i + 1) * n], &mut ga[i * n..(i + 1) * n]);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    let av = self.value(a).data();
                    for (i, &gi) in g.iter().enumerate() {
                        axpy(gi, &av[i * n..(i + 1) * n], &mut gb[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::RowMax { x, arg } => {
                let n = self.dims(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &j) in arg.iter().enumerate() {
                        gx[i * n + j] += g[i];
                    }
                }
            }
            &Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            &Op::MeanRows(x) => {
                let (m, n) = self.dims(x);
                if let Some(gx) = self.slot(grads, x) {
                    for row in gx.chunks_exact_mut(n) {
                        axpy(1.0 / m as f64, g, row);
                    }
                }
            }
            &Op::Diag(x) => {
                let n = self.dims(x).1;
                if let Some(gx) = self.slot(grads, x) {
                    for i in 0..n {
                        gx[i * n + i] += g[i];
                    }
                }
            }
            &Op::ZeroDiag(x) => {
                let n = self.dims(x).1;
                if let Some(gx) = self.slot(grads, x) {
                    for (idx, (o, gi)) in gx.iter_mut().zip(g).enumerate() {
                        if idx / n != idx % n {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::SumSquares(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    axpy(2.0 * g[0], self.value(x).data(), gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.slot(grads, p) {
                        axpy(1.0, &g[off..off + len], gp);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let (pm, pn) = self.dims(p);
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..pm {
                            axpy(
                                1.0,
                                &g[i * total + off..i * total + off + pn],
                                &mut gp[i * pn..(i + 1) * pn],
                            );
                        }
                    }
                    off += pn;
                }
            }
            &Op::SliceCols(x, start, end) => {
                let (m, n) = self.dims(x);
                let w = end - start;
                if let Some(gx) = self.slot(grads, x) {
                    for i in 0..m {
                        axpy(
                            1.0,
                            &g[i * w..(i + 1) * w],
                            &mut gx[i * n + start..i * n + end],
                        );
                    }
                }
            }
            Op::Gather { table, ids } => {
                let n = self.dims(*table).1;
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * n..(r + 1) * n], &mut gt[id * n..(id + 1) * n]);
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    axpy(1.0, g, gx);
                }
            }
        }
    }
}
