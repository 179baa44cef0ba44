//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse. Nodes are created in topological order, so no
//! explicit sort is needed.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Lower/upper clamp applied to probabilities before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    SubCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Arc<Vec<f64>>),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    RowSumSq(Var),
    Gather(Var, Arc<Vec<usize>>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    ScaleNorm(Var, Var, f64),
    CrossEntropy(Var, Arc<Vec<usize>>, f64),
    Bce(Var, Arc<Vec<f64>>, f64),
    Mse(Var, Arc<Vec<f64>>, f64),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-owner computation graph. Not shared between threads; parallel
/// batch processing builds one graph per worker item.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    workspace: usize,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    pub params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.nodes.get(var.0).and_then(|g| g.as_deref())
    }
}

fn reduction_scale(r: Reduction, n: usize) -> f64 {
    match r {
        Reduction::Mean => 1.0 / n as f64,
        Reduction::Sum => 1.0,
    }
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

    /// Total number of elements held by non-leaf nodes: the intermediate
    /// workspace this graph materialized.
    pub fn workspace_elements(&self) -> usize {
        self.workspace
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if !matches!(op, Op::Leaf(_)) {
            self.workspace += value.numel();
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant: no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None), false)
    }

    /// A non-parameter leaf that tracks gradients.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None), true)
    }

    /// Loads a parameter; repeated loads of the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get_arc(id),
            op: Op::Leaf(Some(id)),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn expect_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d("matmul", a)?;
        let (k2, n) = self.expect_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d("matmul_nt", a)?;
        let (n, k2) = self.expect_2d("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let c = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMulNT(a, b), rg))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = self.expect_2d("matmul_tn", a)?;
        let (k2, n) = self.expect_2d("matmul_tn", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_tn", self.shape(a), self.shape(b)));
        }
        let c = kernels::matmul_tn(self.value(a).data(), self.value(b).data(), k, m, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMulTN(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.expect_2d("transpose", a)?;
        let t = kernels::transpose(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, m], t), Op::Transpose(a), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.mat(a);
        if self.value(b).numel() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data().to_vec();
        let ta = self.value(a);
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&bv).for_each(|(x, y)| *x += y);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(a, b), rg))
    }

    fn col_op(
        &mut self,
        op: &'static str,
        a: Var,
        c: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (m, n) = self.mat(a);
        if self.value(c).numel() != m {
            return Err(Error::shape(op, self.shape(a), self.shape(c)));
        }
        let cv = self.value(c).data();
        let ta = self.value(a);
        let mut out = ta.data().to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|x| *x = f(*x, cv[i]));
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, c]);
        Ok(self.push(Tensor::from_parts(shape, out), mk(a, c), rg))
    }

    /// Multiplies row `i` of `a` by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_op("mul_col", a, c, |x, s| x * s, Op::MulCol)
    }

    /// Divides row `i` of `a` by `c[i]`.
    pub fn div_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_op("div_col", a, c, |x, s| x / s, Op::DivCol)
    }

    /// Subtracts `c[i]` from every entry of row `i` of `a`.
    pub fn sub_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_op("sub_col", a, c, |x, s| x - s, Op::SubCol)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// Elementwise product with a constant array (dropout masks and such).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() != mask.len() {
            return Err(Error::shape("mul_const", ta.shape(), &[mask.len()]));
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulConst(a, Arc::new(mask)), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} for shape {:?}",
                t.shape()
            )));
        }
        let y = kernels::softmax(t.data(), t.shape(), axis);
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Softmax(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Column sums of a matrix, shape `[cols]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.mat(a);
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::vector(out), Op::SumRows(a), rg)
    }

    /// Squared l2 norm of every row, shape `[rows]`.
    pub fn row_sum_sq(&mut self, a: Var) -> Var {
        let (_, n) = self.mat(a);
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|x| x * x).sum())
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::vector(out), Op::RowSumSq(a), rg)
    }

    /// Selects rows of a matrix by index (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let (m, n) = self.expect_2d("gather", table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index {
                what: "gather rows".into(),
                index: bad,
                limit: m,
            });
        }
        if idx.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            out.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[table]);
        let rows = idx.len();
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], out),
            Op::Gather(table, Arc::new(idx)),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.expect_2d("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                what: "slice_cols end".into(),
                index: start + len,
                limit: n,
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for row in self.value(a).data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of nothing"));
        }
        let m = self.expect_2d("concat_cols", parts[0])?.0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.expect_2d("concat_cols", p)?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Row-wise `gain · x / max(‖x‖₂, eps)` with a scalar learnable gain.
    pub fn scale_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        if self.value(gain).numel() != 1 {
            return Err(Error::shape("scale_norm gain", self.shape(gain), &[1]));
        }
        let g = self.value(gain).item();
        let (_, n) = self.mat(x);
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = g / norm.max(eps);
            row.iter_mut().for_each(|v| *v *= s);
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, gain]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ScaleNorm(x, gain, eps), rg))
    }

    /// Cross entropy of row-wise logits against class indices.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        reduction: Reduction,
    ) -> Result<Var> {
        let (m, c) = self.expect_2d("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy targets", &[m, c], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                what: "class".into(),
                index: bad,
                limit: c,
            });
        }
        let z = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let s = reduction_scale(reduction, m);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total * s),
            Op::CrossEntropy(logits, Arc::new(targets), s),
            rg,
        ))
    }

    /// Binary cross entropy of probabilities against {0,1} labels, with the
    /// probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn binary_cross_entropy(
        &mut self,
        probs: Var,
        labels: Vec<f64>,
        reduction: Reduction,
    ) -> Result<Var> {
        let tp = self.value(probs);
        if tp.numel() != labels.len() {
            return Err(Error::shape("binary_cross_entropy", tp.shape(), &[labels.len()]));
        }
        let total: f64 = tp
            .data()
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let s = reduction_scale(reduction, labels.len());
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(total * s),
            Op::Bce(probs, Arc::new(labels), s),
            rg,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Vec<f64>, reduction: Reduction) -> Result<Var> {
        let tp = self.value(pred);
        if tp.numel() != target.len() {
            return Err(Error::shape("mse", tp.shape(), &[target.len()]));
        }
        let total: f64 = tp
            .data()
            .iter()
            .zip(&target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let s = reduction_scale(reduction, target.len());
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(total * s),
            Op::Mse(pred, Arc::new(target), s),
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut params = ParamGrads::new(0);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf(pid) = node.op {
                if let Some(pid) = pid {
                    params.accumulate(pid, &g);
                }
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf(_) => unreachable!(),
            &Op::MatMul(a, b) => {
                let (m, k) = self.mat(a);
                let n = self.mat(b).1;
                if self.wants(a) {
                    let ga = kernels::matmul_nt(g, self.value(b).data(), m, n, k);
                    self.acc(grads, a, ga);
                }
                if self.wants(b) {
                    let gb = kernels::matmul_tn(self.value(a).data(), g, m, k, n);
                    self.acc(grads, b, gb);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = self.mat(a);
                let n = self.mat(b).0;
                if self.wants(a) {
                    let ga = kernels::matmul(g, self.value(b).data(), m, n, k);
                    self.acc(grads, a, ga);
                }
                if self.wants(b) {
                    let gb = kernels::matmul_tn(g, self.value(a).data(), m, n, k);
                    self.acc(grads, b, gb);
                }
            }
            &Op::MatMulTN(a, b) => {
                let (k, m) = self.mat(a);
                let n = self.mat(b).1;
                if self.wants(a) {
                    let ga = kernels::matmul_nt(self.value(b).data(), g, k, n, m);
                    self.acc(grads, a, ga);
                }
                if self.wants(b) {
                    let gb = kernels::matmul(self.value(a).data(), g, k, m, n);
                    self.acc(grads, b, gb);
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = self.mat(a);
                self.acc(grads, a, kernels::transpose(g, n, m));
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.to_vec());
                self.acc(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.to_vec());
                self.acc(grads, b, g.iter().map(|x| -x).collect());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    self.acc(grads, a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.wants(b) {
                    self.acc(grads, b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            &Op::AddRow(a, b) => {
                self.acc(grads, a, g.to_vec());
                if self.wants(b) {
                    let n = self.mat(a).1;
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                    self.acc(grads, b, gb);
                }
            }
            &Op::MulCol(a, c) => {
                let n = self.mat(a).1;
                let (va, vc) = (self.value(a).data(), self.value(c).data());
                if self.wants(a) {
                    let ga = g.iter().enumerate().map(|(j, x)| x * vc[j / n]).collect();
                    self.acc(grads, a, ga);
                }
                if self.wants(c) {
                    let gc = g
                        .chunks(n)
                        .zip(va.chunks(n))
                        .map(|(gr, ar)| kernels::dot(gr, ar))
                        .collect();
                    self.acc(grads, c, gc);
                }
            }
            &Op::DivCol(a, c) => {
                let n = self.mat(a).1;
                let (va, vc) = (self.value(a).data(), self.value(c).data());
                if self.wants(a) {
                    let ga = g.iter().enumerate().map(|(j, x)| x / vc[j / n]).collect();
                    self.acc(grads, a, ga);
                }
                if self.wants(c) {
                    let gc = g
                        .chunks(n)
                        .zip(va.chunks(n))
                        .zip(vc)
                        .map(|((gr, ar), &cv)| -kernels::dot(gr, ar) / (cv * cv))
                        .collect();
                    self.acc(grads, c, gc);
                }
            }
            &Op::SubCol(a, c) => {
                let n = self.mat(a).1;
                self.acc(grads, a, g.to_vec());
                if self.wants(c) {
                    let gc = g.chunks(n).map(|r| -r.iter().sum::<f64>()).collect();
                    self.acc(grads, c, gc);
                }
            }
            &Op::Scale(a, s) => self.acc(grads, a, g.iter().map(|x| x * s).collect()),
            &Op::AddScalar(a) => self.acc(grads, a, g.to_vec()),
            Op::MulConst(a, mask) => {
                self.acc(grads, *a, g.iter().zip(mask.iter()).map(|(x, m)| x * m).collect())
            }
            &Op::Relu(a) => {
                let va = self.value(a).data();
                let ga = g
                    .iter()
                    .zip(va)
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.acc(grads, a, ga);
            }
            &Op::Gelu(a) => {
                let va = self.value(a).data();
                let ga = g
                    .iter()
                    .zip(va)
                    .map(|(x, &v)| x * kernels::gelu_grad(v))
                    .collect();
                self.acc(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = g.iter().zip(y).map(|(x, s)| x * s * (1.0 - s)).collect();
                self.acc(grads, a, ga);
            }
            &Op::Exp(a) => {
                let ga = g.iter().zip(y).map(|(x, e)| x * e).collect();
                self.acc(grads, a, ga);
            }
            &Op::Softmax(a, axis) => {
                let (outer, len, inner) = kernels::axis_extents(node.value.shape(), axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + k;
                        let s: f64 = (0..len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                        for t in 0..len {
                            ga[idx(t)] = y[idx(t)] * (g[idx(t)] - s);
                        }
                    }
                }
                self.acc(grads, a, ga);
            }
            &Op::SumAll(a) => {
                let n = self.value(a).numel();
                self.acc(grads, a, vec![g[0]; n]);
            }
            &Op::MeanAll(a) => {
                let n = self.value(a).numel();
                self.acc(grads, a, vec![g[0] / n as f64; n]);
            }
            &Op::SumRows(a) => {
                let (m, _) = self.mat(a);
                let ga = (0..m).flat_map(|_| g.iter().copied()).collect();
                self.acc(grads, a, ga);
            }
            &Op::RowSumSq(a) => {
                let n = self.mat(a).1;
                let va = self.value(a).data();
                let ga = va
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| 2.0 * x * g[j / n])
                    .collect();
                self.acc(grads, a, ga);
            }
            Op::Gather(table, idx) => {
                let (m, n) = self.mat(*table);
                let mut gt = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut gt[i * n..(i + 1) * n];
                    dst.iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(d, s)| *d += s);
                }
                self.acc(grads, *table, gt);
            }
            &Op::SliceCols(a, start) => {
                let (m, n) = self.mat(a);
                let len = node.value.cols();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.acc(grads, a, ga);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let (m, n) = self.mat(p);
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(m * n);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * total + off..r * total + off + n]);
                        }
                        self.acc(grads, p, gp);
                    }
                    off += n;
                }
            }
            &Op::Reshape(a) => self.acc(grads, a, g.to_vec()),
            &Op::ScaleNorm(x, gain, eps) => {
                let gv = self.value(gain).item();
                let n = self.mat(x).1;
                let vx = self.value(x).data();
                let mut gx = vec![0.0; vx.len()];
                let mut ggain = 0.0;
                for ((xr, gr), out) in vx.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let xg = kernels::dot(xr, gr);
                    if norm > eps {
                        let inv = 1.0 / norm;
                        for ((o, &xv), &gv_) in out.iter_mut().zip(xr).zip(gr) {
                            *o = gv * inv * (gv_ - xv * xg * inv * inv);
                        }
                        ggain += xg * inv;
                    } else {
                        for (o, &gv_) in out.iter_mut().zip(gr) {
                            *o = gv / eps * gv_;
                        }
                        ggain += xg / eps;
                    }
                }
                self.acc(grads, x, gx);
                self.acc(grads, gain, vec![ggain]);
            }
            Op::CrossEntropy(logits, targets, s) => {
                let (m, c) = self.mat(*logits);
                let z = self.value(*logits).data();
                let mut gz = kernels::softmax(z, &[m, c], 1);
                for (i, &t) in targets.iter().enumerate() {
                    gz[i * c + t] -= 1.0;
                }
                gz.iter_mut().for_each(|v| *v *= s * g[0]);
                self.acc(grads, *logits, gz);
            }
            Op::Bce(p, labels, s) => {
                let vp = self.value(*p).data();
                let gp = vp
                    .iter()
                    .zip(labels.iter())
                    .map(|(&pv, &yv)| {
                        if pv <= BCE_CLAMP || pv >= 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            s * g[0] * (-yv / pv + (1.0 - yv) / (1.0 - pv))
                        }
                    })
                    .collect();
                self.acc(grads, *p, gp);
            }
            Op::Mse(p, target, s) => {
                let vp = self.value(*p).data();
                let gp = vp
                    .iter()
                    .zip(target.iter())
                    .map(|(pv, tv)| s * g[0] * 2.0 * (pv - tv))
                    .collect();
                self.acc(grads, *p, gp);
            }
        }
    }
}
