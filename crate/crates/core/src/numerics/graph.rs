//! Tape-style reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation applied to its nodes. Values are
//! computed eagerly, so the same graph serves inference (read values back
//! with [`Graph::value`]) and training (call [`Graph::backward`] on a scalar
//! node). Batched computation uses one row per example; every row-wise
//! operation treats rows independently, so a row's value does not depend on
//! which other rows share the batch.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::numerics::prob::softmax_into;
use crate::numerics::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    SoftmaxRows(Var),
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant input (no gradient is reported for it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None })
    }

    /// Records a trainable tensor under the caller's parameter index.
    pub fn param(&mut self, id: usize, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf { param: Some(id) },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let cols = x.cols();
        if b.len() != cols {
            return Err(Error::dim(format!(
                "bias of length {} for {cols} columns",
                b.len()
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Scales each row of `a` by the matching entry of the column `col[B×1]`.
    pub fn mul_col(&mut self, col: Var, a: Var) -> Result<Var> {
        let (c, x) = (self.value(col), self.value(a));
        if c.len() != x.rows() {
            return Err(Error::dim("mul_col needs one scale per row"));
        }
        let cols = x.cols();
        let mut out = x.clone();
        for (row, &s) in out.data_mut().chunks_mut(cols).zip(c.data()) {
            for o in row {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(col, a)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::matrix(rows, total, out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() || len == 0 {
            return Err(Error::dim("slice_cols out of range"));
        }
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = Tensor::matrix(rows, len, out)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Row lookup `table[ids[b]]`, one output row per id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::dim(format!("gather index {id} outside {n} rows")));
            }
            out.extend_from_slice(t.row(id));
        }
        let v = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(v, Op::Gather(table, ids.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = x.clone();
        for (o, row) in out.data_mut().chunks_mut(cols).zip(x.data().chunks(cols)) {
            softmax_into(row, o);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Weighted cross-entropy `Σ_b w_b · (−ln softmax(logits_b)[target_b])`.
    /// Rows with zero weight contribute neither loss nor gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let x = self.value(logits);
        let (rows, cols) = (x.rows(), x.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::dim(
                "cross-entropy needs one target and weight per row",
            ));
        }
        let mut probs = x.clone();
        let mut loss = 0.0;
        for (r, o) in probs.data_mut().chunks_mut(cols).enumerate() {
            softmax_into(x.row(r), o);
            if weights[r] != 0.0 {
                if targets[r] >= cols {
                    return Err(Error::dim("cross-entropy target outside vocabulary"));
                }
                loss -= weights[r] * o[targets[r]].ln();
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Propagates d(loss)/d(node) back through every recorded operation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::AddRow(a, bias) => {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *bias, Tensor::new(shape, db)?)?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |d, y| d * y)?;
                    let db = g.zip_map(self.value(*a), |d, x| d * x)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MulCol(col, a) => {
                    let c = self.value(*col);
                    let x = self.value(*a);
                    let cols = x.cols();
                    let mut dc = vec![0.0; c.len()];
                    let mut da = g.clone();
                    for (r, (drow, xrow)) in da
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(x.data().chunks(cols))
                        .enumerate()
                    {
                        let s = c.data()[r];
                        let mut acc = 0.0;
                        for (d, &xv) in drow.iter_mut().zip(xrow) {
                            acc += *d * xv;
                            *d *= s;
                        }
                        dc[r] = acc;
                    }
                    let shape = c.shape().to_vec();
                    accumulate(&mut grads, *col, Tensor::new(shape, dc)?)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.map(|d| d * s))?;
                }
                Op::Sigmoid(a) => {
                    let da = g.zip_map(&node.value, |d, y| d * y * (1.0 - y))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Tanh(a) => {
                    let da = g.zip_map(&node.value, |d, y| d * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads, p, Tensor::matrix(rows, w, d)?)?;
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let (rows, cols, w) = (x.rows(), x.cols(), g.cols());
                    let mut d = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        d.data_mut()[r * cols + start..r * cols + start + w]
                            .copy_from_slice(g.row(r));
                    }
                    let d = d.reshape(x.shape().to_vec())?;
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut dt = Tensor::zeros(&[t.rows(), d]);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(g.row(r))
                        {
                            *o += v;
                        }
                    }
                    let dt = dt.reshape(t.shape().to_vec())?;
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut da = g.clone();
                    for (drow, yrow) in da.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for (d, &yv) in drow.iter_mut().zip(yrow) {
                            *d = yv * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::filled(&shape, s))?;
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let s = g.data()[0];
                    let cols = probs.cols();
                    let mut d = probs.clone();
                    for (r, row) in d.data_mut().chunks_mut(cols).enumerate() {
                        let w = weights[r] * s;
                        if w == 0.0 {
                            row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        for v in row.iter_mut() {
                            *v *= w;
                        }
                        row[targets[r]] -= w;
                    }
                    accumulate(&mut grads, *logits, d)?;
                }
            }
        }

        let mut by_param = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                by_param.push((id, idx));
            }
        }
        Ok(Gradients { grads, by_param })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    by_param: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of a leaf node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Summed gradient of every node registered under parameter `id`.
    pub fn param(&self, id: usize) -> Option<Tensor> {
        let mut total: Option<Tensor> = None;
        for &(pid, node) in &self.by_param {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut total {
                    Some(t) => t.add_assign(g).expect("parameter shapes agree"),
                    None => total = Some(g.clone()),
                }
            }
        }
        total
    }
}
