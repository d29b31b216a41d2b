//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation eagerly: each call computes its output
//! value immediately and appends a node describing how to push gradients back
//! to its inputs. Nodes are only ever appended, so node ids are already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use seqlabel_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = tape.sum(x);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, matrix_dims, Tensor};

/// Epsilon inside the RMS normalisation square root.
pub const RMS_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
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
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Vec<f64>>),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Gather { table: Var, idx: Arc<Vec<usize>> },
    GatherRows { x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    SumRows(Var),
    Reshape(Var),
    Bce { logits: Var, targets: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input value. Gradients are tracked for every leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Loads a parameter onto the tape, reusing the node if it was already
    /// loaded so that gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul_bt")?;
        let (n, k2) = matrix_dims(self.value(b), "matmul_bt")?;
        if k != k2 {
            return Err(self.shape_err("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(b).len() != cols {
            return Err(self.shape_err("add_row", x, b));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, v) in row.iter_mut().zip(bias) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
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
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant (no gradient flows into `c`).
    pub fn mul_const(&mut self, x: Var, c: Arc<Vec<f64>>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = self.value(x).data().iter().zip(c.iter()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(x, c)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows_value(self.value(x), None).expect("unmasked rows are never empty");
        self.push(out, Op::Softmax(x))
    }

    /// Row-wise softmax where entries with `allowed[i] == false` receive
    /// exactly zero weight. Every row must allow at least one entry.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "masked_softmax_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let out = softmax_rows_value(self.value(x), Some(allowed))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Divides each row by its root-mean-square (plus [`RMS_EPS`]) and
    /// scales by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d {
            return Err(self.shape_err("rms_norm", x, gain));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            for (o, gi) in row.iter_mut().zip(g) {
                *o *= inv * gi;
            }
            inv_rms.push(inv);
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Picks flat elements of `table` into a tensor of the given shape.
    pub fn gather(&mut self, table: Var, idx: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            data.push(*src.get(i).ok_or(Error::Index {
                index: i,
                size: src.len(),
                context: "gather",
            })?);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather { table, idx }))
    }

    /// Selects rows of a matrix, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (m, n) = matrix_dims(src, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one row".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index {
                    index: r,
                    size: m,
                    context: "gather_rows",
                });
            }
            data.extend_from_slice(src.row(r));
        }
        let out = Tensor::matrix(rows.len(), n, data)?;
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::Contract(format!(
                "column slice {start}..{} outside {n} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one input".into()))?;
        let (m, _) = matrix_dims(self.value(first), "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = matrix_dims(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(self.shape_err("concat_cols", first, p));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Sums each row of a matrix into a vector.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data: Vec<f64> = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let out = Tensor::vector(data).expect("at least one row");
        self.push(out, Op::SumRows(x))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Drops every node recorded after the first `len`, so a tape can be
    /// reused for repeated forward passes that share a prefix.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
    }

    /// Mean binary cross-entropy between `logits` and 0/1 `targets`, using
    /// `max(z,0) - z·t + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Contract(format!("binary target expected, got {t}")));
        }
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / z.len() as f64);
        Ok(self.push(
            out,
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean token cross-entropy of `logits: T×V` against `targets`, counting
    /// only positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = matrix_dims(self.value(logits), "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy with every position masked".into()));
        }
        let z = self.value(logits);
        let mut total = 0.0;
        let mut weights = Vec::with_capacity(t);
        for (i, (&target, &keep)) in targets.iter().zip(mask).enumerate() {
            if target >= v {
                return Err(Error::Index {
                    index: target,
                    size: v,
                    context: "cross_entropy target",
                });
            }
            if keep {
                let row = z.row(i);
                total += log_sum_exp(row) - row[target];
                weights.push(1.0 / count as f64);
            } else {
                weights.push(0.0);
            }
        }
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
            },
        ))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Propagates gradients from a scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            self.backward_node(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let ga = grad_slot(grads, *a, av.shape());
                gemm(m, n, k, dy.data(), false, bv.data(), true, ga.data_mut(), true);
                let gb = grad_slot(grads, *b, bv.shape());
                gemm(k, m, n, av.data(), true, dy.data(), false, gb.data_mut(), true);
            }
            Op::MatMulBt(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                let ga = grad_slot(grads, *a, av.shape());
                gemm(m, n, k, dy.data(), false, bv.data(), false, ga.data_mut(), true);
                let gb = grad_slot(grads, *b, bv.shape());
                gemm(n, m, k, dy.data(), true, av.data(), false, gb.data_mut(), true);
            }
            Op::Add(a, b) => {
                grad_slot(grads, *a, dy.shape()).add_assign(dy);
                grad_slot(grads, *b, dy.shape()).add_assign(dy);
            }
            Op::AddRow(x, b) => {
                grad_slot(grads, *x, dy.shape()).add_assign(dy);
                let cols = dy.cols();
                let gb = grad_slot(grads, *b, self.shape(*b));
                for row in dy.data().chunks(cols) {
                    for (g, d) in gb.data_mut().iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = grad_slot(grads, *a, dy.shape());
                for ((g, d), bb) in ga.data_mut().iter_mut().zip(dy.data()).zip(bv) {
                    *g += d * bb;
                }
                let gb = grad_slot(grads, *b, dy.shape());
                for ((g, d), aa) in gb.data_mut().iter_mut().zip(dy.data()).zip(av) {
                    *g += d * aa;
                }
            }
            Op::MulConst(x, c) => {
                let gx = grad_slot(grads, *x, dy.shape());
                for ((g, d), cc) in gx.data_mut().iter_mut().zip(dy.data()).zip(c.iter()) {
                    *g += d * cc;
                }
            }
            Op::Scale(x, s) => {
                let gx = grad_slot(grads, *x, dy.shape());
                for (g, d) in gx.data_mut().iter_mut().zip(dy.data()) {
                    *g += d * s;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = grad_slot(grads, *x, dy.shape());
                for ((g, d), xi) in gx.data_mut().iter_mut().zip(dy.data()).zip(xv) {
                    if *xi > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = y.cols();
                let gx = grad_slot(grads, *x, dy.shape());
                for ((g, d), yr) in gx
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(dy.data().chunks(cols))
                    .zip(y.data().chunks(cols))
                {
                    let dot: f64 = d.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((gi, di), yi) in g.iter_mut().zip(d).zip(yr) {
                        *gi += yi * (di - dot);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data().to_vec();
                let d = xv.cols();
                let mut dgain = vec![0.0; d];
                let mut dx = vec![0.0; xv.len()];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let dr = &dy.data()[r * d..(r + 1) * d];
                    // dxn = dy * gain; dx = inv * (dxn - xn * mean(dxn * xn))
                    let mut dot = 0.0;
                    for j in 0..d {
                        let xn = xr[j] * inv;
                        dgain[j] += dr[j] * xn;
                        dot += dr[j] * gv[j] * xn;
                    }
                    dot /= d as f64;
                    for j in 0..d {
                        let xn = xr[j] * inv;
                        dx[r * d + j] = inv * (dr[j] * gv[j] - xn * dot);
                    }
                }
                for (g, v) in grad_slot(grads, *x, xv.shape()).data_mut().iter_mut().zip(&dx) {
                    *g += v;
                }
                let gshape = self.shape(*gain).to_vec();
                for (g, v) in grad_slot(grads, *gain, &gshape).data_mut().iter_mut().zip(&dgain) {
                    *g += v;
                }
            }
            Op::Gather { table, idx } => {
                let gt = grad_slot(grads, *table, self.shape(*table));
                let gd = gt.data_mut();
                for (&i, d) in idx.iter().zip(dy.data()) {
                    gd[i] += d;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = dy.cols();
                let gx = grad_slot(grads, *x, self.shape(*x));
                let gd = gx.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for (g, d) in gd[r * n..(r + 1) * n].iter_mut().zip(dy.row(i)) {
                        *g += d;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = dy.cols();
                let n = self.value(*x).cols();
                let gx = grad_slot(grads, *x, self.shape(*x));
                let gd = gx.data_mut();
                for r in 0..dy.rows() {
                    for (g, d) in gd[r * n + start..r * n + start + len].iter_mut().zip(dy.row(r)) {
                        *g += d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = dy.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let gp = grad_slot(grads, *p, self.shape(*p));
                    let gd = gp.data_mut();
                    for r in 0..dy.rows() {
                        let src = &dy.data()[r * total + offset..r * total + offset + w];
                        for (g, d) in gd[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *g += d;
                        }
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                let dt = dy.transpose().expect("transpose output is a matrix");
                grad_slot(grads, *x, self.shape(*x)).add_assign(&dt);
            }
            Op::Sum(x) => {
                let d = dy.data()[0];
                for g in grad_slot(grads, *x, self.shape(*x)).data_mut() {
                    *g += d;
                }
            }
            Op::SumRows(x) => {
                let n = self.value(*x).cols();
                let gx = grad_slot(grads, *x, self.shape(*x));
                for (row, d) in gx.data_mut().chunks_mut(n).zip(dy.data()) {
                    for g in row {
                        *g += d;
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = grad_slot(grads, *x, self.shape(*x));
                for (g, d) in gx.data_mut().iter_mut().zip(dy.data()) {
                    *g += d;
                }
            }
            Op::Bce { logits, targets } => {
                let scale = dy.data()[0] / targets.len() as f64;
                let z = self.value(*logits).data().to_vec();
                let gz = grad_slot(grads, *logits, self.shape(*logits));
                for ((g, zi), ti) in gz.data_mut().iter_mut().zip(&z).zip(targets) {
                    *g += scale * (sigmoid(*zi) - ti);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let upstream = dy.data()[0];
                let z = self.value(*logits);
                let v = z.cols();
                let probs = softmax_rows_value(z, None).expect("logit rows are never empty");
                let gz = grad_slot(grads, *logits, self.shape(*logits));
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row = &mut gz.data_mut()[i * v..(i + 1) * v];
                    for (j, g) in row.iter_mut().enumerate() {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        *g += upstream * w * (probs.get2(i, j) - onehot);
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of a single row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

fn softmax_rows_value(x: &Tensor, allowed: Option<&[bool]>) -> Result<Tensor> {
    let cols = x.cols();
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
        let mask = allowed.map(|a| &a[r * cols..(r + 1) * cols]);
        let keep = |j: usize| mask.map_or(true, |m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            if keep(j) && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Contract(format!("softmax row {r} has every entry masked")));
        }
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if keep(j) { (*v - max).exp() } else { 0.0 };
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// One gradient per parameter in `store`, zero where the loss does not
    /// depend on it.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn random(rng: &mut Prng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Central finite differences of `f` around `x`, compared with the
    /// gradient from the tape.
    fn check_grad(x0: &Tensor, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = f(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(x).unwrap().clone();
        let h = 1e-4;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut p = x0.clone();
                p.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.leaf(p);
                let l = f(&mut t, v);
                t.value(l).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let g = analytic.data()[i];
            let rel = (g - numeric).abs() / 1f64.max(g.abs()).max(numeric.abs());
            assert!(rel < 1e-6, "coordinate {i}: analytic {g} numeric {numeric}");
        }
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut rng = Prng::new(1);
        let b = random(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let i3 = tape.leaf(Tensor::eye(3));
        let bv = tape.leaf(b.clone());
        let out = tape.matmul(i3, bv).unwrap();
        assert_eq!(tape.value(out), &b);

        let z = tape.leaf(Tensor::zeros(&[2, 3]));
        let out = tape.matmul(z, bv).unwrap();
        assert_eq!(tape.value(out), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Prng::new(2);
        let a = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[3, 2]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.get2(i, k) * b.get2(k, j);
                }
                assert!((tape.value(c).get2(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![0.0, 3f64.ln(), 5.0, 5.0]).unwrap());
        let y = tape.softmax_rows(x);
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        assert!((v[2] - 0.5).abs() < 1e-15 && (v[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = Prng::new(3);
        let base = random(&mut rng, &[3, 5]);
        let mut tape = Tape::new();
        let x = tape.leaf(base.clone());
        let shifted = tape.leaf(base.map(|v| v + 17.5));
        let a = tape.softmax_rows(x);
        let b = tape.softmax_rows(shifted);
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
        for r in 0..3 {
            assert!((tape.value(a).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.masked_softmax_rows(x, &[true, false, false, false]).is_err());
    }

    #[test]
    fn rms_norm_properties() {
        let mut rng = Prng::new(4);
        let mut tape = Tape::new();
        let ones = tape.leaf(Tensor::ones(&[2, 8]));
        let gain = tape.leaf(Tensor::ones(&[8]));
        let y = tape.rms_norm(ones, gain).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0).abs() < 1e-6);
        }

        // mean square ~1e4 so the epsilon term stays below 1e-9 relative
        let x = random(&mut rng, &[3, 8]).map(|v| v * 100.0);
        let g = random(&mut rng, &[8]);
        let xv = tape.leaf(x.clone());
        let xs = tape.leaf(x.map(|v| v * 4.0));
        let gv = tape.leaf(g.clone());
        let a = tape.rms_norm(xv, gv).unwrap();
        let b = tape.rms_norm(xs, gv).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((p - q).abs() < 1e-9);
        }
        // direct formula
        for r in 0..3 {
            let row = x.row(r);
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 8.0 + 1e-6).sqrt();
            for j in 0..8 {
                let expect = row[j] / rms * g.data()[j];
                assert!((tape.value(a).get2(r, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bce_reference_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[4]));
        let l = tape.bce_with_logits(z, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);

        let z = tape.leaf(Tensor::full(&[3], 20.0));
        let l = tape.bce_with_logits(z, &[1.0, 1.0, 1.0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-8);
        assert!(tape.bce_with_logits(z, &[1.0, 0.5, 1.0]).is_err());
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut rng = Prng::new(5);
        let logits = random(&mut rng, &[7]);
        let targets: Vec<f64> = (0..7).map(|i| (i % 2) as f64).collect();
        let mut tape = Tape::new();
        let z = tape.leaf(logits.clone());
        let l = tape.bce_with_logits(z, &targets).unwrap();
        let naive: f64 = logits
            .data()
            .iter()
            .zip(&targets)
            .map(|(z, t)| {
                let p = (1.0 / (1.0 + (-z).exp())).clamp(1e-12, 1.0 - 1e-12);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 7.0;
        assert!((tape.value(l).data()[0] - naive).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[2, 4]));
        let l = tape.cross_entropy(z, &[1, 3], &[true, true]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

        let mut peaked = Tensor::zeros(&[1, 4]);
        peaked.data_mut()[2] = 20.0;
        let z = tape.leaf(peaked);
        let l = tape.cross_entropy(z, &[2], &[true]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-8);
        assert!(matches!(
            tape.cross_entropy(z, &[4], &[true]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_explicit_softmax() {
        let mut rng = Prng::new(6);
        let logits = random(&mut rng, &[3, 5]);
        let targets = [4, 0, 2];
        let mut tape = Tape::new();
        let z = tape.leaf(logits.clone());
        let l = tape.cross_entropy(z, &targets, &[true, false, true]).unwrap();
        let mut expect = 0.0;
        for &r in &[0usize, 2] {
            let row = logits.row(r);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[targets[r]].exp() / denom).max(1e-12).ln();
        }
        expect /= 2.0;
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gradient_is_ones_and_unused_leaf_has_none() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let unused = tape.leaf(Tensor::zeros(&[2]));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(g.wrt(unused).is_none());
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = Prng::new(7);
        let w = random(&mut rng, &[4, 3]);
        let gain = random(&mut rng, &[3]);
        let bias = random(&mut rng, &[3]);
        let x0 = random(&mut rng, &[5, 4]);
        let allowed: Vec<bool> = (0..25).map(|i| i % 5 <= i / 5).collect();
        check_grad(&x0, |t, x| {
            let w = t.leaf(w.clone());
            let gain = t.leaf(gain.clone());
            let bias = t.leaf(bias.clone());
            let h = t.matmul(x, w).unwrap();
            let h = t.add_row(h, bias).unwrap();
            let h = t.rms_norm(h, gain).unwrap();
            let r = t.relu(h);
            let s = t.matmul_bt(r, h).unwrap();
            let p = t.masked_softmax_rows(s, &allowed).unwrap();
            let a = t.matmul(p, h).unwrap();
            let left = t.slice_cols(a, 0, 2).unwrap();
            let right = t.slice_cols(a, 2, 1).unwrap();
            let c = t.concat_cols(&[right, left]).unwrap();
            let c = t.transpose(c).unwrap();
            let c = t.scale(c, 0.7);
            let rows = t.gather_rows(c, &[2, 0, 2]).unwrap();
            let logits = t.sum_rows(rows);
            t.bce_with_logits(logits, &[1.0, 0.0, 1.0]).unwrap()
        });
        let table = random(&mut rng, &[6, 4]);
        check_grad(&table, |t, x| {
            let e = t.gather_rows(x, &[5, 1, 1, 3]).unwrap();
            let b = t.gather(x, Arc::new(vec![0, 7, 7, 23]), vec![4]).unwrap();
            let m = t.mul(e, e).unwrap();
            let m = t.mul_const(m, Arc::new((0..16).map(|i| i as f64 * 0.1).collect())).unwrap();
            let rows = t.sum_rows(m);
            let rows = t.add(rows, b).unwrap();
            let logits = t.transpose(e).unwrap();
            let ce = t.cross_entropy(logits, &[0, 3, 2, 1], &[true, true, false, true]).unwrap();
            let s = t.sum(rows);
            let s = t.scale(s, 0.01);
            t.add(ce, s).unwrap()
        });
    }
}
