//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Tape`] is an append-only arena of nodes; every operation computes its
//! value eagerly and records which nodes it read. [`Tape::backward`] sweeps
//! the arena once in reverse, accumulating adjoints. Gradient accumulators
//! are freshly zeroed on every call, so repeated backward passes over the
//! same graph give identical results.
//!
//! A tape built with [`Tape::inference`] computes values but records no
//! parent structure; it is the cheap path for rollouts that never need
//! gradients.
//!
//! Masks are boolean slices in row-major order of the masked array, with
//! `true` meaning *kept*. Masked entries enter the softmax as negative
//! infinity; that is the only place a non-finite value is ever produced, and
//! it never escapes: masked probabilities come out as exact zeros.

use crate::array::{self, Array};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-feature batch statistics produced by a train-mode batchnorm, for the
/// caller to fold into running statistics.
#[derive(Clone, Debug)]
pub struct BnBatch {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    SumAll(usize),
    MeanRows(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { src: usize, start: usize },
    SliceRows { src: usize, start: usize },
    SelectRow { src: usize, row: usize },
    Softmax { src: usize },
    LogProbAt { src: usize, probs: Vec<f64>, index: usize },
    BnTrain { src: usize, w: usize, b: usize, x_hat: Array, inv_std: Vec<f64> },
    BnEval { src: usize, w: usize, b: usize, x_hat: Array, inv_std: Vec<f64> },
}

struct Node {
    value: Array,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    record: bool,
}

impl Tape {
    /// A tape that records parents and supports [`Tape::backward`].
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), record: true }
    }

    /// A value-only tape; backward on it is a contract error.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), record: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records_gradients(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Current length, for a later [`Tape::truncate`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node from `mark` on, freeing their values. Nodes only
    /// ever reference earlier nodes, so cutting a suffix leaves a
    /// consistent graph; handles into the cut region become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.grads.truncate(mark);
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.leaf(Array::scalar(value))
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if (ar, ac) != (br, bc) {
            return Err(Error::Shape(format!("{name} {ar}x{ac} vs {br}x{bc}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b))?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let (r, c) = self.value(a).shape();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Array::from_vec(r, c, data)?, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let (r, c) = self.value(a).shape();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Array::from_vec(r, c, data)?, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    /// Adds row vector `b` (`1 x d`) to every row of `a` (`n x d`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if br != 1 || bc != ac {
            return Err(Error::Shape(format!("add_row expects 1x{ac}, got {br}x{bc}")));
        }
        let mut v = self.value(a).clone();
        let brow: Vec<f64> = self.value(b).data().to_vec();
        for r in 0..v.rows() {
            for (o, x) in v.row_mut(r).iter_mut().zip(&brow) {
                *o += x;
            }
        }
        Ok(self.push(v, Op::AddRow(a.0, b.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = array::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    /// `a @ b^T`; the workhorse for all linear projections.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = array::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNT(a.0, b.0)))
    }

    /// `x @ w^T + b` with `w` of shape `out x in` and `b` of shape `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul_nt(x, w)?;
        self.add_row(h, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Array::scalar(s), Op::SumAll(a.0))
    }

    /// Column means: `n x d` to `1 x d`, summing rows in index order.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, d) = x.shape();
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let v = Array::from_vec(1, d, out).expect("nonempty");
        self.push(v, Op::MeanRows(a.0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape("concat_cols row mismatch".into()));
            }
            cols += self.value(p).cols();
        }
        let mut out = Array::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let x = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[at..at + x.cols()].copy_from_slice(x.row(r));
            }
            at += x.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|v| v.0).collect())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != cols {
                return Err(Error::Shape("concat_rows column mismatch".into()));
            }
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        let out = Array::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|v| v.0).collect())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if len == 0 || start + len > cols {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) of {cols} columns",
                start + len
            )));
        }
        let mut out = Array::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { src: a.0, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if len == 0 || start + len > rows {
            return Err(Error::Shape(format!(
                "slice_rows [{start}, {}) of {rows} rows",
                start + len
            )));
        }
        let data = x.data()[start * cols..(start + len) * cols].to_vec();
        let out = Array::from_vec(len, cols, data)?;
        Ok(self.push(out, Op::SliceRows { src: a.0, start }))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let x = self.value(a);
        if row >= x.rows() {
            return Err(Error::Shape(format!("row {row} of {}", x.rows())));
        }
        let out = Array::from_vec(1, x.cols(), x.row(row).to_vec())?;
        Ok(self.push(out, Op::SelectRow { src: a.0, row }))
    }

    /// Softmax over the last axis, independently per row. Entries with a
    /// `false` mask are treated as negative infinity and come out as exact
    /// zeros. A row with nothing kept is an invalid mask.
    pub fn softmax_last(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(Error::Shape(format!(
                    "mask of {} entries over {} values",
                    m.len(),
                    x.len()
                )));
            }
        }
        let (rows, cols) = x.shape();
        let mut out = Array::zeros(rows, cols);
        for r in 0..rows {
            let row_mask = mask.map(|m| &m[r * cols..(r + 1) * cols]);
            let probs = softmax_row(x.row(r), row_mask)?;
            out.row_mut(r).copy_from_slice(&probs);
        }
        Ok(self.push(out, Op::Softmax { src: a.0 }))
    }

    /// Log-probability of entry `index` under the masked softmax of a single
    /// row of logits. The index must be kept by the mask.
    pub fn log_prob_at(&mut self, a: Var, mask: &[bool], index: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(Error::Shape(format!("log_prob_at expects 1 row, got {}", x.rows())));
        }
        if mask.len() != x.cols() {
            return Err(Error::Shape(format!(
                "mask of {} entries over {} logits",
                mask.len(),
                x.cols()
            )));
        }
        if index >= x.cols() || !mask[index] {
            return Err(Error::InvalidMask(format!("index {index} is not a kept entry")));
        }
        let row = x.row(0);
        let max = masked_max(row, Some(mask))?;
        let mut total = 0.0;
        for (v, &keep) in row.iter().zip(mask) {
            if keep {
                total += (v - max).exp();
            }
        }
        let logp = row[index] - max - total.ln();
        let probs = softmax_row(row, Some(mask))?;
        Ok(self.push(Array::scalar(logp), Op::LogProbAt { src: a.0, probs, index }))
    }

    /// Train-mode batch normalization over the rows of `x`, per feature,
    /// with affine parameters `w` and `b` (both `1 x d`). Returns the output
    /// and the batch statistics for the caller's running estimates.
    pub fn batchnorm_train(&mut self, x: Var, w: Var, b: Var, eps: f64) -> Result<(Var, BnBatch)> {
        let (n, d) = self.value(x).shape();
        self.check_bn_params(w, b, d)?;
        let xv = self.value(x);
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (j, v) in xv.row(r).iter().enumerate() {
                let c = v - mean[j];
                var[j] += c * c;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = Array::zeros(n, d);
        for r in 0..n {
            for j in 0..d {
                x_hat.set(r, j, (xv.get(r, j) - mean[j]) * inv_std[j]);
            }
        }
        let out = self.bn_affine(&x_hat, w, b);
        let op = if self.record {
            Op::BnTrain { src: x.0, w: w.0, b: b.0, x_hat, inv_std }
        } else {
            Op::Leaf
        };
        let out_var = self.push(out, op);
        Ok((out_var, BnBatch { mean, var }))
    }

    /// Eval-mode batch normalization: normalizes with the provided running
    /// statistics instead of batch statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, d) = self.value(x).shape();
        self.check_bn_params(w, b, d)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(Error::Shape(format!(
                "running statistics of {}/{} entries over {d} features",
                running_mean.len(),
                running_var.len()
            )));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let mut x_hat = Array::zeros(n, d);
        for r in 0..n {
            for j in 0..d {
                x_hat.set(r, j, (xv.get(r, j) - running_mean[j]) * inv_std[j]);
            }
        }
        let out = self.bn_affine(&x_hat, w, b);
        let op = if self.record {
            Op::BnEval { src: x.0, w: w.0, b: b.0, x_hat, inv_std }
        } else {
            Op::Leaf
        };
        Ok(self.push(out, op))
    }

    fn check_bn_params(&self, w: Var, b: Var, d: usize) -> Result<()> {
        for (name, v) in [("weight", w), ("bias", b)] {
            let (r, c) = self.value(v).shape();
            if r != 1 || c != d {
                return Err(Error::Shape(format!("batchnorm {name} {r}x{c}, expected 1x{d}")));
            }
        }
        Ok(())
    }

    fn bn_affine(&self, x_hat: &Array, w: Var, b: Var) -> Array {
        let (n, d) = x_hat.shape();
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = Array::zeros(n, d);
        for r in 0..n {
            for j in 0..d {
                out.set(r, j, wv.get(0, j) * x_hat.get(r, j) + bv.get(0, j));
            }
        }
        out
    }

    /// Reverse sweep from a scalar root. Accumulators are zeroed first, so
    /// calling backward repeatedly on the same root is idempotent.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.record {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if !self.value(root).is_scalar() {
            let (r, c) = self.value(root).shape();
            return Err(Error::Contract(format!("backward root must be scalar, got {r}x{c}")));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[root.0] = Some(Array::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            propagate(&self.nodes, &mut self.grads, id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn acc(grads: &mut [Option<Array>], parent: usize, delta: Array) {
    match &mut grads[parent] {
        Some(g) => g.add_assign(&delta).expect("adjoint shape matches value shape"),
        slot => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Array>], id: usize, g: &Array) -> Result<()> {
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            acc(grads, a, g.clone());
            acc(grads, b, g.clone());
        }
        &Op::Sub(a, b) => {
            acc(grads, a, g.clone());
            acc(grads, b, g.map(|v| -v));
        }
        &Op::Mul(a, b) => {
            acc(grads, a, elemwise(g, nodes[b].value.data(), |x, y| x * y));
            acc(grads, b, elemwise(g, nodes[a].value.data(), |x, y| x * y));
        }
        &Op::Scale(a, c) => {
            acc(grads, a, g.map(|v| v * c));
        }
        &Op::AddRow(a, b) => {
            let d = g.cols();
            let mut db = vec![0.0; d];
            for r in 0..g.rows() {
                for (o, v) in db.iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            acc(grads, a, g.clone());
            acc(grads, b, Array::from_vec(1, d, db)?);
        }
        &Op::MatMul(a, b) => {
            acc(grads, a, array::matmul_nt(g, &nodes[b].value)?);
            acc(grads, b, array::matmul_tn(&nodes[a].value, g)?);
        }
        &Op::MatMulNT(a, b) => {
            acc(grads, a, array::matmul(g, &nodes[b].value)?);
            acc(grads, b, array::matmul_tn(g, &nodes[a].value)?);
        }
        &Op::Relu(a) => {
            let da = elemwise(g, nodes[a].value.data(), |gv, x| if x > 0.0 { gv } else { 0.0 });
            acc(grads, a, da);
        }
        &Op::Tanh(a) => {
            let da = elemwise(g, nodes[id].value.data(), |gv, y| gv * (1.0 - y * y));
            acc(grads, a, da);
        }
        &Op::Exp(a) => {
            let da = elemwise(g, nodes[id].value.data(), |gv, y| gv * y);
            acc(grads, a, da);
        }
        &Op::Ln(a) => {
            let da = elemwise(g, nodes[a].value.data(), |gv, x| gv / x);
            acc(grads, a, da);
        }
        &Op::SumAll(a) => {
            let gv = g.data()[0];
            let (r, c) = nodes[a].value.shape();
            acc(grads, a, Array::full(r, c, gv));
        }
        &Op::MeanRows(a) => {
            let (n, d) = nodes[a].value.shape();
            let mut da = Array::zeros(n, d);
            let grow: Vec<f64> = g.row(0).iter().map(|v| v / n as f64).collect();
            for r in 0..n {
                da.row_mut(r).copy_from_slice(&grow);
            }
            acc(grads, a, da);
        }
        Op::ConcatCols(parts) => {
            let rows = g.rows();
            let mut at = 0;
            for &p in parts {
                let cols = nodes[p].value.cols();
                let mut dp = Array::zeros(rows, cols);
                for r in 0..rows {
                    dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                }
                at += cols;
                acc(grads, p, dp);
            }
        }
        Op::ConcatRows(parts) => {
            let cols = g.cols();
            let mut at = 0;
            for &p in parts {
                let rows = nodes[p].value.rows();
                let data = g.data()[at * cols..(at + rows) * cols].to_vec();
                at += rows;
                acc(grads, p, Array::from_vec(rows, cols, data)?);
            }
        }
        &Op::SliceCols { src, start } => {
            let (rows, cols) = nodes[src].value.shape();
            let mut da = Array::zeros(rows, cols);
            for r in 0..rows {
                da.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
            }
            acc(grads, src, da);
        }
        &Op::SliceRows { src, start } => {
            let (rows, cols) = nodes[src].value.shape();
            let mut da = Array::zeros(rows, cols);
            da.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
            acc(grads, src, da);
        }
        &Op::SelectRow { src, row } => {
            let (rows, cols) = nodes[src].value.shape();
            let mut da = Array::zeros(rows, cols);
            da.row_mut(row).copy_from_slice(g.row(0));
            acc(grads, src, da);
        }
        &Op::Softmax { src } => {
            let y = &nodes[id].value;
            let (rows, cols) = y.shape();
            let mut da = Array::zeros(rows, cols);
            for r in 0..rows {
                let s = array::dot(g.row(r), y.row(r));
                for j in 0..cols {
                    da.set(r, j, y.get(r, j) * (g.get(r, j) - s));
                }
            }
            acc(grads, src, da);
        }
        Op::LogProbAt { src, probs, index } => {
            let gv = g.data()[0];
            let data: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(j, &p)| gv * ((j == *index) as u8 as f64 - p))
                .collect();
            let cols = data.len();
            acc(grads, *src, Array::from_vec(1, cols, data)?);
        }
        Op::BnTrain { src, w, b, x_hat, inv_std } => {
            let (n, d) = x_hat.shape();
            let wv = &nodes[*w].value;
            let mut dw = vec![0.0; d];
            let mut db = vec![0.0; d];
            let mut s1 = vec![0.0; d];
            let mut s2 = vec![0.0; d];
            for r in 0..n {
                for j in 0..d {
                    let gy = g.get(r, j);
                    let xh = x_hat.get(r, j);
                    dw[j] += gy * xh;
                    db[j] += gy;
                    let dxh = gy * wv.get(0, j);
                    s1[j] += dxh;
                    s2[j] += dxh * xh;
                }
            }
            let m = n as f64;
            let mut dx = Array::zeros(n, d);
            for r in 0..n {
                for j in 0..d {
                    let dxh = g.get(r, j) * wv.get(0, j);
                    dx.set(r, j, inv_std[j] / m * (m * dxh - s1[j] - x_hat.get(r, j) * s2[j]));
                }
            }
            acc(grads, *src, dx);
            acc(grads, *w, Array::from_vec(1, d, dw)?);
            acc(grads, *b, Array::from_vec(1, d, db)?);
        }
        Op::BnEval { src, w, b, x_hat, inv_std } => {
            let (n, d) = x_hat.shape();
            let wv = &nodes[*w].value;
            let mut dw = vec![0.0; d];
            let mut db = vec![0.0; d];
            let mut dx = Array::zeros(n, d);
            for r in 0..n {
                for j in 0..d {
                    let gy = g.get(r, j);
                    dw[j] += gy * x_hat.get(r, j);
                    db[j] += gy;
                    dx.set(r, j, gy * wv.get(0, j) * inv_std[j]);
                }
            }
            acc(grads, *src, dx);
            acc(grads, *w, Array::from_vec(1, d, dw)?);
            acc(grads, *b, Array::from_vec(1, d, db)?);
        }
    }
    Ok(())
}

fn elemwise(g: &Array, other: &[f64], f: impl Fn(f64, f64) -> f64) -> Array {
    let data = g.data().iter().zip(other).map(|(&gv, &ov)| f(gv, ov)).collect();
    Array::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

fn masked_max(row: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if mask.map_or(true, |m| m[j]) {
            best = best.max(v);
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::InvalidMask("softmax row with nothing kept".into()));
    }
    Ok(best)
}

/// Masked softmax of one row of logits; masked entries are exact zeros.
pub fn softmax_row(row: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let max = masked_max(row, mask)?;
    let mut out = vec![0.0; row.len()];
    let mut total = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if mask.map_or(true, |m| m[j]) {
            let e = (v - max).exp();
            out[j] = e;
            total += e;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

/// Largest scaled deviation between `analytic` and a central-difference
/// estimate of the gradient of `f` at `x`, using step `1e-4` and scaling
/// each coordinate by `max(1, |estimate|)`.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&Array) -> Result<f64>,
    x: &Array,
    analytic: &Array,
) -> Result<f64> {
    if !x.same_shape(analytic) {
        return Err(Error::Shape(format!(
            "gradient {}x{} for point {}x{}",
            analytic.rows(),
            analytic.cols(),
            x.rows(),
            x.cols()
        )));
    }
    const H: f64 = 1e-4;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + H;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - H;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        let est = (fp - fm) / (2.0 * H);
        let err = (analytic.data()[i] - est).abs() / est.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_vec(tape: &Tape, v: Var) -> Vec<f64> {
        tape.grad(v).expect("gradient flowed").data().to_vec()
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]).unwrap());
        let b = tape.leaf(Array::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(c);
        tape.backward(s).unwrap();
        // d sum(A@B) / dA = ones @ B^T: every row holds the row sums of B.
        assert_eq!(grad_vec(&tape, a), vec![3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::row_vec(vec![0.3; 4]).unwrap());
        let y = tape.softmax_last(x, None).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_mask_zeroes_entries_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::row_vec(vec![5.0, 1.0, 3.0]).unwrap());
        let y = tape.softmax_last(x, Some(&[true, false, true])).unwrap();
        let p = tape.value(y).data();
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let e = (3.0f64 - 5.0).exp();
        assert!((p[2] - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::row_vec(vec![1.0, 2.0]).unwrap());
        let r = tape.softmax_last(x, Some(&[false, false]));
        assert!(matches!(r, Err(Error::InvalidMask(_))));
    }

    #[test]
    fn log_prob_gradient_is_onehot_minus_probs() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::row_vec(vec![0.2, -1.0, 0.7, 0.0]).unwrap());
        let mask = [true; 4];
        let lp = tape.log_prob_at(x, &mask, 2).unwrap();
        tape.backward(lp).unwrap();
        let probs = softmax_row(tape.value(x).row(0), Some(&mask)).unwrap();
        let g = grad_vec(&tape, x);
        for j in 0..4 {
            let want = (j == 2) as u8 as f64 - probs[j];
            assert!((g[j] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn log_prob_matches_softmax_log() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::row_vec(vec![1.0, -0.5, 0.25]).unwrap());
        let mask = [true, false, true];
        let lp = tape.log_prob_at(x, &mask, 0).unwrap();
        let probs = softmax_row(tape.value(x).row(0), Some(&mask)).unwrap();
        let direct = tape.value(lp).item().unwrap();
        assert!((direct - probs[0].ln()).abs() < 1e-12);
    }

    #[test]
    fn log_prob_rejects_masked_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::row_vec(vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.log_prob_at(x, &[true, false], 1),
            Err(Error::InvalidMask(_))
        ));
    }

    #[test]
    fn batchnorm_zero_variance_batch_returns_bias() {
        let mut tape = Tape::new();
        let rows = vec![4.0, -1.0, 4.0, -1.0, 4.0, -1.0];
        let x = tape.leaf(Array::from_vec(3, 2, rows).unwrap());
        let w = tape.leaf(Array::row_vec(vec![2.0, 0.5]).unwrap());
        let b = tape.leaf(Array::row_vec(vec![7.0, -3.0]).unwrap());
        let (y, stats) = tape.batchnorm_train(x, w, b, 1e-5).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(y).row(r), &[7.0, -3.0]);
        }
        assert_eq!(stats.mean, vec![4.0, -1.0]);
        assert_eq!(stats.var, vec![0.0, 0.0]);
    }

    #[test]
    fn batchnorm_eval_matches_direct_formula() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::from_vec(2, 1, vec![3.0, 5.0]).unwrap());
        let w = tape.leaf(Array::row_vec(vec![1.5]).unwrap());
        let b = tape.leaf(Array::row_vec(vec![0.25]).unwrap());
        let eps = 1e-5;
        let y = tape.batchnorm_eval(x, w, b, &[1.0], &[4.0], eps).unwrap();
        for (r, &xv) in [3.0, 5.0].iter().enumerate() {
            let want = 1.5 * (xv - 1.0) / (4.0f64 + eps).sqrt() + 0.25;
            assert!((tape.value(y).get(r, 0) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn batchnorm_train_statistics_are_batch_statistics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::from_vec(4, 1, vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let w = tape.leaf(Array::row_vec(vec![1.0]).unwrap());
        let b = tape.leaf(Array::row_vec(vec![0.0]).unwrap());
        let (_, stats) = tape.batchnorm_train(x, w, b, 1e-5).unwrap();
        assert!((stats.mean[0] - 3.0).abs() < 1e-15);
        // Population variance of {1,2,3,6} around 3.
        assert!((stats.var[0] - 3.5).abs() < 1e-15);
    }

    #[test]
    fn slice_rows_roundtrips_through_concat() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Array::from_vec(1, 2, vec![5.0, 6.0]).unwrap());
        let cat = tape.concat_rows(&[a, b]).unwrap();
        let back = tape.slice_rows(cat, 2, 1).unwrap();
        assert_eq!(tape.value(back).data(), &[5.0, 6.0]);
        // Gradient of sum(middle row) flows only to that row of the source.
        let mid = tape.slice_rows(cat, 1, 1).unwrap();
        let s = tape.sum_all(mid);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn truncate_reuses_the_prefix() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::scalar(3.0));
        let mark = tape.mark();
        let y = tape.tanh(x);
        let first = tape.value(y).item().unwrap();
        tape.truncate(mark);
        assert_eq!(tape.len(), mark);
        let y2 = tape.tanh(x);
        assert_eq!(tape.value(y2).item().unwrap(), first);
    }

    #[test]
    fn backward_twice_gives_identical_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::row_vec(vec![0.1, 0.2, 0.3]).unwrap());
        let y = tape.tanh(x);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        let g1 = grad_vec(&tape, x);
        tape.backward(s).unwrap();
        assert_eq!(g1, grad_vec(&tape, x));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::row_vec(vec![1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Array::scalar(2.0));
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_computes_identical_values() {
        let build = |tape: &mut Tape| -> Var {
            let x = tape.leaf(Array::row_vec(vec![0.5, -1.5, 2.5]).unwrap());
            let w = tape.leaf(Array::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap());
            let h = tape.matmul_nt(x, w).unwrap();
            tape.tanh(h)
        };
        let mut a = Tape::new();
        let va = build(&mut a);
        let mut b = Tape::inference();
        let vb = build(&mut b);
        assert_eq!(a.value(va), b.value(vb));
    }

    #[test]
    fn finite_diff_accepts_exact_linear_gradient() {
        let x = Array::row_vec(vec![0.4, -0.7, 1.1]).unwrap();
        let coef = [2.0, -3.0, 0.5];
        let mut f = |p: &Array| Ok(array::dot(p.data(), &coef));
        let analytic = Array::row_vec(coef.to_vec()).unwrap();
        let err = finite_diff_check(&mut f, &x, &analytic).unwrap();
        assert!(err < 1e-9, "error {err}");
    }

    #[test]
    fn finite_diff_accepts_exp_sum_gradient() {
        let x = Array::row_vec(vec![0.1, -0.2, 0.05]).unwrap();
        let mut f = |p: &Array| Ok(p.data().iter().sum::<f64>().exp());
        let g = x.data().iter().sum::<f64>().exp();
        let analytic = Array::row_vec(vec![g; 3]).unwrap();
        let err = finite_diff_check(&mut f, &x, &analytic).unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn finite_diff_flags_scaled_gradient() {
        // f has gradient 0.5 per coordinate; handing in twice that must be
        // reported as a scaled error of about 0.5.
        let x = Array::row_vec(vec![0.3, 0.9]).unwrap();
        let mut f = |p: &Array| Ok(0.5 * p.data().iter().sum::<f64>());
        let analytic = Array::row_vec(vec![1.0, 1.0]).unwrap();
        let err = finite_diff_check(&mut f, &x, &analytic).unwrap();
        assert!((err - 0.5).abs() < 1e-6, "error {err}");
    }

    #[test]
    fn tape_composite_gradient_passes_finite_differences() {
        // One graph exercising linear, relu, train-mode batchnorm, tanh,
        // row means, and the masked log-probability head.
        let w0 = Array::from_vec(4, 3, (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect())
            .unwrap();
        let run = |p: &Array, want_grad: bool| -> Result<(f64, Option<Array>)> {
            let mut tape = Tape::new();
            let x = tape.leaf(Array::from_vec(2, 3, vec![0.2, -0.4, 0.6, 1.0, 0.3, -0.8]).unwrap());
            let w = tape.leaf(p.clone());
            let bias = tape.leaf(Array::row_vec(vec![0.1, -0.2, 0.3, 0.05]).unwrap());
            let h = tape.linear(x, w, bias)?;
            let h = tape.relu(h);
            let bw = tape.leaf(Array::row_vec(vec![1.1, 0.9, 1.0, 1.2]).unwrap());
            let bb = tape.leaf(Array::row_vec(vec![0.0, 0.1, -0.1, 0.2]).unwrap());
            let (h, _) = tape.batchnorm_train(h, bw, bb, 1e-5)?;
            let h = tape.tanh(h);
            let q = tape.mean_rows(h);
            let lp = tape.log_prob_at(q, &[true, true, false, true], 1)?;
            let value = tape.value(lp).item()?;
            if want_grad {
                tape.backward(lp)?;
                Ok((value, Some(tape.grad(w).unwrap().clone())))
            } else {
                Ok((value, None))
            }
        };
        let (_, analytic) = run(&w0, true).unwrap();
        let mut f = |p: &Array| run(p, false).map(|(v, _)| v);
        let err = finite_diff_check(&mut f, &w0, &analytic.unwrap()).unwrap();
        assert!(err < 1e-6, "error {err}");
    }
}
