//! Explicit reverse-mode tape.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.
//! There is no global state: concurrent forward passes simply use separate
//! tapes.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, log_sum_exp, Tensor};

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRowGroups(Var, usize),
    Reshape(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradient of a scalar loss with respect to every node of the tape it came from.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; nodes the loss does not depend on get zeros.
    pub fn get(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(format!(
                "add: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(shape_err(format!(
                "add_bias: bias of {} for {} columns",
                bv.len(),
                n
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(format!(
                "mul: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scalar_scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Multiplies row `r` by the constant `coeffs[r]`.
    pub fn scale_rows(&mut self, x: Var, coeffs: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if coeffs.len() != xv.rows() {
            return Err(shape_err(format!(
                "scale_rows: {} coefficients for {} rows",
                coeffs.len(),
                xv.rows()
            )));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (row, &k) in out.data_mut().chunks_mut(c.max(1)).zip(&coeffs) {
            for v in row {
                *v *= k;
            }
        }
        Ok(self.push(out, Op::ScaleRows(x, coeffs)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    /// Layer normalization over the trailing axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != n || b.len() != n {
            return Err(shape_err("layer_norm: gain/shift length differs from width"));
        }
        let nf = T::from_usize_lossy(n);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g.data()[j] + b.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax();
        self.push(out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = self.value(x).log_softmax();
        self.push(out, Op::LogSoftmax(x))
    }

    /// Mean negative log-probability of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let w = vec![T::one(); targets.len()];
        self.weighted_cross_entropy(logits, targets, &w)
    }

    /// Row-weighted cross-entropy: `sum_r w_r * nll_r / sum_r w_r`. Rows with
    /// zero weight are ignored.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (m, v) = (lv.rows(), lv.cols());
        if targets.len() != m || weights.len() != m {
            return Err(shape_err(format!(
                "cross_entropy: {} targets / {} weights for {m} rows",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                index: bad,
                bound: v,
            });
        }
        let total_w: T = weights.iter().copied().sum();
        if total_w <= T::zero() {
            return Err(Error::Contract("cross_entropy: weights sum to zero".into()));
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = T::zero();
        for r in 0..m {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            for &z in row {
                probs.push((z - lse).exp());
            }
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let out = Tensor::scalar(loss / total_w);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.iter().map(|&w| w / total_w).collect(),
                probs,
            },
        ))
    }

    /// Row lookup `table[ids[r]]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > xv.rows() {
            return Err(shape_err(format!(
                "slice_rows {start}..{} of {} rows",
                start + len,
                xv.rows()
            )));
        }
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| shape_err("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(shape_err("concat_rows: column counts differ"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(shape_err(format!(
                "slice_cols {start}..{} of {} columns",
                start + len,
                xv.cols()
            )));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![xv.rows(), len], data)?;
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| shape_err("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Averages consecutive groups of `group` rows: `[g*group x d] -> [g x d]`.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || !xv.rows().is_multiple_of(group) {
            return Err(shape_err(format!(
                "mean_row_groups: {} rows not divisible by {group}",
                xv.rows()
            )));
        }
        let c = xv.cols();
        let g = xv.rows() / group;
        let inv = T::one() / T::from_usize_lossy(group);
        let mut data = vec![T::zero(); g * c];
        for r in 0..xv.rows() {
            let dst = &mut data[(r / group) * c..(r / group + 1) * c];
            for (d, &v) in dst.iter_mut().zip(xv.row(r)) {
                *d += v * inv;
            }
        }
        let out = Tensor::new(vec![g, c], data)?;
        Ok(self.push(out, Op::MeanRowGroups(x, group)))
    }

    /// Same data, new shape (row-major order is preserved).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let ga = slot(grads, *a, av.shape());
                gemm_nt(gd, bv.data(), ga, m, n, k);
                let gb = slot(grads, *b, bv.shape());
                gemm_tn(av.data(), gd, gb, m, k, n);
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                let ga = slot(grads, *a, av.shape());
                gemm_nn(gd, bv.data(), ga, m, n, k);
                let gb = slot(grads, *b, bv.shape());
                gemm_tn(gd, av.data(), gb, m, n, k);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let s = slot(grads, v, g.shape());
                    for (o, &d) in s.iter_mut().zip(gd) {
                        *o += d;
                    }
                }
            }
            Op::AddBias(x, b) => {
                let n = g.cols();
                let sx = slot(grads, *x, g.shape());
                for (o, &d) in sx.iter_mut().zip(gd) {
                    *o += d;
                }
                let bshape = self.value(*b).shape().to_vec();
                let sb = slot(grads, *b, &bshape);
                for row in gd.chunks(n.max(1)) {
                    for (o, &d) in sb.iter_mut().zip(row) {
                        *o += d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let sa = slot(grads, *a, av.shape());
                for ((o, &d), &y) in sa.iter_mut().zip(gd).zip(bv.data()) {
                    *o += d * y;
                }
                let sb = slot(grads, *b, bv.shape());
                for ((o, &d), &x) in sb.iter_mut().zip(gd).zip(av.data()) {
                    *o += d * x;
                }
            }
            Op::Scale(x, c) => {
                let s = slot(grads, *x, g.shape());
                for (o, &d) in s.iter_mut().zip(gd) {
                    *o += d * *c;
                }
            }
            Op::ScaleRows(x, coeffs) => {
                let n = g.cols().max(1);
                let s = slot(grads, *x, g.shape());
                for ((orow, drow), &k) in s.chunks_mut(n).zip(gd.chunks(n)).zip(coeffs) {
                    for (o, &d) in orow.iter_mut().zip(drow) {
                        *o += d * k;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let s = slot(grads, *x, g.shape());
                for ((o, &d), &v) in s.iter_mut().zip(gd).zip(xv.data()) {
                    if v > T::zero() {
                        *o += d;
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
                let n = g.cols();
                let nf = T::from_usize_lossy(n);
                let gam = self.value(*gamma).data().to_vec();
                {
                    let sg = slot(grads, *gamma, &[n]);
                    for (drow, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &d), &h) in sg.iter_mut().zip(drow).zip(hrow) {
                            *o += d * h;
                        }
                    }
                }
                {
                    let sb = slot(grads, *beta, &[n]);
                    for drow in gd.chunks(n) {
                        for (o, &d) in sb.iter_mut().zip(drow) {
                            *o += d;
                        }
                    }
                }
                let sx = slot(grads, *x, g.shape());
                let mut dh = vec![T::zero(); n];
                for (r, (drow, hrow)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..n {
                        dh[j] = drow[j] * gam[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * hrow[j];
                    }
                    mean_dh /= nf;
                    mean_dh_h /= nf;
                    let orow = &mut sx[r * n..(r + 1) * n];
                    for j in 0..n {
                        orow[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = g.cols().max(1);
                let y = node.value.data();
                let s = slot(grads, *x, g.shape());
                for ((orow, drow), yrow) in s.chunks_mut(n).zip(gd.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
                    for ((o, &d), &p) in orow.iter_mut().zip(drow).zip(yrow) {
                        *o += p * (d - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = g.cols().max(1);
                let y = node.value.data();
                let s = slot(grads, *x, g.shape());
                for ((orow, drow), yrow) in s.chunks_mut(n).zip(gd.chunks(n)).zip(y.chunks(n)) {
                    let total: T = drow.iter().copied().sum();
                    for ((o, &d), &ly) in orow.iter_mut().zip(drow).zip(yrow) {
                        *o += d - ly.exp() * total;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let lv = self.value(*logits);
                let n = lv.cols();
                let up = gd[0];
                let s = slot(grads, *logits, lv.shape());
                for (r, (orow, prow)) in s.chunks_mut(n).zip(probs.chunks(n)).enumerate() {
                    let w = weights[r] * up;
                    if w == T::zero() {
                        continue;
                    }
                    for (o, &p) in orow.iter_mut().zip(prow) {
                        *o += w * p;
                    }
                    orow[targets[r]] -= w;
                }
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let s = slot(grads, *x, xv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut s[i * n..(i + 1) * n];
                    for (o, &d) in dst.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *o += d;
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let xshape = self.value(*x).shape().to_vec();
                let s = slot(grads, *x, &xshape);
                for i in 0..m {
                    for j in 0..n {
                        s[j * m + i] += gd[i * n + j];
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let xshape = self.value(*x).shape().to_vec();
                let c = g.cols();
                let s = slot(grads, *x, &xshape);
                for (o, &d) in s[start * c..].iter_mut().zip(gd) {
                    *o += d;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pshape = self.value(p).shape().to_vec();
                    let len = self.value(p).len();
                    let s = slot(grads, p, &pshape);
                    for (o, &d) in s.iter_mut().zip(&gd[offset..offset + len]) {
                        *o += d;
                    }
                    offset += len;
                }
            }
            Op::SliceCols(x, start) => {
                let xshape = self.value(*x).shape().to_vec();
                let xc = self.value(*x).cols();
                let len = g.cols();
                let s = slot(grads, *x, &xshape);
                for r in 0..g.rows() {
                    let dst = &mut s[r * xc + start..r * xc + start + len];
                    for (o, &d) in dst.iter_mut().zip(&gd[r * len..(r + 1) * len]) {
                        *o += d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pshape = self.value(p).shape().to_vec();
                    let pc = self.value(p).cols();
                    let s = slot(grads, p, &pshape);
                    for r in 0..g.rows() {
                        let src = &gd[r * total + offset..r * total + offset + pc];
                        for (o, &d) in s[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                            *o += d;
                        }
                    }
                    offset += pc;
                }
            }
            Op::MeanRowGroups(x, group) => {
                let xshape = self.value(*x).shape().to_vec();
                let c = g.cols();
                let inv = T::one() / T::from_usize_lossy(*group);
                let rows = self.value(*x).rows();
                let s = slot(grads, *x, &xshape);
                for r in 0..rows {
                    let src = &gd[(r / group) * c..(r / group + 1) * c];
                    for (o, &d) in s[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *o += d * inv;
                    }
                }
            }
            Op::Reshape(x) => {
                let xshape = self.value(*x).shape().to_vec();
                let s = slot(grads, *x, &xshape);
                for (o, &d) in s.iter_mut().zip(gd) {
                    *o += d;
                }
            }
            Op::Sum(x) => {
                let xshape = self.value(*x).shape().to_vec();
                let s = slot(grads, *x, &xshape);
                for o in s.iter_mut() {
                    *o += gd[0];
                }
            }
        }
        Ok(())
    }
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
) -> &'a mut [T] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}
