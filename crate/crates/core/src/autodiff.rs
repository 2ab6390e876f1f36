//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every forward operation together with the values it
//! produced. Handles to recorded values are plain [`Var`] indices, so the tape
//! is rebuilt for every forward pass and graphs of any size can be traced.
//! [`Tape::backward`] walks the tape in reverse and returns a [`Gradients`]
//! table with one entry per node that depends on a variable leaf.
//!
//! Every forward op checks its output for NaN/Inf and reports the offending op
//! as [`Error::NonFinite`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Rows below this L2 norm are mapped to zero by [`Tape::l2_normalize_rows`].
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shared index list (segment ids, gather indices).
pub type Index = Arc<[usize]>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    MaskedSoftmax(Var),
    SegmentSoftmax(Var, Index, usize),
    L2NormalizeRows(Var),
    SegmentSum(Var, Index),
    GatherRows(Var, Index),
    Sum(Var),
    MseLoss(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
    branches: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::Shape { op, detail })
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
            branches: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that gradients are not propagated into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Smallest distance of any recorded piecewise-linear input from its kink
    /// (ReLU/LeakyReLU at zero, plus any margin reported through
    /// [`Tape::note_margin`]).
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Records the distance to a discrete decision boundary taken during the
    /// forward pass (e.g. a tie in an ordering).
    pub fn note_margin(&mut self, margin: f64) {
        self.kink_margin = self.kink_margin.min(margin);
    }

    /// Hash of every branch taken so far: the side of each ReLU/LeakyReLU
    /// kink plus the keys passed to [`Tape::note_branch`]. Two evaluations
    /// with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> u64 {
        self.branches
    }

    pub fn note_branch(&mut self, key: u64) {
        self.branches = (self.branches ^ key).wrapping_mul(0x0000_0100_0000_01b3);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return shape_err("matmul", format!("{:?} x {:?}", va.shape(), vb.shape()));
        }
        let out = gemm(va, false, vb, false);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(op, format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `m + row`, broadcasting a `1×c` row over every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (vm, vr) = (self.value(m), self.value(row));
        if vr.rows() != 1 || vr.cols() != vm.cols() {
            return shape_err("add_row", format!("{:?} + {:?}", vm.shape(), vr.shape()));
        }
        let mut out = vm.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(m, row), &[m, row])
    }

    /// `m ⊙ row`, broadcasting a `1×c` row over every row of `m`.
    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (vm, vr) = (self.value(m), self.value(row));
        if vr.rows() != 1 || vr.cols() != vm.cols() {
            return shape_err("mul_row", format!("{:?} * {:?}", vm.shape(), vr.shape()));
        }
        let mut out = vm.clone();
        for r in 0..out.rows() {
            for (o, e) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o *= e;
            }
        }
        self.push("mul_row", out, Op::MulRow(m, row), &[m, row])
    }

    /// `m ⊙ col`, broadcasting an `r×1` column over every column of `m`.
    pub fn mul_col(&mut self, m: Var, col: Var) -> Result<Var> {
        let (vm, vc) = (self.value(m), self.value(col));
        if vc.cols() != 1 || vc.rows() != vm.rows() {
            return shape_err("mul_col", format!("{:?} * {:?}", vm.shape(), vc.shape()));
        }
        let mut out = vm.clone();
        for r in 0..out.rows() {
            let w = vc.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= w);
        }
        self.push("mul_col", out, Op::MulCol(m, col), &[m, col])
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scalar_mul", out, Op::ScalarMul(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    /// Concatenation along the last (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat", "no inputs".into());
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return shape_err("concat", format!("row counts {} vs {}", rows, v.rows()));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    fn track_kinks(&mut self, x: Var) {
        let m = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min);
        self.kink_margin = self.kink_margin.min(m);
        let mut words = Vec::with_capacity(self.value(x).len().div_ceil(64));
        for chunk in self.value(x).data().chunks(64) {
            words.push(chunk.iter().enumerate().fold(0u64, |w, (i, v)| w | (((*v > 0.0) as u64) << i)));
        }
        for w in words {
            self.note_branch(w);
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.track_kinks(x);
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.track_kinks(x);
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push("exp", out, Op::Exp(x), &[x])
    }

    /// Row-wise softmax restricted to `mask` (row-major, same shape as `x`).
    ///
    /// Masked-out logits are treated as −∞, so they receive exactly zero
    /// weight. A row with an empty mask yields a zero row.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return shape_err("masked_softmax", format!("mask of {} for {:?}", mask.len(), vx.shape()));
        }
        let mut out = Tensor::zeros(vx.rows(), vx.cols());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let m = &mask[r * vx.cols()..(r + 1) * vx.cols()];
            let logits: Vec<f64> = row
                .iter()
                .zip(m)
                .map(|(&v, &keep)| if keep { v } else { f64::NEG_INFINITY })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (o, e) in out.row_mut(r).iter_mut().zip(exps) {
                *o = e / total;
            }
        }
        self.push("masked_softmax", out, Op::MaskedSoftmax(x), &[x])
    }

    /// Softmax over groups of rows: every row `i` belongs to segment
    /// `segments[i] < n_segments`, and each column is normalised independently
    /// within a segment. This is the sparse form of [`Tape::masked_softmax`]
    /// where rows absent from a segment carry −∞ logits.
    pub fn segment_softmax(&mut self, x: Var, segments: &Index, n_segments: usize) -> Result<Var> {
        let vx = self.value(x);
        if segments.len() != vx.rows() {
            return shape_err("segment_softmax", format!("{} ids for {} rows", segments.len(), vx.rows()));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return shape_err("segment_softmax", format!("segment id {bad} >= {n_segments}"));
        }
        let cols = vx.cols();
        let mut max = Tensor::filled(n_segments, cols, f64::NEG_INFINITY);
        for (i, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let v = vx.get(i, c);
                if v > max.get(s, c) {
                    max.set(s, c, v);
                }
            }
        }
        let mut out = Tensor::zeros(vx.rows(), cols);
        let mut total = Tensor::zeros(n_segments, cols);
        for (i, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let e = (vx.get(i, c) - max.get(s, c)).exp();
                out.set(i, c, e);
                total.set(s, c, total.get(s, c) + e);
            }
        }
        for (i, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                out.set(i, c, out.get(i, c) / total.get(s, c));
            }
        }
        self.push(
            "segment_softmax",
            out,
            Op::SegmentSoftmax(x, segments.clone(), n_segments),
            &[x],
        )
    }

    /// Scales every row to unit L2 norm; rows with norm below
    /// [`NORMALIZE_EPS`] become zero rows.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let norm = vx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let row = out.row_mut(r);
            if norm < NORMALIZE_EPS {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        self.push("l2_normalize_rows", out, Op::L2NormalizeRows(x), &[x])
    }

    /// Sums rows sharing a segment id into `n_segments` output rows.
    pub fn segment_sum(&mut self, x: Var, segments: &Index, n_segments: usize) -> Result<Var> {
        let vx = self.value(x);
        if segments.len() != vx.rows() {
            return shape_err("segment_sum", format!("{} ids for {} rows", segments.len(), vx.rows()));
        }
        let mut out = Tensor::zeros(n_segments, vx.cols());
        for (i, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return shape_err("segment_sum", format!("segment id {s} >= {n_segments}"));
            }
            for (o, v) in out.row_mut(s).iter_mut().zip(vx.row(i)) {
                *o += v;
            }
        }
        self.push("segment_sum", out, Op::SegmentSum(x, segments.clone()), &[x])
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: &Index) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= vx.rows()) {
            return shape_err("gather_rows", format!("row {bad} of {}", vx.rows()));
        }
        let out = vx.select_rows(index);
        self.push("gather_rows", out, Op::GatherRows(x, index.clone()), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean over rows of the squared row-wise error: `Σ‖p_i − t_i‖² / rows`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape() != vt.shape() {
            return shape_err("mse_loss", format!("{:?} vs {:?}", vp.shape(), vt.shape()));
        }
        let rows = vp.rows().max(1) as f64;
        let s: f64 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push("mse_loss", Tensor::scalar(s / rows), Op::MseLoss(pred, target), &[pred, target])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::Validation(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gemm(g, false, self.value(*b), true));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gemm(self.value(*a), true, g, false));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, hadamard(g, self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::AddRow(m, row) => {
                if self.wants(*m) {
                    accumulate(grads, *m, g.clone());
                }
                if self.wants(*row) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *row, db);
                }
            }
            Op::MulRow(m, row) => {
                let (vm, vr) = (self.value(*m), self.value(*row));
                if self.wants(*m) {
                    let mut dm = g.clone();
                    for r in 0..dm.rows() {
                        for (d, e) in dm.row_mut(r).iter_mut().zip(vr.data()) {
                            *d *= e;
                        }
                    }
                    accumulate(grads, *m, dm);
                }
                if self.wants(*row) {
                    let mut de = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for ((d, gv), mv) in de.data_mut().iter_mut().zip(g.row(r)).zip(vm.row(r)) {
                            *d += gv * mv;
                        }
                    }
                    accumulate(grads, *row, de);
                }
            }
            Op::MulCol(m, col) => {
                let (vm, vc) = (self.value(*m), self.value(*col));
                if self.wants(*m) {
                    let mut dm = g.clone();
                    for r in 0..dm.rows() {
                        let w = vc.data()[r];
                        dm.row_mut(r).iter_mut().for_each(|d| *d *= w);
                    }
                    accumulate(grads, *m, dm);
                }
                if self.wants(*col) {
                    let mut dc = Tensor::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        dc.data_mut()[r] = g.row(r).iter().zip(vm.row(r)).map(|(a, b)| a * b).sum();
                    }
                    accumulate(grads, *col, dc);
                }
            }
            Op::ScalarMul(x, s) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.map(|v| v * s));
                }
            }
            Op::AddScalar(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if self.wants(p) {
                        let mut dp = Tensor::zeros(g.rows(), width);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + width]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += width;
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let vx = self.value(*x);
                    accumulate(grads, *x, zip_map(g, vx, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
            }
            Op::LeakyRelu(x, slope) => {
                if self.wants(*x) {
                    let vx = self.value(*x);
                    let s = *slope;
                    accumulate(grads, *x, zip_map(g, vx, |gv, xv| if xv > 0.0 { gv } else { s * gv }));
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)));
                }
            }
            Op::Exp(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, hadamard(g, y));
                }
            }
            Op::MaskedSoftmax(x) => {
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SegmentSoftmax(x, segments, n) => {
                if self.wants(*x) {
                    let cols = y.cols();
                    let mut dots = Tensor::zeros(*n, cols);
                    for (i, &s) in segments.iter().enumerate() {
                        for c in 0..cols {
                            dots.set(s, c, dots.get(s, c) + g.get(i, c) * y.get(i, c));
                        }
                    }
                    let mut dx = Tensor::zeros(y.rows(), cols);
                    for (i, &s) in segments.iter().enumerate() {
                        for c in 0..cols {
                            dx.set(i, c, y.get(i, c) * (g.get(i, c) - dots.get(s, c)));
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::L2NormalizeRows(x) => {
                if self.wants(*x) {
                    let vx = self.value(*x);
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let norm = vx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm < NORMALIZE_EPS {
                            continue;
                        }
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = (gv - yv * dot) / norm;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SegmentSum(x, segments) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.select_rows(segments));
                }
            }
            Op::GatherRows(x, index) => {
                if self.wants(*x) {
                    let vx = self.value(*x);
                    let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                    for (i, &src) in index.iter().enumerate() {
                        for (d, v) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let vx = self.value(*x);
                    accumulate(grads, *x, Tensor::filled(vx.rows(), vx.cols(), g.item()));
                }
            }
            Op::MseLoss(p, t) => {
                let (vp, vt) = (self.value(*p), self.value(*t));
                let scale = 2.0 * g.item() / vp.rows().max(1) as f64;
                let dp = zip_map(vp, vt, |a, b| scale * (a - b));
                if self.wants(*t) {
                    accumulate(grads, *t, dp.map(|v| -v));
                }
                if self.wants(*p) {
                    accumulate(grads, *p, dp);
                }
            }
        }
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("operands share a shape")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Central-difference gradient check of a scalar function.
///
/// `f` builds its computation on the tape it is handed, starting from the
/// variable leaf holding `x`, and returns the scalar output. The analytic
/// gradient from [`Tape::backward`] is compared coordinate by coordinate with
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h`. The returned value is the worst
/// `|g_fd − g| / max(|g|, 1e-8)`.
pub fn fd_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.variable(x.clone());
        let out = f(&mut tape, xv)?;
        let grads = tape.backward(out)?;
        grads
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()))
    };
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(point.clone());
        let out = f(&mut tape, xv)?;
        Ok(tape.value(out).item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let g = analytic.data()[i];
        worst = worst.max((numeric - g).abs() / g.abs().max(1e-8));
    }
    Ok(worst)
}
