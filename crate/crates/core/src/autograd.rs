//! A small reverse-mode tape over [`Mat`] values.
//!
//! A [`Tape`] borrows the parameter store, records every operation of one
//! forward pass and replays them backwards. Parameters outside the optional
//! trainable mask enter the tape as constants, so frozen sub-graphs cost no
//! backward work.

use std::collections::HashMap;

use crate::params::{ParamId, ParamMask, ParamStore};
use crate::tensor::{gelu, gelu_grad, gemm, log_softmax, softmax, top_k_indices, Mat};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Mat),
    Borrowed(&'a Mat),
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, rstd: Vec<f64> },
    SoftmaxRanges { x: Var, ranges: Vec<(usize, usize)> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    ScaleRows(Var, Var),
    MeanRows(Var),
    BroadcastRows(Var),
    TopKSoftmax { x: Var, selected: Vec<Vec<usize>> },
    SelectCol { x: Var, col: usize },
    CrossEntropy { x: Var, targets: Vec<usize>, probs: Mat },
    Kd { x: Var, teacher: Mat, probs: Mat, active: Vec<bool> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    trainable: Option<&'a ParamMask>,
    frozen: bool,
    nodes: Vec<Node<'a>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    /// Parameter gradients in ascending parameter-id order.
    pub fn params(&self) -> Vec<(ParamId, &Mat)> {
        let mut out: Vec<(ParamId, &Mat)> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.nodes[v.0].as_ref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            trainable: None,
            frozen: false,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
        }
    }

    /// Only parameters in `mask` receive gradients.
    pub fn with_trainable(store: &'a ParamStore, mask: &'a ParamMask) -> Self {
        let mut t = Tape::new(store);
        t.trainable = Some(mask);
        t
    }

    /// Every parameter is a constant; for inference.
    pub fn frozen(store: &'a ParamStore) -> Self {
        let mut t = Tape::new(store);
        t.frozen = true;
        t
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(m),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is wanted (read it back via [`Gradients::of`]).
    pub fn input(&mut self, m: Mat) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(m),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let needs_grad = !self.frozen && self.trainable.is_none_or(|m| m.contains(id));
        self.nodes.push(Node {
            value: Value::Borrowed(self.store.get(id)),
            op: Op::Param,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = crate::tensor::matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = crate::tensor::matmul_nt(self.value(a), self.value(b));
        self.push(out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((1, out.cols), b.shape(), "bias shape");
        for r in 0..out.rows {
            for (x, y) in out.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Mat::from_vec(v.rows, v.cols, v.data.iter().map(|&x| gelu(x)).collect());
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with learnable `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (n, c) = xv.shape();
        let mut xhat = Mat::zeros(n, c);
        let mut out = Mat::zeros(n, c);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                *xhat.at_mut(r, j) = h;
                *out.at_mut(r, j) = h * g.data[j] + b.data[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Softmax of each row; with `causal`, row `i` only spans columns `0..=i`
    /// and the rest are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let (rows, cols) = self.value(x).shape();
        let ranges = (0..rows)
            .map(|r| if causal { (0, (r + 1).min(cols)) } else { (0, cols) })
            .collect();
        self.softmax_ranges(x, ranges)
    }

    /// Softmax of row `r` over columns `ranges[r].0..ranges[r].1`; exact zeros
    /// outside the range.
    pub fn softmax_ranges(&mut self, x: Var, ranges: Vec<(usize, usize)>) -> Var {
        let xv = self.value(x);
        assert_eq!(ranges.len(), xv.rows);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        for (r, &(lo, hi)) in ranges.iter().enumerate() {
            let p = softmax(&xv.row(r)[lo..hi]);
            out.row_mut(r)[lo..hi].copy_from_slice(&p);
        }
        self.push(out, Op::SoftmaxRanges { x, ranges }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
        }
        let out = Mat::from_vec(data.len() / cols.max(1), cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(idx.len(), xv.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Sums row `k` of `x` into row `idx[k]` of an `n x c` zero matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(n, xv.cols);
        for (k, &i) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(xv.row(k)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Multiplies row `r` of `x` by `w[r, 0]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!((xv.rows, 1), wv.shape());
        let mut out = xv.clone();
        for r in 0..out.rows {
            let s = wv.data[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::ScaleRows(x, w), &[x, w])
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(1, xv.cols);
        for r in 0..xv.rows {
            for (o, v) in out.data.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / xv.rows as f64);
        self.push(out, Op::MeanRows(x), &[x])
    }

    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1);
        let mut out = Mat::zeros(n, xv.cols);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&xv.data);
        }
        self.push(out, Op::BroadcastRows(x), &[x])
    }

    /// Per row: keep the `k` largest logits (lowest index wins ties), softmax
    /// over them, exact zeros elsewhere.
    pub fn top_k_softmax(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        let mut selected = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let sel = top_k_indices(row, k);
            let logits: Vec<f64> = sel.iter().map(|&j| row[j]).collect();
            let w = softmax(&logits);
            for (&j, wj) in sel.iter().zip(w) {
                *out.at_mut(r, j) = wj;
            }
            selected.push(sel);
        }
        self.push(out, Op::TopKSoftmax { x, selected }, &[x])
    }

    pub fn select_col(&mut self, x: Var, col: usize) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows).map(|r| xv.at(r, col)).collect();
        let out = Mat::from_vec(xv.rows, 1, data);
        self.push(out, Op::SelectCol { x, col }, &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let xv = self.value(logits);
        assert_eq!(xv.rows, targets.len());
        let mut probs = Mat::zeros(xv.rows, xv.cols);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let ls = log_softmax(xv.row(r));
            loss -= ls[t];
            for (p, l) in probs.row_mut(r).iter_mut().zip(&ls) {
                *p = l.exp();
            }
        }
        loss /= xv.rows.max(1) as f64;
        let op = Op::CrossEntropy { x: logits, targets: targets.to_vec(), probs };
        self.push(Mat::scalar(loss), op, &[logits])
    }

    /// Mean over rows of `KL(teacher || softmax(logits))`, with both
    /// distributions floored at `floor` inside the logarithm.
    pub fn kd_loss(&mut self, logits: Var, teacher: Mat, floor: f64) -> Var {
        let xv = self.value(logits);
        assert_eq!(xv.shape(), teacher.shape());
        let log_floor = floor.ln();
        let mut probs = Mat::zeros(xv.rows, xv.cols);
        let mut active = vec![false; xv.len()];
        let mut loss = 0.0;
        for r in 0..xv.rows {
            let ls = log_softmax(xv.row(r));
            for (j, &l) in ls.iter().enumerate() {
                let p = teacher.at(r, j);
                let on = l > log_floor;
                active[r * xv.cols + j] = on;
                *probs.at_mut(r, j) = l.exp();
                if p > 0.0 {
                    loss += p * (p.max(floor).ln() - l.max(log_floor));
                }
            }
        }
        loss /= xv.rows.max(1) as f64;
        let op = Op::Kd { x: logits, teacher, probs, active };
        self.push(Mat::scalar(loss), op, &[logits])
    }

    /// `sum_i w_i * x_i` over `1 x 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|&(t, w)| w * self.value(t).item()).sum();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Mat::scalar(v), Op::WeightedSum(terms.to_vec()), &parents)
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward() needs a scalar");
        self.backward_with_seed(out, Mat::scalar(1.0))
    }

    /// Backpropagates `seed` as the gradient of `out`.
    pub fn backward_with_seed(&self, out: Var, seed: Mat) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: self.param_vars.iter().map(|(&id, &v)| (id, v)).collect(),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    // dA = G * B^T
                    let mut da = Mat::zeros(va.rows, va.cols);
                    gemm(va.rows, vb.cols, va.cols, 1.0, &g.data, false, &vb.data, true, 0.0, &mut da.data);
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(b) {
                    // dB = A^T * G
                    let mut db = Mat::zeros(vb.rows, vb.cols);
                    gemm(vb.rows, va.rows, vb.cols, 1.0, &va.data, true, &g.data, false, 0.0, &mut db.data);
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    // dA = G * B
                    let mut da = Mat::zeros(va.rows, va.cols);
                    gemm(va.rows, vb.rows, va.cols, 1.0, &g.data, false, &vb.data, false, 0.0, &mut da.data);
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(b) {
                    // dB = G^T * A
                    let mut db = Mat::zeros(vb.rows, vb.cols);
                    gemm(vb.rows, va.rows, vb.cols, 1.0, &g.data, true, &va.data, false, 0.0, &mut db.data);
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            &Op::AddRow(a, bias) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(bias) {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in db.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], db);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let d = g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], Mat::from_vec(g.rows, g.cols, d));
                }
                if self.wants(b) {
                    let d = g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], Mat::from_vec(g.rows, g.cols, d));
                }
            }
            &Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_assign(s);
                accumulate(&mut grads[a.0], d);
            }
            &Op::Gelu(a) => {
                let va = self.value(a);
                let d = g.data.iter().zip(&va.data).map(|(gv, &x)| gv * gelu_grad(x)).collect();
                accumulate(&mut grads[a.0], Mat::from_vec(g.rows, g.cols, d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let (n, c) = xhat.shape();
                if self.wants(*gamma) {
                    let mut dg = Mat::zeros(1, c);
                    for r in 0..n {
                        for j in 0..c {
                            dg.data[j] += g.at(r, j) * xhat.at(r, j);
                        }
                    }
                    accumulate(&mut grads[gamma.0], dg);
                }
                if self.wants(*beta) {
                    let mut db = Mat::zeros(1, c);
                    for r in 0..n {
                        for (o, v) in db.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[beta.0], db);
                }
                if self.wants(*x) {
                    let mut dx = Mat::zeros(n, c);
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..c).map(|j| g.at(r, j) * gv.data[j]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = (0..c).map(|j| dxhat[j] * xhat.at(r, j)).sum::<f64>() / c as f64;
                        for j in 0..c {
                            *dx.at_mut(r, j) = rstd[r] * (dxhat[j] - m1 - xhat.at(r, j) * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::SoftmaxRanges { x, ranges } => {
                let y = self.value(Var(i));
                let mut dx = Mat::zeros(y.rows, y.cols);
                for (r, &(lo, hi)) in ranges.iter().enumerate() {
                    let dot: f64 = (lo..hi).map(|j| y.at(r, j) * g.at(r, j)).sum();
                    for j in lo..hi {
                        *dx.at_mut(r, j) = y.at(r, j) * (g.at(r, j) - dot);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.wants(p) {
                        let mut d = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        accumulate(&mut grads[p.0], d);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.wants(p) {
                        let d = Mat::from_vec(rows, cols, g.data[off * cols..(off + rows) * cols].to_vec());
                        accumulate(&mut grads[p.0], d);
                    }
                    off += rows;
                }
            }
            &Op::SliceCols { x, start } => {
                let xv = self.value(x);
                let mut d = Mat::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    d.row_mut(r)[start..start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut d = Mat::zeros(xv.rows, xv.cols);
                for (k, &src) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::ScatterRows { x, idx } => {
                let mut d = Mat::zeros(idx.len(), g.cols);
                for (k, &dst) in idx.iter().enumerate() {
                    d.row_mut(k).copy_from_slice(g.row(dst));
                }
                accumulate(&mut grads[x.0], d);
            }
            &Op::ScaleRows(x, w) => {
                let (xv, wv) = (self.value(x), self.value(w));
                if self.wants(x) {
                    let mut d = g.clone();
                    for r in 0..d.rows {
                        let s = wv.data[r];
                        d.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads[x.0], d);
                }
                if self.wants(w) {
                    let data = (0..xv.rows)
                        .map(|r| xv.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads[w.0], Mat::from_vec(xv.rows, 1, data));
                }
            }
            &Op::MeanRows(x) => {
                let n = self.value(x).rows;
                let mut d = Mat::zeros(n, g.cols);
                for r in 0..n {
                    for (o, v) in d.row_mut(r).iter_mut().zip(&g.data) {
                        *o = v / n as f64;
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            &Op::BroadcastRows(x) => {
                let mut d = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in d.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::TopKSoftmax { x, selected } => {
                let y = self.value(Var(i));
                let mut dx = Mat::zeros(y.rows, y.cols);
                for (r, sel) in selected.iter().enumerate() {
                    let dot: f64 = sel.iter().map(|&j| y.at(r, j) * g.at(r, j)).sum();
                    for &j in sel {
                        *dx.at_mut(r, j) = y.at(r, j) * (g.at(r, j) - dot);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            &Op::SelectCol { x, col } => {
                let xv = self.value(x);
                let mut d = Mat::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    *d.at_mut(r, col) = g.data[r];
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::CrossEntropy { x, targets, probs } => {
                let scale = g.item() / targets.len().max(1) as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    *d.at_mut(r, t) -= 1.0;
                }
                d.scale_assign(scale);
                accumulate(&mut grads[x.0], d);
            }
            Op::Kd { x, teacher, probs, active } => {
                let (n, c) = probs.shape();
                let scale = g.item() / n.max(1) as f64;
                let mut d = Mat::zeros(n, c);
                for r in 0..n {
                    let mass: f64 = (0..c)
                        .filter(|&j| active[r * c + j])
                        .map(|j| teacher.at(r, j))
                        .sum();
                    for j in 0..c {
                        let own = if active[r * c + j] { teacher.at(r, j) } else { 0.0 };
                        *d.at_mut(r, j) = scale * (probs.at(r, j) * mass - own);
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    if self.wants(t) {
                        accumulate(&mut grads[t.0], Mat::scalar(g.item() * w));
                    }
                }
            }
        }
    }
}
