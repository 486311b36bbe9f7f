//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records one forward pass (one utterance). Parameters are read
//! straight from the borrowed [`ParamStore`]; frozen parameters never enter the
//! gradient graph, and `backward` refuses to hand a gradient to one.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::objective::ctc;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Relu(Var),
    Swish(Var),
    Glu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, inv_std: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Unfold { x: Var, kernel: usize, stride: usize },
    DepthwiseConv { x: Var, w: Var },
    RelShift(Var),
    Gather { table: Var, ids: Vec<usize> },
    MaskMul { x: Var, mask: Mat<T> },
    Ctc { log_probs: Var, grad: Mat<T> },
    CrossEntropy { log_probs: Var, targets: Vec<usize>, smoothing: T },
}

struct Node<T> {
    value: Option<Mat<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Mat<T>>,
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Gradients {
            grads: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Mat<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Mat<T>) {
        self.grads.insert(id, grad);
    }

    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .values()
            .fold(T::zero(), |acc, g| acc + g.sq_norm())
            .sqrt()
    }

    /// Sum of squared gradient entries that landed on non-trainable parameters.
    pub fn frozen_sq_norm(&self, store: &ParamStore<T>) -> T {
        self.grads
            .iter()
            .filter(|(id, _)| !store.is_trainable(**id))
            .fold(T::zero(), |acc, (_, g)| acc + g.sq_norm())
    }
}

pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>, grad_enabled: bool) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        match &self.nodes[v.0].value {
            Some(m) => m,
            None => match self.nodes[v.0].op {
                Op::Param(id) => self.params.value(id),
                _ => unreachable!("only parameter nodes borrow their value"),
            },
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).get(0, 0)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        // Intermediate graph structure is only needed when a gradient may flow.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.grad_enabled && self.params.is_trainable(id);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(false, self.value(b), false);
        self.push(out, Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(false, self.value(b), true);
        self.push(out, Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = Mat::from_vec(
            va.rows(),
            va.cols(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
        );
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!(r.shape(), (1, out.cols()), "add_row expects a 1 x {} row", out.cols());
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Swish(a), &[a])
    }

    /// Gated linear unit over the column halves: `x[:, :c] * sigmoid(x[:, c:])`.
    pub fn glu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.cols() % 2 == 0, "glu needs an even width");
        let c = x.cols() / 2;
        let out = Mat::from_fn(x.rows(), c, |r, j| x.get(r, j) * sigmoid(x.get(r, j + c)));
        self.push(out, Op::Glu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, cols) = xv.shape();
        let n = T::lit(cols as f64);
        let eps = T::lit(eps);
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Row softmax. With `causal`, row `i` only normalizes over columns `0..=i`
    /// and the remaining entries are exactly zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let limit = if causal { (r + 1).min(x.cols()) } else { x.cols() };
            let row = &x.row(r)[..limit];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let o = out.row_mut(r);
            let mut z = T::zero();
            for c in 0..limit {
                let e = (row[c] - max).exp();
                o[c] = e;
                z += e;
            }
            for v in &mut o[..limit] {
                *v /= z;
            }
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let out = Mat::from_fn(x.rows(), len, |r, c| x.get(r, start + c));
        self.push(out, Op::SliceCols { x: a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Mat::concat_cols(&mats);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Gathers `kernel` consecutive rows at the given stride into one wide row
    /// (im2col for a 1-D convolution without padding).
    pub fn unfold(&mut self, a: Var, kernel: usize, stride: usize) -> Var {
        let x = self.value(a);
        assert!(x.rows() >= kernel, "unfold needs at least {kernel} rows");
        let c = x.cols();
        let out_rows = (x.rows() - kernel) / stride + 1;
        let mut out = Mat::zeros(out_rows, kernel * c);
        for t in 0..out_rows {
            for j in 0..kernel {
                out.row_mut(t)[j * c..(j + 1) * c].copy_from_slice(x.row(t * stride + j));
            }
        }
        self.push(out, Op::Unfold { x: a, kernel, stride }, &[a])
    }

    /// Per-channel convolution along time with zero "same" padding; `w` is `kernel x channels`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols(), wv.cols(), "depthwise channel mismatch");
        let (t_len, ch) = xv.shape();
        let k = wv.rows();
        let pad = (k - 1) / 2;
        let mut out = Mat::zeros(t_len, ch);
        for t in 0..t_len {
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= t_len {
                    continue;
                }
                let xr = xv.row(src - pad);
                let wr = wv.row(j);
                for (c, o) in out.row_mut(t).iter_mut().enumerate() {
                    *o += wr[c] * xr[c];
                }
            }
        }
        self.push(out, Op::DepthwiseConv { x, w }, &[x, w])
    }

    /// Maps `T x (2T-1)` relative-position scores to `T x T`:
    /// `out[i][j] = x[i][T-1-i+j]`, column `r` of the input holding relative offset `T-1-r`.
    pub fn rel_shift(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = x.rows();
        assert_eq!(x.cols(), 2 * t - 1, "rel_shift expects T x (2T-1)");
        let out = Mat::from_fn(t, t, |i, j| x.get(i, t - 1 - i + j));
        self.push(out, Op::RelShift(a), &[a])
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Elementwise product with a constant mask (dropout, zero-fill masking).
    pub fn mask_mul(&mut self, a: Var, mask: Mat<T>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), mask.shape(), "mask shape mismatch");
        let out = Mat::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect(),
        );
        self.push(out, Op::MaskMul { x: a, mask }, &[a])
    }

    /// CTC negative log-likelihood of `target` under row-normalized `log_probs` (blank = 0).
    /// Unreachable targets yield `+inf` with no gradient.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize]) -> Var {
        let lp = self.value(log_probs);
        let out = ctc::forward_backward(lp, target, 0);
        let value = Mat::filled(1, 1, out.loss);
        let grad = out.grad.unwrap_or_else(|| Mat::zeros(lp.rows(), lp.cols()));
        self.push(value, Op::Ctc { log_probs, grad }, &[log_probs])
    }

    /// Mean teacher-forced cross-entropy with optional label smoothing.
    pub fn cross_entropy(&mut self, log_probs: Var, targets: &[usize], smoothing: f64) -> Var {
        let lp = self.value(log_probs);
        assert_eq!(lp.rows(), targets.len(), "cross_entropy length mismatch");
        let s = T::lit(smoothing);
        let v = T::lit(lp.cols() as f64);
        let mut total = T::zero();
        for (r, &y) in targets.iter().enumerate() {
            let mut row_loss = -(T::one() - s) * lp.get(r, y);
            if smoothing > 0.0 {
                row_loss -= s / v * lp.row(r).iter().fold(T::zero(), |a, &x| a + x);
            }
            total += row_loss;
        }
        let value = Mat::filled(1, 1, total / T::lit(targets.len() as f64));
        self.push(
            value,
            Op::CrossEntropy {
                log_probs,
                targets: targets.to_vec(),
                smoothing: s,
            },
            &[log_probs],
        )
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[loss.0].needs_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(Mat::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Mat<T>,
        grads: &mut [Option<Mat<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                if !self.params.is_trainable(*id) {
                    return Err(Error::FrozenGradient(self.params.name(*id).to_string()));
                }
                match out.grads.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.grads.insert(*id, g);
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                if self.needs_grad(*a) {
                    // dA = G * op(B)^T
                    let da = g.matmul(false, self.value(*b), !trans_b);
                    acc(grads, *a, da);
                }
                if self.needs_grad(*b) {
                    let db = if *trans_b {
                        g.matmul(true, self.value(*a), false)
                    } else {
                        self.value(*a).matmul(true, &g, false)
                    };
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs_grad(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs_grad(*b) {
                    acc(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    let vb = self.value(*b);
                    acc(grads, *a, zip_map(&g, vb, |x, y| x * y));
                }
                if self.needs_grad(*b) {
                    let va = self.value(*a);
                    acc(grads, *b, zip_map(&g, va, |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(grads, *a, g.map(|x| x * s));
            }
            Op::AddRow(a, row) => {
                if self.needs_grad(*row) {
                    let mut dr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &x) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(grads, *row, dr);
                }
                if self.needs_grad(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(grads, *a, zip_map(&g, x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }));
            }
            Op::Swish(a) => {
                let x = self.value(*a);
                acc(
                    grads,
                    *a,
                    zip_map(&g, x, |gv, xv| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (T::one() - s))
                    }),
                );
            }
            Op::Glu(a) => {
                let x = self.value(*a);
                let c = g.cols();
                let mut dx = Mat::zeros(x.rows(), 2 * c);
                for r in 0..x.rows() {
                    for j in 0..c {
                        let (lin, gate) = (x.get(r, j), x.get(r, j + c));
                        let s = sigmoid(gate);
                        let gv = g.get(r, j);
                        dx.set(r, j, gv * s);
                        dx.set(r, j + c, gv * lin * s * (T::one() - s));
                    }
                }
                acc(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gv = self.value(*gamma);
                if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.row_mut(0)[c] += g.get(r, c) * xhat.get(r, c);
                            db.row_mut(0)[c] += g.get(r, c);
                        }
                    }
                    if self.needs_grad(*gamma) {
                        acc(grads, *gamma, dg);
                    }
                    if self.needs_grad(*beta) {
                        acc(grads, *beta, db);
                    }
                }
                if self.needs_grad(*x) {
                    let n = T::lit(cols as f64);
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..cols {
                            let d = g.get(r, c) * gv.get(0, c);
                            mean_d += d;
                            mean_dh += d * xhat.get(r, c);
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        for c in 0..cols {
                            let d = g.get(r, c) * gv.get(0, c);
                            dx.set(r, c, inv_std[r] * (d - mean_d - xhat.get(r, c) * mean_dh));
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.as_ref().expect("softmax value");
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot = g.row(r).iter().zip(y.row(r)).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for c in 0..y.cols() {
                        dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                acc(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.as_ref().expect("log_softmax value");
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum = g.row(r).iter().fold(T::zero(), |s, &v| s + v);
                    for c in 0..y.cols() {
                        dx.set(r, c, g.get(r, c) - y.get(r, c).exp() * gsum);
                    }
                }
                acc(grads, *a, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs_grad(p) {
                        let dp = Mat::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        acc(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::Unfold { x, kernel, stride } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Mat::zeros(xv.rows(), c);
                for t in 0..g.rows() {
                    for j in 0..*kernel {
                        let src = &g.row(t)[j * c..(j + 1) * c];
                        for (d, &v) in dx.row_mut(t * stride + j).iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::DepthwiseConv { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (t_len, ch) = xv.shape();
                let k = wv.rows();
                let pad = (k - 1) / 2;
                let mut dx = Mat::zeros(t_len, ch);
                let mut dw = Mat::zeros(k, ch);
                for t in 0..t_len {
                    let gr = g.row(t);
                    for j in 0..k {
                        let src = t + j;
                        if src < pad || src - pad >= t_len {
                            continue;
                        }
                        let s = src - pad;
                        for c in 0..ch {
                            let gv = gr[c];
                            dx.row_mut(s)[c] += gv * wv.get(j, c);
                            dw.row_mut(j)[c] += gv * xv.get(s, c);
                        }
                    }
                }
                if self.needs_grad(*x) {
                    acc(grads, *x, dx);
                }
                if self.needs_grad(*w) {
                    acc(grads, *w, dw);
                }
            }
            Op::RelShift(a) => {
                let t = g.rows();
                let mut dx = Mat::zeros(t, 2 * t - 1);
                for i in 0..t {
                    for j in 0..t {
                        dx.set(i, t - 1 - i + j, g.get(i, j));
                    }
                }
                acc(grads, *a, dx);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Mat::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(grads, *table, dt);
            }
            Op::MaskMul { x, mask } => {
                acc(grads, *x, zip_map(&g, mask, |a, b| a * b));
            }
            Op::Ctc { log_probs, grad } => {
                let s = g.get(0, 0);
                acc(grads, *log_probs, grad.map(|v| v * s));
            }
            Op::CrossEntropy {
                log_probs,
                targets,
                smoothing,
            } => {
                let lp = self.value(*log_probs);
                let n = T::lit(targets.len() as f64);
                let scale = g.get(0, 0) / n;
                let v = T::lit(lp.cols() as f64);
                let mut dx = Mat::filled(lp.rows(), lp.cols(), -scale * *smoothing / v);
                for (r, &y) in targets.iter().enumerate() {
                    let cur = dx.get(r, y);
                    dx.set(r, y, cur - scale * (T::one() - *smoothing));
                }
                acc(grads, *log_probs, dx);
            }
        }
        Ok(())
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Mat<T>, b: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    assert_eq!(a.shape(), b.shape());
    Mat::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn log_softmax_rows<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln();
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::params::uniform;

    /// Builds a scalar loss through `f` and checks every parameter gradient
    /// against central differences.
    fn check(shapes: &[(usize, usize)], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.add(format!("p{i}"), uniform(&mut rng, r, c, 1.0)))
            .collect();
        let eval = |store: &ParamStore<f64>| {
            let mut tape = Tape::new(store, false);
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
            let l = f(&mut tape, &vars);
            tape.scalar(l)
        };
        let grads = {
            let mut tape = Tape::new(&store, true);
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
            let l = f(&mut tape, &vars);
            tape.backward(l).unwrap()
        };
        let h = 1e-6;
        for &id in &ids {
            let (r, c) = store.value(id).shape();
            for i in 0..r {
                for j in 0..c {
                    let orig = store.value(id).get(i, j);
                    store.value_mut(id).set(i, j, orig + h);
                    let up = eval(&store);
                    store.value_mut(id).set(i, j, orig - h);
                    let down = eval(&store);
                    store.value_mut(id).set(i, j, orig);
                    let fd = (up - down) / (2.0 * h);
                    let an = grads.get(id).map_or(0.0, |g| g.get(i, j));
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!((fd - an).abs() / denom < 1e-5, "{} [{i},{j}]: fd {fd} vs analytic {an}", store.name(id));
                }
            }
        }
    }

    fn sum(t: &mut Tape<f64>, x: Var) -> Var {
        // weighted sum so every output entry has a distinct sensitivity
        let (r, c) = t.value(x).shape();
        let w = t.constant(Mat::from_fn(r, c, |i, j| 0.3 + 0.1 * i as f64 - 0.07 * j as f64));
        let p = t.mul(x, w);
        let ones_r = t.constant(Mat::filled(1, r, 1.0));
        let ones_c = t.constant(Mat::filled(c, 1, 1.0));
        let s = t.matmul(ones_r, p);
        t.matmul(s, ones_c)
    }

    #[test]
    fn grad_matmul_and_elementwise() {
        check(&[(3, 4), (4, 5), (5, 4), (1, 5)], |t, v| {
            let a = t.matmul(v[0], v[1]);
            let a = t.add_row(a, v[3]);
            let b = t.matmul_nt(v[0], v[2]);
            let c = t.add(a, b);
            let c = t.swish(c);
            let d = t.relu(c);
            let e = t.mul(c, d);
            let e = t.scale(e, 0.7);
            sum(t, e)
        });
    }

    #[test]
    fn grad_norm_softmax_glu() {
        check(&[(4, 6), (1, 6), (1, 6)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            let s = t.softmax(y, true);
            let g = t.glu(y);
            let ls = t.log_softmax(g);
            let a = sum(t, s);
            let b = sum(t, ls);
            t.add(a, b)
        });
    }

    #[test]
    fn grad_structural_ops() {
        check(&[(7, 3), (3, 3), (5, 2), (4, 9)], |t, v| {
            let u = t.unfold(v[0], 3, 2);
            let dc = t.depthwise_conv(v[0], v[1]);
            let sl = t.slice_cols(dc, 1, 2);
            let cat = t.concat_cols(&[u, u]);
            let g = t.gather_rows(v[2], &[0, 3, 3, 1]);
            let w = t.slice_cols(v[3], 1, 7);
            let rs = t.rel_shift(w);
            let gs = sum(t, g);
            let a = sum(t, cat);
            let b = sum(t, sl);
            let c = sum(t, rs);
            let m = t.mask_mul(v[3], Mat::from_fn(4, 9, |i, j| ((i + j) % 3) as f64));
            let d = sum(t, m);
            let ab = t.add(a, b);
            let cd = t.add(c, d);
            let abcd = t.add(ab, cd);
            t.add(abcd, gs)
        });
    }

    #[test]
    fn grad_losses() {
        check(&[(6, 4), (3, 5)], |t, v| {
            let lp = t.log_softmax(v[0]);
            let c = t.ctc_loss(lp, &[1, 2, 2]);
            let lq = t.log_softmax(v[1]);
            let e = t.cross_entropy(lq, &[4, 0, 2], 0.1);
            let c = t.scale(c, 0.3);
            let e = t.scale(e, 0.7);
            t.add(c, e)
        });
    }

    #[test]
    fn frozen_parameters_never_receive_gradients() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("frozen", Mat::filled(2, 2, 0.5));
        let b = store.add("live", Mat::filled(2, 2, 0.25));
        store.set_trainable(a, false);
        let mut tape = Tape::new(&store, true);
        let (va, vb) = (tape.param(a), tape.param(b));
        let p = tape.matmul(va, vb);
        let ones = tape.constant(Mat::filled(1, 2, 1.0));
        let s = tape.matmul(ones, p);
        let onesc = tape.constant(Mat::filled(2, 1, 1.0));
        let l = tape.matmul(s, onesc);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
        assert_eq!(grads.frozen_sq_norm(&store), 0.0);
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store, false);
        let x = tape.constant(Mat::from_fn(3, 3, |i, j| (i * 3 + j) as f64));
        let s = tape.softmax(x, true);
        let y = tape.value(s);
        assert_eq!(y.get(0, 1), 0.0);
        assert_eq!(y.get(1, 2), 0.0);
        assert!((y.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
