//! Minimal reverse-mode automatic differentiation over [`Mat`].
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter as
//! leaves tied to a [`ParamId`]; [`Tape::backward`] walks the tape in reverse
//! and returns per-parameter gradients. A tape built with gradients disabled
//! records values only, which is how gradient-free passes are run.
//!
//! Attention is a fused op: it keeps Q, K, V, the output and one
//! log-sum-exp per (head, query) and recomputes the probability matrix during
//! the backward pass, so the stored state of a chunk is linear in its token
//! count.

use std::rc::Rc;

use crate::tensor::{gemm, Mat};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }
}

/// Gradients of one backward pass, aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Mat>>,
    nodes: Vec<Option<Mat>>,
}

impl Gradients {
    /// Zero-filled gradient set shaped like `store`.
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            params: store.values.iter().map(|m| Some(Mat::zeros(m.rows(), m.cols()))).collect(),
            nodes: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Overwrite the gradient of one parameter, e.g. one computed outside a tape.
    pub fn set_param(&mut self, id: ParamId, grad: Mat) {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        self.params[id.0] = Some(grad);
    }

    /// Gradient reaching an intermediate node, if any reached it.
    pub fn of(&self, var: Var) -> Option<&Mat> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Accumulate `other` into `self`, param by param.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    /// Global L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.params.iter().flatten().map(Mat::sum_sq).sum::<f64>().sqrt()
    }

    pub fn drop_node_grads(&mut self) {
        self.nodes = Vec::new();
    }
}

/// Cached rotary sin/cos factors for one (position range, head width).
#[derive(Debug)]
struct RotaryFactors {
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
}

impl RotaryFactors {
    fn new(start: usize, n: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for j in 0..n {
            let pos = (start + j) as f64;
            for i in 0..half {
                let inv_freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                let (s, c) = (pos * inv_freq).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self { cos, sin, half }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Rotary { x: Var, heads: usize, factors: Rc<RotaryFactors> },
    Attention { q: Var, ks: Vec<Var>, vs: Vec<Var>, heads: usize, mask: Option<Rc<Vec<bool>>>, lse: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRow(Var, usize),
    BroadcastRows(Var),
    Mse(Var, Rc<Mat>),
    DotConst(Var, Rc<Mat>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    differentiable_elems: usize,
}

const RMS_EPS: f64 = 1e-6;

impl Tape {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, differentiable_elems: 0 }
    }

    /// A tape for gradient-free evaluation; parameters enter as constants.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, differentiable_elems: 0 }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of `f64`s held by intermediate nodes that participate in the
    /// backward pass. Parameter and constant leaves are excluded.
    pub fn differentiable_activations(&self) -> usize {
        self.differentiable_elems
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if requires_grad {
            self.differentiable_elems += value.len();
        }
        // Values of gradient-free nodes are still needed by later ops.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Param(id), requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Adds the `1 × n` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row expects a single row");
        assert_eq!(xv.cols(), bv.cols(), "add_row width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b), &[x, b])
    }

    /// `x · w + b` for a `1 × n` bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Row-wise RMS normalisation with a learned `1 × n` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let (xv, gv) = (self.value(x), self.value(gain));
        let n = xv.cols();
        let mut out = Mat::zeros(xv.rows(), n);
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|a| a * a).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, &a), &g) in out.row_mut(r).iter_mut().zip(row).zip(gv.row(0)) {
                *o = a * inv * g;
            }
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Rotary position embedding over interleaved channel pairs of each head;
    /// row `j` is rotated as position `start + j`.
    pub fn rotary(&mut self, x: Var, heads: usize, start: usize, base: f64) -> Var {
        let xv = self.value(x);
        let head_dim = xv.cols() / heads;
        assert_eq!(head_dim * heads, xv.cols());
        assert_eq!(head_dim % 2, 0, "rotary needs an even head width");
        let factors = Rc::new(RotaryFactors::new(start, xv.rows(), head_dim, base));
        let out = apply_rotary(xv, heads, &factors, false);
        self.push(out, Op::Rotary { x, heads, factors }, &[x])
    }

    /// Multi-head scaled dot-product attention over keys and values given as
    /// row blocks `ks[i]`, `vs[i]`, read in order as one key sequence. The
    /// blocks are never stacked on the tape. `mask[i * n_k + j]` allows query
    /// `i` to see key `j`; `None` means every key is visible.
    pub fn attention(&mut self, q: Var, ks: &[Var], vs: &[Var], heads: usize, mask: Option<Rc<Vec<bool>>>) -> Var {
        let (kv, vv) = (self.stack(ks), self.stack(vs));
        let qv = self.value(q);
        assert_eq!(qv.cols(), kv.cols());
        assert_eq!(kv.shape(), vv.shape());
        if let Some(m) = &mask {
            assert_eq!(m.len(), qv.rows() * kv.rows(), "attention mask shape");
        }
        let (out, lse) = attention_forward(qv, &kv, &vv, heads, mask.as_deref().map(Vec::as_slice));
        let inputs: Vec<Var> = std::iter::once(q).chain(ks.iter().copied()).chain(vs.iter().copied()).collect();
        self.push(out, Op::Attention { q, ks: ks.to_vec(), vs: vs.to_vec(), heads, mask, lse }, &inputs)
    }

    fn stack(&self, parts: &[Var]) -> Mat {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        Mat::vstack(&mats)
    }

    /// Send row blocks of `g` to `parts`.
    fn send_rows(&self, grads: &mut [Option<Mat>], parts: &[Var], g: &Mat) {
        let mut off = 0;
        for p in parts {
            let rows = self.value(*p).rows();
            let start = off;
            self.send(grads, *p, || Mat::from_vec(rows, g.cols(), g.data()[start * g.cols()..(start + rows) * g.cols()].to_vec()));
            off += rows;
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Mat::vstack(&mats);
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Mat::hstack(&mats);
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row `index` of `table` as a `1 × n` matrix.
    pub fn select_row(&mut self, table: Var, index: usize) -> Var {
        let t = self.value(table);
        assert!(index < t.rows(), "row {index} out of range for {} rows", t.rows());
        let v = Mat::from_vec(1, t.cols(), t.row(index).to_vec());
        self.push(v, Op::SelectRow(table, index), &[table])
    }

    /// Repeat a `1 × n` row `rows` times.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut v = Mat::zeros(rows, r.cols());
        for i in 0..rows {
            v.row_mut(i).copy_from_slice(r.row(0));
        }
        self.push(v, Op::BroadcastRows(row), &[row])
    }

    /// Mean squared error against a constant target, as a `1 × 1` node.
    pub fn mse(&mut self, x: Var, target: Rc<Mat>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse shape mismatch");
        let n = xv.len().max(1) as f64;
        let s = xv.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        self.push(Mat::filled(1, 1, s), Op::Mse(x, target), &[x])
    }

    /// `Σ x ⊙ g` for a constant `g`; its gradient with respect to `x` is `g`.
    pub fn dot_const(&mut self, x: Var, g: Rc<Mat>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), g.shape(), "dot_const shape mismatch");
        let s = xv.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>();
        self.push(Mat::filled(1, 1, s), Op::DotConst(x, g), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Mat::filled(1, 1, s), Op::Sum(x), &[x])
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        self.backward_from(&[(loss, Mat::filled(1, 1, 1.0))])
    }

    /// Backpropagate from explicit upstream gradients on any set of nodes.
    pub fn backward_from(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Mat>> = Vec::new();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape");
            accumulate(&mut grads[v.0], g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if param_grads.len() <= id.0 {
                        param_grads.resize(id.0 + 1, None);
                    }
                    accumulate(&mut param_grads[id.0], g.clone());
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let ga = gemm(&g, false, self.value(*b), true);
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = gemm(self.value(*a), true, &g, false);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, || g.clone());
                    self.send(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.send(&mut grads, *a, || g.clone());
                    self.send(&mut grads, *b, || g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    self.send(&mut grads, *a, || g.zip_map(self.value(*b), |x, y| x * y));
                    self.send(&mut grads, *b, || g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::Scale(a, s) => self.send(&mut grads, *a, || g.map(|x| x * s)),
                Op::AddRow(x, b) => {
                    self.send(&mut grads, *b, || column_sums(&g));
                    self.send(&mut grads, *x, || g.clone());
                }
                Op::Gelu(x) => self.send(&mut grads, *x, || g.zip_map(self.value(*x), |gg, xx| gg * gelu_grad(xx))),
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let n = xv.cols() as f64;
                    if self.requires_grad(*gain) {
                        let mut dg = Mat::zeros(1, xv.cols());
                        for r in 0..xv.rows() {
                            let inv = inv_rms[r];
                            for ((d, &a), &gg) in dg.row_mut(0).iter_mut().zip(xv.row(r)).zip(g.row(r)) {
                                *d += gg * a * inv;
                            }
                        }
                        accumulate(&mut grads[gain.0], dg);
                    }
                    if self.requires_grad(*x) {
                        let mut dx = Mat::zeros(xv.rows(), xv.cols());
                        for r in 0..xv.rows() {
                            let inv = inv_rms[r];
                            let row = xv.row(r);
                            let dot: f64 = row.iter().zip(g.row(r)).zip(gv.row(0)).map(|((a, gg), w)| a * gg * w).sum();
                            let coef = inv * inv * inv * dot / n;
                            for (((d, &a), &gg), &w) in dx.row_mut(r).iter_mut().zip(row).zip(g.row(r)).zip(gv.row(0)) {
                                *d = inv * gg * w - a * coef;
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Rotary { x, heads, factors } => {
                    self.send(&mut grads, *x, || apply_rotary(&g, *heads, factors, true));
                }
                Op::Attention { q, ks, vs, heads, mask, lse } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        &self.stack(ks),
                        &self.stack(vs),
                        &node.value,
                        &g,
                        *heads,
                        mask.as_deref().map(Vec::as_slice),
                        lse,
                    );
                    self.send(&mut grads, *q, || dq);
                    self.send_rows(&mut grads, ks, &dk);
                    self.send_rows(&mut grads, vs, &dv);
                }
                Op::ConcatRows(parts) => self.send_rows(&mut grads, parts, &g),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        let start = off;
                        self.send(&mut grads, *p, || g.cols_range(start, cols));
                        off += cols;
                    }
                }
                Op::SelectRow(table, index) => {
                    let t = self.value(*table);
                    self.send(&mut grads, *table, || {
                        let mut d = Mat::zeros(t.rows(), t.cols());
                        d.row_mut(*index).copy_from_slice(g.row(0));
                        d
                    });
                }
                Op::BroadcastRows(row) => self.send(&mut grads, *row, || column_sums(&g)),
                Op::Mse(x, target) => {
                    let xv = self.value(*x);
                    let s = 2.0 * g.get(0, 0) / xv.len().max(1) as f64;
                    self.send(&mut grads, *x, || xv.zip_map(target, |a, b| s * (a - b)));
                }
                Op::DotConst(x, c) => {
                    let s = g.get(0, 0);
                    self.send(&mut grads, *x, || c.map(|a| a * s));
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    self.send(&mut grads, *x, || Mat::filled(xv.rows(), xv.cols(), g.get(0, 0)));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { params: param_grads, nodes: grads }
    }

    fn send(&self, grads: &mut [Option<Mat>], to: Var, g: impl FnOnce() -> Mat) {
        if self.requires_grad(to) {
            accumulate(&mut grads[to.0], g());
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn apply_rotary(x: &Mat, heads: usize, f: &RotaryFactors, inverse: bool) -> Mat {
    let head_dim = x.cols() / heads;
    let mut out = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let src = x.row(r);
        let cos = &f.cos[r * f.half..(r + 1) * f.half];
        let sin = &f.sin[r * f.half..(r + 1) * f.half];
        let dst = out.row_mut(r);
        for h in 0..heads {
            let base = h * head_dim;
            for i in 0..f.half {
                let (a, b) = (src[base + 2 * i], src[base + 2 * i + 1]);
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                dst[base + 2 * i] = a * c - b * s;
                dst[base + 2 * i + 1] = a * s + b * c;
            }
        }
    }
    out
}

/// Attention scores `Q_h K_hᵀ / √d` for one head, with masked entries at -∞.
fn head_scores(qh: &Mat, kh: &Mat, mask: Option<&[bool]>) -> Mat {
    let scale = 1.0 / (qh.cols() as f64).sqrt();
    let mut s = qh.matmul_t(kh);
    s.scale_assign(scale);
    if let Some(m) = mask {
        for (x, &keep) in s.data_mut().iter_mut().zip(m) {
            if !keep {
                *x = f64::NEG_INFINITY;
            }
        }
    }
    s
}

fn attention_forward(q: &Mat, k: &Mat, v: &Mat, heads: usize, mask: Option<&[bool]>) -> (Mat, Vec<f64>) {
    let d = q.cols() / heads;
    assert_eq!(d * heads, q.cols(), "width not divisible by heads");
    let nq = q.rows();
    let mut out = Mat::zeros(nq, q.cols());
    let mut lse = vec![0.0; heads * nq];
    for h in 0..heads {
        let (qh, kh, vh) = (q.cols_range(h * d, d), k.cols_range(h * d, d), v.cols_range(h * d, d));
        let mut p = head_scores(&qh, &kh, mask);
        for i in 0..nq {
            let row = p.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                row.iter_mut().for_each(|x| *x = 0.0);
                lse[h * nq + i] = f64::NEG_INFINITY;
                continue;
            }
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
            lse[h * nq + i] = m + z.ln();
        }
        let oh = p.matmul(&vh);
        for i in 0..nq {
            out.row_mut(i)[h * d..(h + 1) * d].copy_from_slice(oh.row(i));
        }
    }
    (out, lse)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    out: &Mat,
    g: &Mat,
    heads: usize,
    mask: Option<&[bool]>,
    lse: &[f64],
) -> (Mat, Mat, Mat) {
    let d = q.cols() / heads;
    let (nq, nk) = (q.rows(), k.rows());
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Mat::zeros(nq, q.cols());
    let mut dk = Mat::zeros(nk, k.cols());
    let mut dv = Mat::zeros(nk, v.cols());
    for h in 0..heads {
        let (qh, kh, vh) = (q.cols_range(h * d, d), k.cols_range(h * d, d), v.cols_range(h * d, d));
        let (gh, oh) = (g.cols_range(h * d, d), out.cols_range(h * d, d));
        let mut p = head_scores(&qh, &kh, mask);
        for i in 0..nq {
            let l = lse[h * nq + i];
            for x in p.row_mut(i) {
                *x = if l == f64::NEG_INFINITY { 0.0 } else { (*x - l).exp() };
            }
        }
        let dvh = p.t_matmul(&gh);
        let mut ds = gh.matmul_t(&vh);
        for i in 0..nq {
            let di: f64 = gh.row(i).iter().zip(oh.row(i)).map(|(a, b)| a * b).sum();
            for (x, &pp) in ds.row_mut(i).iter_mut().zip(p.row(i)) {
                *x = pp * (*x - di) * scale;
            }
        }
        let dqh = ds.matmul(&kh);
        let dkh = ds.t_matmul(&qh);
        for i in 0..nq {
            dq.row_mut(i)[h * d..(h + 1) * d].copy_from_slice(dqh.row(i));
        }
        for j in 0..nk {
            dk.row_mut(j)[h * d..(h + 1) * d].copy_from_slice(dkh.row(j));
            dv.row_mut(j)[h * d..(h + 1) * d].copy_from_slice(dvh.row(j));
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks the gradient of every parameter by central differences.
    fn check(store: &ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Var) {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store);
        let grads = tape.backward(loss);
        let eps = 1e-5;
        for id in store.ids() {
            let g = grads.param(id).cloned().unwrap_or_else(|| Mat::zeros(store.get(id).rows(), store.get(id).cols()));
            for i in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[i] += eps;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[i] -= eps;
                let eval = |s: &ParamStore| {
                    let mut t = Tape::no_grad();
                    let l = f(&mut t, s);
                    t.value(l).get(0, 0)
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = g.data()[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{} [{i}]: fd {fd} vs analytic {an}", store.name(id));
            }
        }
    }

    #[test]
    fn elementwise_and_linear_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_mat(&mut rng, 3, 4));
        let w = store.add("w", rand_mat(&mut rng, 4, 5));
        let b = store.add("b", rand_mat(&mut rng, 1, 5));
        let g = store.add("g", rand_mat(&mut rng, 1, 5));
        let target = Rc::new(rand_mat(&mut rng, 3, 5));
        check(&store, |t, s| {
            let (x, w, b, g) = (t.param(s, x), t.param(s, w), t.param(s, b), t.param(s, g));
            let h = t.linear(x, w, Some(b));
            let h = t.gelu(h);
            let n = t.rms_norm(h, g);
            let m = t.mul(n, h);
            let d = t.sub(m, h);
            let e = t.scale(d, 0.7);
            t.mse(e, target.clone())
        });
    }

    #[test]
    fn attention_rotary_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let q = store.add("q", rand_mat(&mut rng, 3, 8));
        let k1 = store.add("k1", rand_mat(&mut rng, 2, 8));
        let k2 = store.add("k2", rand_mat(&mut rng, 3, 8));
        let v = store.add("v", rand_mat(&mut rng, 5, 8));
        let table = store.add("table", rand_mat(&mut rng, 4, 8));
        let dir = Rc::new(rand_mat(&mut rng, 3, 8));
        let mut mask = vec![true; 15];
        mask[3] = false;
        mask[9] = false;
        let mask = Rc::new(mask);
        check(&store, |t, s| {
            let q = t.param(s, q);
            let q = t.rotary(q, 2, 7, 100.0);
            let (k1, k2) = (t.param(s, k1), t.param(s, k2));
            let k1 = t.rotary(k1, 2, 0, 100.0);
            let k = t.concat_rows(&[k1, k2]);
            let v = t.param(s, v);
            let o = t.attention(q, &[k], &[v], 2, Some(mask.clone()));
            let o2 = t.attention(q, &[k1, k2], &[v], 2, None);
            let o = t.add(o, o2);
            let table = t.param(s, table);
            let row = t.select_row(table, 2);
            let o = t.add_row(o, row);
            let wide = t.concat_cols(&[o, o]);
            let s1 = t.sum(wide);
            let s2 = t.dot_const(o, dir.clone());
            let rows = t.broadcast_rows(row, 3);
            let s3 = t.dot_const(rows, dir.clone());
            let a = t.add(s1, s2);
            t.add(a, s3)
        });
    }

    #[test]
    fn no_grad_tape_tracks_nothing() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::filled(2, 2, 1.0));
        let mut t = Tape::no_grad();
        let w = t.param(&store, w);
        let y = t.matmul(w, w);
        assert!(!t.requires_grad(y));
        assert_eq!(t.differentiable_activations(), 0);
        assert_eq!(t.value(y).get(0, 0), 2.0);
    }

    #[test]
    fn attention_rows_sum_to_one_for_constant_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::no_grad();
        let q = t.constant(rand_mat(&mut rng, 4, 6));
        let k = t.constant(rand_mat(&mut rng, 5, 6));
        let v = t.constant(Mat::filled(5, 6, 2.5));
        let o = t.attention(q, &[k], &[v], 3, None);
        assert!(t.value(o).data().iter().all(|x| (x - 2.5).abs() < 1e-12));
    }
}
