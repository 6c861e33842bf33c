//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; `backward` walks the
//! tape in reverse and returns gradients for every node, from which the
//! parameter gradients are collected.

use std::borrow::Cow;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One `-log` term of a binary cross-entropy over a probability matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BceTerm {
    pub row: usize,
    pub col: usize,
    pub weight: f64,
    /// `true` scores `-log p`, `false` scores `-log (1 - p)`.
    pub positive: bool,
}

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside log terms.
pub const PROB_EPS: f64 = 1e-7;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    /// Keeps the forward `tanh` values for the backward pass.
    Gelu(Var, Vec<f64>),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    PairwiseSigmoid {
        a: Var,
        b: Var,
        w: Var,
    },
    Bce {
        p: Var,
        terms: Vec<BceTerm>,
    },
    Sum(Vec<Var>),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of a scalar root with respect to the leaves (inputs and
/// parameters) of a graph.
pub struct NodeGrads {
    grads: Vec<Option<Matrix>>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Constant leaf. Gradients are still reported for it by `backward`.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Input)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let store = self.store;
        let v = self.push(Cow::Borrowed(store.value(id)), Op::Param);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Cow::Owned(out), Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(Cow::Owned(out), Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Cow::Owned(out), Op::Add(a, b))
    }

    /// Adds the `1 × c` row vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), self.value(a).cols(), "bias width mismatch");
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(Cow::Owned(out), Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(Cow::Owned(out), Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(Cow::Owned(out), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t: Vec<f64> = x
            .data()
            .iter()
            .map(|&x| (GELU_C * (x + GELU_A * x * x * x)).tanh())
            .collect();
        let out = Matrix::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(&t).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect(),
        );
        self.push(Cow::Owned(out), Op::Gelu(a, t))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Cow::Owned(out), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Cow::Owned(out), Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Cow::Owned(out), Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), cols, "layer norm gain width");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (c, v) in row.iter().enumerate() {
                xh[c] = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                let w = src.cols();
                out.row_mut(r)[off..off + w].copy_from_slice(src.row(r));
                off += w;
            }
        }
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(src.data());
            rows += src.rows();
        }
        self.push(
            Cow::Owned(Matrix::from_vec(rows, cols, data)),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let out = Matrix::from_fn(src.rows(), len, |r, c| src.get(r, start + c));
        self.push(Cow::Owned(out), Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let cols = src.cols();
        let out = Matrix::from_vec(
            len,
            cols,
            src.data()[start * cols..(start + len) * cols].to_vec(),
        );
        self.push(Cow::Owned(out), Op::SliceRows { x, start })
    }

    /// Rows of `table` in the order given by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let out = self.value(table).select_rows(idx);
        self.push(
            Cow::Owned(out),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    /// `out[i][j] = sigmoid(w · relu(a[i] + b[j]))` for `a: u×h`, `b: n×h`,
    /// `w: h×1`. The broadcast `u×n×h` joint tensor is never materialized.
    pub fn pairwise_sigmoid(&mut self, a: Var, b: Var, w: Var) -> Var {
        let (av, bv, wv) = (self.value(a), self.value(b), self.value(w));
        let h = av.cols();
        assert_eq!(bv.cols(), h, "pairwise width mismatch");
        assert_eq!(wv.shape(), (h, 1), "pairwise projection must be h×1");
        let wd = wv.data();
        let out = Matrix::from_fn(av.rows(), bv.rows(), |i, j| {
            let (ai, bj) = (av.row(i), bv.row(j));
            let mut s = 0.0;
            for d in 0..h {
                let z = ai[d] + bj[d];
                if z > 0.0 {
                    s += z * wd[d];
                }
            }
            sigmoid(s)
        });
        self.push(Cow::Owned(out), Op::PairwiseSigmoid { a, b, w })
    }

    /// Weighted sum of clamped `-log p` / `-log (1-p)` terms as a `1×1` node.
    pub fn bce(&mut self, p: Var, terms: Vec<BceTerm>) -> Var {
        let pv = self.value(p);
        let total: f64 = terms
            .iter()
            .map(|t| {
                let q = pv.get(t.row, t.col).clamp(PROB_EPS, 1.0 - PROB_EPS);
                let l = if t.positive { -q.ln() } else { -(1.0 - q).ln() };
                t.weight * l
            })
            .sum();
        self.push(Cow::Owned(Matrix::filled(1, 1, total)), Op::Bce { p, terms })
    }

    /// Sum of `1×1` nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let total: f64 = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.shape(), (1, 1), "sum expects scalars");
                v.get(0, 0)
            })
            .sum();
        self.push(
            Cow::Owned(Matrix::filled(1, 1, total)),
            Op::Sum(parts.to_vec()),
        )
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> NodeGrads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            // Leaves keep their gradient for the caller. Interior gradients
            // are consumed by propagation.
            if matches!(node.op, Op::Input | Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Input | Op::Param => unreachable!("leaves handled above"),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc_with(&mut grads, *a, av.shape(), |m| m.add_matmul_nt(&g, bv));
                    acc_with(&mut grads, *b, bv.shape(), |m| m.add_matmul_tn(av, &g));
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc_with(&mut grads, *a, av.shape(), |m| m.add_matmul(&g, bv));
                    acc_with(&mut grads, *b, bv.shape(), |m| m.add_matmul_tn(&g, av));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc_owned(&mut grads, *b, g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *bias, &gb);
                    acc_owned(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc_with(&mut grads, *a, g.shape(), |m| m.axpy(s, &g));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 });
                    acc_owned(&mut grads, *a, d);
                }
                Op::Gelu(a, t) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for ((d, &x), &t) in d.data_mut().iter_mut().zip(x.data()).zip(t) {
                        let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
                    }
                    acc_owned(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = zip_map(g, y, |g, y| g * (1.0 - y * y));
                    acc_owned(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(g, y, |g, y| g * y * (1.0 - y));
                    acc_owned(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc_owned(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).data();
                    let (rows, cols) = g.shape();
                    let nf = cols as f64;
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let (gr, xh) = (g.row(r), xhat.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            dgamma.data_mut()[c] += gr[c] * xh[c];
                            dbeta.data_mut()[c] += gr[c];
                            let dxh = gr[c] * gv[c];
                            sum_d += dxh;
                            sum_dx += dxh * xh[c];
                        }
                        let is = inv_std[r];
                        let o = dx.row_mut(r);
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            o[c] = is / nf * (nf * dxh - sum_d - xh[c] * sum_dx);
                        }
                    }
                    acc_owned(&mut grads, *gamma, dgamma);
                    acc_owned(&mut grads, *beta, dbeta);
                    acc_owned(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let part = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        acc_owned(&mut grads, p, part);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let part = Matrix::from_vec(
                            h,
                            cols,
                            g.data()[off * cols..(off + h) * cols].to_vec(),
                        );
                        acc_owned(&mut grads, p, part);
                        off += h;
                    }
                }
                Op::SliceCols { x, start } => {
                    let start = *start;
                    let shape = self.value(*x).shape();
                    acc_with(&mut grads, *x, shape, |m| {
                        for r in 0..g.rows() {
                            for c in 0..g.cols() {
                                let v = m.get(r, start + c) + g.get(r, c);
                                m.set(r, start + c, v);
                            }
                        }
                    });
                }
                Op::SliceRows { x, start } => {
                    let start = *start;
                    let shape = self.value(*x).shape();
                    acc_with(&mut grads, *x, shape, |m| {
                        for r in 0..g.rows() {
                            for (o, v) in m.row_mut(start + r).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    });
                }
                Op::GatherRows { table, idx } => {
                    let shape = self.value(*table).shape();
                    acc_with(&mut grads, *table, shape, |m| {
                        for (r, &i) in idx.iter().enumerate() {
                            for (o, v) in m.row_mut(i).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    });
                }
                Op::PairwiseSigmoid { a, b, w } => {
                    let (av, bv, wv) = (self.value(*a), self.value(*b), self.value(*w));
                    let h = av.cols();
                    let wd = wv.data();
                    let mut da = Matrix::zeros(av.rows(), h);
                    let mut db = Matrix::zeros(bv.rows(), h);
                    let mut dw = Matrix::zeros(h, 1);
                    for i in 0..av.rows() {
                        let ai = av.row(i);
                        for j in 0..bv.rows() {
                            let p = y.get(i, j);
                            let ds = g.get(i, j) * p * (1.0 - p);
                            if ds == 0.0 {
                                continue;
                            }
                            let bj = bv.row(j);
                            for d in 0..h {
                                let z = ai[d] + bj[d];
                                if z > 0.0 {
                                    dw.data_mut()[d] += ds * z;
                                    let dz = ds * wd[d];
                                    da.row_mut(i)[d] += dz;
                                    db.row_mut(j)[d] += dz;
                                }
                            }
                        }
                    }
                    acc_owned(&mut grads, *a, da);
                    acc_owned(&mut grads, *b, db);
                    acc_owned(&mut grads, *w, dw);
                }
                Op::Bce { p, terms } => {
                    let pv = self.value(*p);
                    let upstream = g.get(0, 0);
                    let shape = pv.shape();
                    acc_with(&mut grads, *p, shape, |m| {
                        for t in terms {
                            let q = pv.get(t.row, t.col);
                            if q <= PROB_EPS || q >= 1.0 - PROB_EPS {
                                continue;
                            }
                            let d = if t.positive { -1.0 / q } else { 1.0 / (1.0 - q) };
                            let v = m.get(t.row, t.col) + upstream * t.weight * d;
                            m.set(t.row, t.col, v);
                        }
                    });
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, &g);
                    }
                }
            }
        }
        NodeGrads { grads }
    }

    /// Parameter gradients of the scalar `root`.
    pub fn param_grads(&self, root: Var) -> Gradients {
        let mut node_grads = self.backward(root);
        let grads = self
            .param_vars
            .iter()
            .map(|v| v.and_then(|v| node_grads.grads[v.0].take()))
            .collect();
        Gradients::from_vec(grads)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `g[i] = f(g[i], x[i])`, reusing the upstream gradient's buffer.
fn zip_map(mut g: Matrix, x: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    for (g, &x) in g.data_mut().iter_mut().zip(x.data()) {
        *g = f(*g, x);
    }
    g
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut grads[v.0] {
        Some(m) => m.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn acc_owned(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(m) => m.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_with(
    grads: &mut [Option<Matrix>],
    v: Var,
    shape: (usize, usize),
    f: impl FnOnce(&mut Matrix),
) {
    let slot = &mut grads[v.0];
    let m = slot.get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
    f(m);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_difference;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check of every input of a scalar-valued graph.
    fn check(inputs: Vec<Matrix>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let store = ParamStore::new();
        let eval = |xs: &[Matrix]| {
            let mut g = Graph::new(&store);
            let vars: Vec<_> = xs.iter().map(|m| g.input(m.clone())).collect();
            let root = build(&mut g, &vars);
            g.value(root).get(0, 0)
        };
        let mut g = Graph::new(&store);
        let vars: Vec<_> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(inputs[k].rows(), inputs[k].cols()));
            for idx in 0..inputs[k].len() {
                let numeric = central_difference(
                    |x| {
                        let mut xs = inputs.clone();
                        xs[k].data_mut()[idx] = x;
                        eval(&xs)
                    },
                    inputs[k].data()[idx],
                    1e-6,
                );
                let a = analytic.data()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-6, "input {k} entry {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        use rand::Rng;
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
        // Reduce to a scalar through a fixed random projection.
        let (r, c) = g.shape(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let left = g.input(rand_matrix(&mut rng, 1, r));
        let right = g.input(rand_matrix(&mut rng, c, 1));
        let t = g.matmul(left, x);
        g.matmul(t, right)
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 4, 2), rand_matrix(&mut rng, 3, 2)];
        check(inputs, |g, v| {
            let p = g.matmul(v[0], v[1]);
            let q = g.matmul_nt(v[2], v[1]);
            let q = g.tanh(q);
            let s = g.add(p, v[2]);
            let s = g.gelu(s);
            let s = g.sigmoid(s);
            let s = g.scale(s, 1.7);
            let a = weighted_sum(g, s, 5);
            let b = weighted_sum(g, q, 6);
            g.sum(&[a, b])
        });
    }

    #[test]
    fn softmax_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![rand_matrix(&mut rng, 3, 5), rand_matrix(&mut rng, 1, 5), rand_matrix(&mut rng, 1, 5)];
        check(inputs, |g, v| {
            let s = g.softmax_rows(v[0]);
            let n = g.layer_norm(v[0], v[1], v[2]);
            let t = g.add_row(n, v[1]);
            let a = weighted_sum(g, s, 7);
            let b = weighted_sum(g, t, 8);
            g.sum(&[a, b])
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![rand_matrix(&mut rng, 4, 3), rand_matrix(&mut rng, 2, 3)];
        check(inputs, |g, v| {
            let r = g.concat_rows(&[v[0], v[1]]);
            let c = g.concat_cols(&[v[0], v[0]]);
            let sc = g.slice_cols(c, 2, 3);
            let sr = g.slice_rows(r, 1, 4);
            let gr = g.gather_rows(v[1], &[1, 0, 1]);
            let x = weighted_sum(g, sc, 9);
            let y = weighted_sum(g, sr, 10);
            let z = weighted_sum(g, gr, 11);
            g.sum(&[x, y, z])
        });
    }

    #[test]
    fn pairwise_and_bce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 5, 4), rand_matrix(&mut rng, 4, 1)];
        check(inputs, |g, v| {
            let p = g.pairwise_sigmoid(v[0], v[1], v[2]);
            let terms = vec![
                BceTerm { row: 0, col: 1, weight: 1.0, positive: true },
                BceTerm { row: 2, col: 4, weight: 0.5, positive: false },
                BceTerm { row: 1, col: 0, weight: 2.0, positive: true },
            ];
            g.bce(p, terms)
        });
    }

    #[test]
    fn pairwise_matches_explicit_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_matrix(&mut rng, 2, 3);
        let b = rand_matrix(&mut rng, 4, 3);
        let w = rand_matrix(&mut rng, 3, 1);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (va, vb, vw) = (g.input(a.clone()), g.input(b.clone()), g.input(w.clone()));
        let p = g.pairwise_sigmoid(va, vb, vw);
        for i in 0..2 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|d| (a.get(i, d) + b.get(j, d)).max(0.0) * w.get(d, 0)).sum();
                assert!((g.value(p).get(i, j) - sigmoid(s)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn params_are_shared_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let id = store.add_normal("w", ParamGroup::Head, 2, 2, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let s = g.add(a, b);
        let r = weighted_sum(&mut g, s, 1);
        let grads = g.param_grads(r);
        assert!(grads.get(id).is_some());
    }

    #[test]
    fn bce_clamps() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let p = g.input(Matrix::from_vec(1, 2, vec![0.0, 1.0]));
        let l = g.bce(
            p,
            vec![
                BceTerm { row: 0, col: 0, weight: 1.0, positive: true },
                BceTerm { row: 0, col: 1, weight: 1.0, positive: false },
            ],
        );
        let v = g.value(l).get(0, 0);
        assert!(v.is_finite());
        assert!((v - 2.0 * -(PROB_EPS.ln())).abs() < 1e-6);
    }
}
