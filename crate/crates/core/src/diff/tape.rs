//! Reverse-mode differentiation over whole matrices.
//!
//! A [`Tape`] borrows a [`ParamSet`], records every operation in order and
//! replays them backwards in [`Tape::backward`]. Parameters enter only
//! through [`Tape::affine`], so their gradients accumulate directly into a
//! [`Grads`] buffer without copying weights onto the tape.

use super::graph::Adjacency;
use super::matrix::{gemm_nn_acc, gemm_nt, gemm_tn_acc};
use super::params::{Grads, ParamId, ParamSet};
use super::Matrix;
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Affine {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
    },
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    Vstack(Var, Var),
    /// `out[r][c] = x[source[r * cols + c]][c]`.
    SelectMax {
        x: Var,
        source: Vec<u32>,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        scale: Vec<f64>,
    },
    BceSum {
        logits: Var,
        targets: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// `x * w^T + b`, with `w: out x in` and `b: 1 x out`.
    pub fn affine(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.params.get(w);
        if xv.cols() != wv.cols() {
            return Err(contract!(
                "affine {}: input has {} columns, weight expects {}",
                self.params.name(w),
                xv.cols(),
                wv.cols()
            ));
        }
        let mut out = Matrix::zeros(xv.rows(), wv.rows());
        if let Some(b) = b {
            let bv = self.params.get(b);
            if bv.shape() != (1, wv.rows()) {
                return Err(contract!(
                    "affine bias {} has shape {:?}, expected (1, {})",
                    self.params.name(b),
                    bv.shape(),
                    wv.rows()
                ));
            }
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(bv.as_slice());
            }
            gemm_nt(xv, wv, 1.0, &mut out);
        } else {
            gemm_nt(xv, wv, 0.0, &mut out);
        }
        Ok(self.push(out, Op::Affine { x, w, b }, true))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(contract!("add: shapes {:?} and {:?}", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.as_mut_slice() {
            *v = v.max(0.0);
        }
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.as_mut_slice() {
            *v = sigmoid(*v);
        }
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(contract!("concat: {} rows vs {} rows", av.rows(), bv.rows()));
        }
        let cols = av.cols() + bv.cols();
        let mut out = Matrix::zeros(av.rows(), cols);
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), needs))
    }

    /// Row-wise stacking: `a` on top of `b`.
    pub fn vstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(contract!("vstack: {} cols vs {} cols", av.cols(), bv.cols()));
        }
        let mut out = av.clone();
        out.append_rows(bv);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Vstack(a, b), needs))
    }

    /// Elementwise max of `x` over each node's neighbourhood. Ties go to the
    /// lowest neighbour id.
    pub fn neighbor_max(&mut self, x: Var, adj: &Adjacency) -> Result<Var> {
        let xv = self.value(x);
        if adj.len() != xv.rows() {
            return Err(contract!(
                "adjacency over {} nodes applied to {} rows",
                adj.len(),
                xv.rows()
            ));
        }
        let cols = xv.cols();
        let mut out = Matrix::zeros(xv.rows(), cols);
        let mut source = vec![0u32; xv.rows() * cols];
        for j in 0..adj.len() {
            let nbrs = adj.neighbors(j);
            let Some((&first, rest)) = nbrs.split_first() else {
                return Err(contract!("node {j} has an empty neighbourhood"));
            };
            let best = out.row_mut(j);
            best.copy_from_slice(xv.row(first));
            let src = &mut source[j * cols..(j + 1) * cols];
            src.fill(first as u32);
            for &k in rest {
                for (c, &v) in xv.row(k).iter().enumerate() {
                    if v > best[c] {
                        best[c] = v;
                        src[c] = k as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::SelectMax { x, source }, needs))
    }

    /// `1 x cols` elementwise max over the given rows (lowest row wins ties).
    pub fn rows_max(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut sorted = rows.to_vec();
        sorted.sort_unstable();
        let Some((&first, rest)) = sorted.split_first() else {
            return Err(contract!("max over an empty row set"));
        };
        if sorted.last().is_some_and(|&r| r >= xv.rows()) {
            return Err(contract!("row index out of range"));
        }
        let cols = xv.cols();
        let mut out = Matrix::zeros(1, cols);
        let mut source = vec![first as u32; cols];
        out.row_mut(0).copy_from_slice(xv.row(first));
        for &k in rest {
            for (c, &v) in xv.row(k).iter().enumerate() {
                if v > out[(0, c)] {
                    out[(0, c)] = v;
                    source[c] = k as u32;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::SelectMax { x, source }, needs))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let out = self.value(x).select_rows(rows);
        let needs = self.needs(x);
        self.push(
            out,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    pub fn scale_rows(&mut self, x: Var, scale: &[f64]) -> Result<Var> {
        let mut out = self.value(x).clone();
        if scale.len() != out.rows() {
            return Err(contract!("scale_rows: {} factors for {} rows", scale.len(), out.rows()));
        }
        for (r, &s) in scale.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= s;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::ScaleRows {
                x,
                scale: scale.to_vec(),
            },
            needs,
        ))
    }

    /// Sum of binary cross-entropies between `logits` and `targets` (row-major).
    pub fn bce_sum(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.as_slice().len() != targets.len() {
            return Err(contract!(
                "bce: {} logits vs {} targets",
                lv.as_slice().len(),
                targets.len()
            ));
        }
        let loss: f64 = lv
            .as_slice()
            .iter()
            .zip(targets)
            .map(|(&l, &t)| bce_with_logit(l, t))
            .sum();
        let needs = self.needs(logits);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::BceSum {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// `sum_i w_i * v_i` over `1 x 1` values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        let mut needs = false;
        for &(v, w) in terms {
            let m = self.value(v);
            if m.shape() != (1, 1) {
                return Err(contract!("weighted_sum expects scalars, got {:?}", m.shape()));
            }
            total += w * m.as_slice()[0];
            needs |= self.needs(v);
        }
        Ok(self.push(Matrix::scalar(total), Op::WeightedSum(terms.to_vec()), needs))
    }

    /// Gradient of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads = self.params.zero_grads();
        self.backward_into(loss, &mut grads);
        grads
    }

    /// Accumulates the gradient of `loss` into `grads`.
    pub fn backward_into(&self, loss: Var, grads: &mut Grads) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut adj: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    gemm_tn_acc(&dy, xv, grads.get_mut(*w));
                    if let Some(b) = b {
                        let gb = grads.get_mut(*b);
                        for r in 0..dy.rows() {
                            for (g, d) in gb.as_mut_slice().iter_mut().zip(dy.row(r)) {
                                *g += d;
                            }
                        }
                    }
                    if self.needs(*x) {
                        let dx = slot(&mut adj, *x, xv);
                        gemm_nn_acc(&dy, self.params.get(*w), dx);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            slot(&mut adj, v, &dy).add_assign(&dy);
                        }
                    }
                }
                Op::Relu(x) => {
                    if self.needs(*x) {
                        let dx = slot(&mut adj, *x, &dy);
                        for ((g, d), y) in dx
                            .as_mut_slice()
                            .iter_mut()
                            .zip(dy.as_slice())
                            .zip(node.value.as_slice())
                        {
                            if *y > 0.0 {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(*x) {
                        let dx = slot(&mut adj, *x, &dy);
                        for ((g, d), y) in dx
                            .as_mut_slice()
                            .iter_mut()
                            .zip(dy.as_slice())
                            .zip(node.value.as_slice())
                        {
                            *g += d * y * (1.0 - y);
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let ac = self.value(*a).cols();
                    if self.needs(*a) {
                        let da = slot(&mut adj, *a, self.value(*a));
                        for r in 0..dy.rows() {
                            for (g, d) in da.row_mut(r).iter_mut().zip(&dy.row(r)[..ac]) {
                                *g += d;
                            }
                        }
                    }
                    if self.needs(*b) {
                        let db = slot(&mut adj, *b, self.value(*b));
                        for r in 0..dy.rows() {
                            for (g, d) in db.row_mut(r).iter_mut().zip(&dy.row(r)[ac..]) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Vstack(a, b) => {
                    let split = self.value(*a).as_slice().len();
                    if self.needs(*a) {
                        let da = slot(&mut adj, *a, self.value(*a));
                        for (g, d) in da.as_mut_slice().iter_mut().zip(&dy.as_slice()[..split]) {
                            *g += d;
                        }
                    }
                    if self.needs(*b) {
                        let db = slot(&mut adj, *b, self.value(*b));
                        for (g, d) in db.as_mut_slice().iter_mut().zip(&dy.as_slice()[split..]) {
                            *g += d;
                        }
                    }
                }
                Op::SelectMax { x, source } => {
                    if self.needs(*x) {
                        let cols = dy.cols();
                        let dx = slot(&mut adj, *x, self.value(*x));
                        for (idx, (&src, &d)) in source.iter().zip(dy.as_slice()).enumerate() {
                            dx[(src as usize, idx % cols)] += d;
                        }
                    }
                }
                Op::Gather { x, rows } => {
                    if self.needs(*x) {
                        let dx = slot(&mut adj, *x, self.value(*x));
                        for (i, &r) in rows.iter().enumerate() {
                            for (g, d) in dx.row_mut(r).iter_mut().zip(dy.row(i)) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::ScaleRows { x, scale } => {
                    if self.needs(*x) {
                        let dx = slot(&mut adj, *x, &dy);
                        for (r, &s) in scale.iter().enumerate() {
                            for (g, d) in dx.row_mut(r).iter_mut().zip(dy.row(r)) {
                                *g += d * s;
                            }
                        }
                    }
                }
                Op::BceSum { logits, targets } => {
                    if self.needs(*logits) {
                        let scale = dy.as_slice()[0];
                        let lv = self.value(*logits);
                        let dx = slot(&mut adj, *logits, lv);
                        for ((g, &l), &t) in dx.as_mut_slice().iter_mut().zip(lv.as_slice()).zip(targets) {
                            *g += scale * (sigmoid(l) - t);
                        }
                    }
                }
                Op::WeightedSum(terms) => {
                    let d = dy.as_slice()[0];
                    for &(v, w) in terms {
                        if self.needs(v) {
                            slot(&mut adj, v, self.value(v)).as_mut_slice()[0] += w * d;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient slot for `v`, zero-initialised with the shape of `like`.
fn slot<'a>(adj: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    adj[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}
