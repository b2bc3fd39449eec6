//! Reverse-mode tape over whole matrices.
//!
//! A [`Graph`] records every op of one forward pass together with its primal
//! value. [`Graph::backward`] replays the tape in reverse and returns
//! gradients for parameters and differentiable inputs. Inference, training
//! and gradient checks all build the same graphs.

use super::{Matrix, ParamId, ParamSet};
use crate::par;
use crate::prob;
use std::f64::consts::LN_2;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    ClampMin(Var, f64),
    AddConst(Var),
    Scale(Var, f64),
    OneMinus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulColBroadcast { x: Var, s: Var },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Gather { x: Var, idx: Vec<Option<usize>> },
    SegmentSoftmax { x: Var, seg: usize },
    SegmentSum { x: Var, seg: usize },
    PoolMean { x: Var, group: Vec<usize>, counts: Vec<usize> },
    LayerNorm { x: Var, eps: f64 },
    LaplaceBits { x: Var, mu: Var, sigma: Var },
    FactorizedBits { x: Var, p: Var },
    Bce { logits: Var, targets: Vec<f64> },
    Mse { a: Var, target: Matrix },
    SumAll(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            Linear { x, w, b } => vec![*x, *w, *b],
            Relu(a) | Sigmoid(a) | Exp(a) | ClampMin(a, _) | AddConst(a) | Scale(a, _)
            | OneMinus(a) | Reshape(a) | SumAll(a) => vec![*a],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            MulColBroadcast { x, s } => vec![*x, *s],
            ConcatCols(v) => v.clone(),
            SliceCols { x, .. }
            | Gather { x, .. }
            | SegmentSoftmax { x, .. }
            | SegmentSum { x, .. }
            | PoolMean { x, .. }
            | LayerNorm { x, .. } => vec![*x],
            LaplaceBits { x, mu, sigma } => vec![*x, *mu, *sigma],
            FactorizedBits { x, p } => vec![*x, *p],
            Bce { logits, .. } => vec![*logits],
            Mse { a, .. } => vec![*a],
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Probability clamp for the cross-entropy.
const BCE_EPS: f64 = 1e-7;

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    params: Vec<Option<Matrix>>,
    nodes: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params[id.index()].as_ref()
    }

    /// Gradient of a differentiable input leaf.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients, zero-filled where a parameter was unused.
    pub fn into_param_grads(self, params: &ParamSet) -> Vec<Matrix> {
        self.params
            .into_iter()
            .zip(params.values())
            .map(|(g, p)| g.unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.shape(), b.shape(), "elementwise shape");
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
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
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf; its gradient is available from [`Grads::wrt`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(m),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(m),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x W^T + b` with `W` of shape out x in and `b` of shape 1 x out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xm, wm, bm) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xm.cols(), wm.cols(), "linear input width");
        assert_eq!(bm.shape(), (1, wm.rows()), "linear bias shape");
        let (n, inw, outw) = (xm.rows(), wm.cols(), wm.rows());
        let mut out = vec![0.0; n * outw];
        par::fill_rows(&mut out, outw, |r, row| {
            linear_row(&xm.data()[r * inw..(r + 1) * inw], wm, bm.data(), row)
        });
        self.push(Matrix::from_vec(n, outw, out), Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let v = self.value(x).map(|a| a.max(lo));
        self.push(v, Op::ClampMin(x, lo))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddConst(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| 1.0 - a);
        self.push(v, Op::OneMinus(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Scale every row of `x` by the matching entry of the column `s`.
    pub fn mul_col_broadcast(&mut self, x: Var, s: Var) -> Var {
        let (xm, sm) = (self.value(x), self.value(s));
        assert_eq!(sm.shape(), (xm.rows(), 1), "broadcast column shape");
        let c = xm.cols();
        let mut out = xm.data().to_vec();
        for r in 0..xm.rows() {
            let f = sm.data()[r];
            out[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= f);
        }
        let m = Matrix::from_vec(xm.rows(), c, out);
        self.push(m, Op::MulColBroadcast { x, s })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows(), rows, "concat row count");
                out.extend_from_slice(m.row(r));
            }
        }
        self.push(Matrix::from_vec(rows, cols, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).cols_slice(start, end);
        self.push(v, Op::SliceCols { x, start })
    }

    /// Reinterpret the row-major data with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = Matrix::from_vec(rows, cols, self.value(x).data().to_vec());
        self.push(v, Op::Reshape(x))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let idx: Vec<Option<usize>> = idx.iter().map(|&i| Some(i)).collect();
        self.gather_rows_padded(x, idx)
    }

    /// Row gather where `None` yields a zero row.
    pub fn gather_rows_padded(&mut self, x: Var, idx: Vec<Option<usize>>) -> Var {
        let xm = self.value(x);
        let c = xm.cols();
        let mut out = vec![0.0; idx.len() * c];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                out[r * c..(r + 1) * c].copy_from_slice(xm.row(i));
            }
        }
        let m = Matrix::from_vec(idx.len(), c, out);
        self.push(m, Op::Gather { x, idx })
    }

    /// Softmax over each block of `seg` consecutive rows, per column.
    pub fn segment_softmax(&mut self, x: Var, seg: usize) -> Var {
        let xm = self.value(x);
        assert!(seg > 0 && xm.rows() % seg == 0, "segment size");
        let c = xm.cols();
        let mut out = vec![0.0; xm.rows() * c];
        par::fill_rows(&mut out, seg * c, |s, block| {
            for j in 0..c {
                let mut m = f64::NEG_INFINITY;
                for k in 0..seg {
                    m = m.max(xm.get(s * seg + k, j));
                }
                let mut z = 0.0;
                for k in 0..seg {
                    let e = (xm.get(s * seg + k, j) - m).exp();
                    block[k * c + j] = e;
                    z += e;
                }
                for k in 0..seg {
                    block[k * c + j] /= z;
                }
            }
        });
        let m = Matrix::from_vec(xm.rows(), c, out);
        self.push(m, Op::SegmentSoftmax { x, seg })
    }

    /// Sum each block of `seg` consecutive rows.
    pub fn segment_sum(&mut self, x: Var, seg: usize) -> Var {
        let xm = self.value(x);
        assert!(seg > 0 && xm.rows() % seg == 0, "segment size");
        let (n, c) = (xm.rows() / seg, xm.cols());
        let mut out = vec![0.0; n * c];
        par::fill_rows(&mut out, c, |s, row| {
            for k in 0..seg {
                for (o, v) in row.iter_mut().zip(xm.row(s * seg + k)) {
                    *o += v;
                }
            }
        });
        self.push(Matrix::from_vec(n, c, out), Op::SegmentSum { x, seg })
    }

    /// Mean of the rows of `x` assigned to each output group.
    pub fn pool_mean(&mut self, x: Var, group: &[usize], n_out: usize) -> Var {
        let xm = self.value(x);
        assert_eq!(group.len(), xm.rows(), "pool group length");
        let c = xm.cols();
        let mut counts = vec![0usize; n_out];
        let mut out = vec![0.0; n_out * c];
        for (r, &g) in group.iter().enumerate() {
            counts[g] += 1;
            for (o, v) in out[g * c..(g + 1) * c].iter_mut().zip(xm.row(r)) {
                *o += v;
            }
        }
        for (g, &n) in counts.iter().enumerate() {
            if n > 0 {
                out[g * c..(g + 1) * c].iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        let m = Matrix::from_vec(n_out, c, out);
        let group = group.to_vec();
        self.push(m, Op::PoolMean { x, group, counts })
    }

    /// Per-row normalization to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xm = self.value(x);
        let c = xm.cols();
        let mut out = vec![0.0; xm.rows() * c];
        par::fill_rows(&mut out, c, |r, row| {
            let (mean, inv) = row_stats(xm.row(r), eps);
            for (o, v) in row.iter_mut().zip(xm.row(r)) {
                *o = (v - mean) * inv;
            }
        });
        let m = Matrix::from_vec(xm.rows(), c, out);
        self.push(m, Op::LayerNorm { x, eps })
    }

    /// Elementwise `-log2 P(x)` under a unit-bin Laplace(mu, sigma).
    pub fn laplace_bits(&mut self, x: Var, mu: Var, sigma: Var) -> Var {
        let (xm, mm, sm) = (self.value(x), self.value(mu), self.value(sigma));
        assert_eq!(xm.shape(), mm.shape());
        assert_eq!(xm.shape(), sm.shape());
        let data = (0..xm.data().len())
            .map(|i| {
                let p = prob::laplace_mass(xm.data()[i], mm.data()[i], sm.data()[i]);
                -p.max(prob::P_MIN).log2()
            })
            .collect();
        let m = Matrix::from_vec(xm.rows(), xm.cols(), data);
        self.push(m, Op::LaplaceBits { x, mu, sigma })
    }

    /// Elementwise `-log2 P(x)` under the per-column factorized model whose
    /// parameters are the rows of `p` (one row per column of `x`).
    pub fn factorized_bits(&mut self, x: Var, p: Var) -> Var {
        let (xm, pm) = (self.value(x), self.value(p));
        assert_eq!(pm.shape(), (xm.cols(), prob::FACTORIZED_PARAMS));
        let c = xm.cols();
        let data = (0..xm.data().len())
            .map(|i| {
                let mass = prob::factorized_mass(xm.data()[i], pm.row(i % c));
                -mass.max(prob::P_MIN).log2()
            })
            .collect();
        let m = Matrix::from_vec(xm.rows(), c, data);
        self.push(m, Op::FactorizedBits { x, p })
    }

    /// Mean binary cross-entropy (natural log) of sigmoid(logits) against
    /// 0/1 targets, probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.data().len(), targets.len(), "bce target count");
        let n = targets.len().max(1) as f64;
        let mut s = 0.0;
        for (&l, &t) in lm.data().iter().zip(targets) {
            let p = sigmoid(l).clamp(BCE_EPS, 1.0 - BCE_EPS);
            s -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        let targets = targets.to_vec();
        self.push(Matrix::filled(1, 1, s / n), Op::Bce { logits, targets })
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, a: Var, target: Matrix) -> Var {
        let am = self.value(a);
        assert_eq!(am.shape(), target.shape(), "mse shape");
        let n = am.data().len().max(1) as f64;
        let s: f64 = am
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Matrix::filled(1, 1, s / n), Op::Mse { a, target })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Matrix::filled(1, 1, s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).data().len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from `out`, seeded with ones of its shape.
    pub fn backward(&self, out: Var) -> Grads {
        let seed = {
            let m = self.value(out);
            Matrix::filled(m.rows(), m.cols(), 1.0)
        };
        self.backward_with(out, seed)
    }

    /// Reverse sweep from `out` with an explicit upstream gradient.
    pub fn backward_with(&self, out: Var, seed: Matrix) -> Grads {
        assert_eq!(seed.shape(), self.value(out).shape(), "seed shape");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Matrix>> = (0..self.params.len()).map(|_| None).collect();
        if self.nodes[out.0].needs_grad {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        accumulate(&mut pgrads[id.index()], g);
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(i, g, &mut grads);
        }
        Grads {
            params: pgrads,
            nodes: grads,
        }
    }

    fn send(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if self.nodes[v.0].needs_grad {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: Matrix, grads: &mut [Option<Matrix>]) {
        let y = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xm, wm) = (self.value(*x), self.value(*w));
                let (n, inw, outw) = (xm.rows(), wm.cols(), wm.rows());
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * inw];
                    par::fill_rows(&mut dx, inw, |r, row| {
                        for o in 0..outw {
                            let go = g.data()[r * outw + o];
                            if go != 0.0 {
                                let wr = &wm.data()[o * inw..(o + 1) * inw];
                                for (d, wv) in row.iter_mut().zip(wr) {
                                    *d += go * wv;
                                }
                            }
                        }
                    });
                    self.send(grads, *x, Matrix::from_vec(n, inw, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; outw * inw];
                    par::fill_rows(&mut dw, inw, |o, row| {
                        for r in 0..n {
                            let go = g.data()[r * outw + o];
                            if go != 0.0 {
                                for (d, xv) in row.iter_mut().zip(xm.row(r)) {
                                    *d += go * xv;
                                }
                            }
                        }
                    });
                    self.send(grads, *w, Matrix::from_vec(outw, inw, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; outw];
                    for r in 0..n {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.send(grads, *b, Matrix::from_vec(1, outw, db));
                }
            }
            Op::Relu(x) => {
                let d = zip_map(&g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 });
                self.send(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv));
                self.send(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = zip_map(&g, y, |gv, yv| gv * yv);
                self.send(grads, *x, d);
            }
            Op::ClampMin(x, lo) => {
                let lo = *lo;
                let d = zip_map(&g, self.value(*x), |gv, xv| if xv > lo { gv } else { 0.0 });
                self.send(grads, *x, d);
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                let xm = self.value(*x);
                let d = Matrix::from_vec(xm.rows(), xm.cols(), g.into_vec());
                self.send(grads, *x, d);
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.send(grads, *x, g.map(|v| v * s));
            }
            Op::OneMinus(x) => self.send(grads, *x, g.map(|v| -v)),
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.send(grads, *b, g.clone());
                }
                self.send(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.send(grads, *b, g.map(|v| -v));
                }
                self.send(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.send(grads, *a, zip_map(&g, self.value(*b), |gv, bv| gv * bv));
                }
                if self.needs(*b) {
                    self.send(grads, *b, zip_map(&g, self.value(*a), |gv, av| gv * av));
                }
            }
            Op::MulColBroadcast { x, s } => {
                let (xm, sm) = (self.value(*x), self.value(*s));
                let c = xm.cols();
                if self.needs(*x) {
                    let mut dx = g.data().to_vec();
                    for r in 0..xm.rows() {
                        let f = sm.data()[r];
                        dx[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= f);
                    }
                    self.send(grads, *x, Matrix::from_vec(xm.rows(), c, dx));
                }
                if self.needs(*s) {
                    let ds = (0..xm.rows())
                        .map(|r| g.row(r).iter().zip(xm.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.send(grads, *s, Matrix::from_vec(xm.rows(), 1, ds));
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        self.send(grads, p, g.cols_slice(start, start + w));
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xm = self.value(*x);
                let mut d = Matrix::zeros(xm.rows(), xm.cols());
                let w = g.cols();
                for r in 0..xm.rows() {
                    d.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                self.send(grads, *x, d);
            }
            Op::Gather { x, idx } => {
                let xm = self.value(*x);
                let c = xm.cols();
                let mut d = Matrix::zeros(xm.rows(), c);
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for (a, b) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                }
                self.send(grads, *x, d);
            }
            Op::SegmentSoftmax { x, seg } => {
                let seg = *seg;
                let c = y.cols();
                let mut d = vec![0.0; y.rows() * c];
                par::fill_rows(&mut d, seg * c, |s, block| {
                    for j in 0..c {
                        let mut dot = 0.0;
                        for k in 0..seg {
                            dot += y.get(s * seg + k, j) * g.get(s * seg + k, j);
                        }
                        for k in 0..seg {
                            let yv = y.get(s * seg + k, j);
                            block[k * c + j] = yv * (g.get(s * seg + k, j) - dot);
                        }
                    }
                });
                self.send(grads, *x, Matrix::from_vec(y.rows(), c, d));
            }
            Op::SegmentSum { x, seg } => {
                let seg = *seg;
                let c = g.cols();
                let rows = g.rows() * seg;
                let mut d = vec![0.0; rows * c];
                par::fill_rows(&mut d, c, |r, row| row.copy_from_slice(g.row(r / seg)));
                self.send(grads, *x, Matrix::from_vec(rows, c, d));
            }
            Op::PoolMean { x, group, counts } => {
                let c = g.cols();
                let mut d = vec![0.0; group.len() * c];
                par::fill_rows(&mut d, c, |r, row| {
                    let k = group[r];
                    let inv = 1.0 / counts[k] as f64;
                    for (o, v) in row.iter_mut().zip(g.row(k)) {
                        *o = v * inv;
                    }
                });
                self.send(grads, *x, Matrix::from_vec(group.len(), c, d));
            }
            Op::LayerNorm { x, eps } => {
                let xm = self.value(*x);
                let c = xm.cols();
                let nf = c as f64;
                let mut d = vec![0.0; xm.rows() * c];
                par::fill_rows(&mut d, c, |r, row| {
                    let (_, inv) = row_stats(xm.row(r), *eps);
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let sg: f64 = gr.iter().sum();
                    let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        row[k] = inv / nf * (nf * gr[k] - sg - yr[k] * sgy);
                    }
                });
                self.send(grads, *x, Matrix::from_vec(xm.rows(), c, d));
            }
            Op::LaplaceBits { x, mu, sigma } => {
                let (xm, mm, sm) = (self.value(*x), self.value(*mu), self.value(*sigma));
                let n = xm.data().len();
                let mut dx = vec![0.0; n];
                let mut dm = vec![0.0; n];
                let mut ds = vec![0.0; n];
                for i in 0..n {
                    let (p, px, pm, ps) =
                        prob::laplace_mass_grad(xm.data()[i], mm.data()[i], sm.data()[i]);
                    if p > prob::P_MIN {
                        let f = -g.data()[i] / (p * LN_2);
                        dx[i] = f * px;
                        dm[i] = f * pm;
                        ds[i] = f * ps;
                    }
                }
                let (r, c) = xm.shape();
                self.send(grads, *x, Matrix::from_vec(r, c, dx));
                self.send(grads, *mu, Matrix::from_vec(r, c, dm));
                self.send(grads, *sigma, Matrix::from_vec(r, c, ds));
            }
            Op::FactorizedBits { x, p } => {
                let (xm, pm) = (self.value(*x), self.value(*p));
                let c = xm.cols();
                let mut dx = vec![0.0; xm.data().len()];
                let mut dp = Matrix::zeros(pm.rows(), pm.cols());
                for i in 0..xm.data().len() {
                    let ch = i % c;
                    let (mass, mx, mp) = prob::factorized_mass_grad(xm.data()[i], pm.row(ch));
                    if mass > prob::P_MIN {
                        let f = -g.data()[i] / (mass * LN_2);
                        dx[i] = f * mx;
                        for (a, b) in dp.row_mut(ch).iter_mut().zip(mp) {
                            *a += f * b;
                        }
                    }
                }
                self.send(grads, *x, Matrix::from_vec(xm.rows(), c, dx));
                self.send(grads, *p, dp);
            }
            Op::Bce { logits, targets } => {
                let lm = self.value(*logits);
                let scale = g.data()[0] / targets.len().max(1) as f64;
                let d = lm
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&l, &t)| {
                        let p = sigmoid(l);
                        if p > BCE_EPS && p < 1.0 - BCE_EPS {
                            (p - t) * scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.send(grads, *logits, Matrix::from_vec(lm.rows(), lm.cols(), d));
            }
            Op::Mse { a, target } => {
                let am = self.value(*a);
                let f = 2.0 * g.data()[0] / am.data().len().max(1) as f64;
                self.send(grads, *a, zip_map(am, target, |x, t| f * (x - t)));
            }
            Op::SumAll(x) => {
                let xm = self.value(*x);
                self.send(grads, *x, Matrix::filled(xm.rows(), xm.cols(), g.data()[0]));
            }
        }
    }
}

/// One output row of `x W^T + b`. Every affine map in the crate goes
/// through this loop, so batched and per-row evaluation agree bit for bit.
pub fn linear_row(x: &[f64], w: &Matrix, b: &[f64], out: &mut [f64]) {
    let inw = w.cols();
    for (o, y) in out.iter_mut().enumerate() {
        let wr = &w.data()[o * inw..(o + 1) * inw];
        let mut s = b[o];
        for i in 0..inw {
            s += x[i] * wr[i];
        }
        *y = s;
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(m) => m.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Numerically stable softmax of a vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}
