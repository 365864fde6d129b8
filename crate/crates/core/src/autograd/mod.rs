//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass. Parameters are pulled in lazily from
//! a [`ParamStore`] the first time a layer asks for them, so the same layer
//! code serves training (with [`Graph::backward`]) and inference.

pub mod conv;
pub(crate) mod norm;
pub(crate) mod seq;
pub mod shift;

use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{lit, Float, Tensor};

pub use conv::Conv2dGeom;
pub use shift::ShiftGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    GroupNorm { x: Var, groups: usize, valid: usize, rstd: Vec<T> },
    MeanRows { x: Var, valid: usize },
    DwConv1d { x: Var, w: Var, b: Var, dilation: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dGeom, cols: Vec<T> },
    SpatialMean(Var),
    GateShift { x: Var, w: Var, b: Var, fuse: Var, geom: ShiftGeom, cache: shift::ShiftCache<T> },
    MaxPool { x: Var, arg: Vec<usize> },
    Upsample(Var),
    Gather { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Gru { xg: Var, u: Var, bh: Var, reverse: bool, cache: seq::GruCache<T> },
    Sum(Var),
    WeightedCe { probs: Var, target: Tensor<T>, weights: Vec<T>, eps: T },
    SqErr { pred: Var, target: Tensor<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Float> {
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    train_params: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    nodes: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Float> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.nodes[v.0].as_ref())
    }

    /// Per-parameter gradients in store order (`None` for unused parameters).
    pub fn into_param_grads(mut self, count: usize) -> Vec<Option<Tensor<T>>> {
        (0..count)
            .map(|i| {
                self.param_vars
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| self.nodes[v.0].take())
            })
            .collect()
    }
}

#[inline]
fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (T::one() + th);
    let dinner = c * (T::one() + lit::<T>(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("shape")
}

impl<'p, T: Float> Graph<'p, T> {
    /// Graph whose parameters receive gradients.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            train_params: true,
        }
    }

    /// Graph for inference: parameters are constants.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            train_params: false,
            ..Self::new(params)
        }
    }

    /// Graph without a parameter store (kernel tests).
    pub fn detached() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            train_params: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.leaf(store.shared(id), self.train_params);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Arc::new(t), false)
    }

    /// Leaf that receives a gradient (finite-difference checks, probes).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Arc::new(t), true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a row vector (`d` or `1 x d` elements) to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(r));
        let m = *av.shape().last().expect("rank >= 1");
        assert_eq!(rv.len(), m, "add_row width mismatch");
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(m) {
            for (o, &b) in chunk.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, r), &[a, r])
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(r));
        let m = *av.shape().last().expect("rank >= 1");
        assert_eq!(rv.len(), m, "mul_row width mismatch");
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(m) {
            for (o, &b) in chunk.iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, r), &[a, r])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu_parts(x).0);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a @ b`, or `a @ b^T` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (n, bk) = if trans_b {
            (bv.rows(), bv.cols())
        } else {
            (bv.cols(), bv.rows())
        };
        assert_eq!(k, bk, "matmul inner dimension mismatch");
        let bs = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (av.data(), k as isize, 1),
            (bv.data(), bs.0, bs.1),
            T::zero(),
            (out.data_mut(), n as isize, 1),
        );
        self.push(out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    /// `x @ w + b` with `w: in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    // ---------------------------------------------------------------- normalization

    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let (out, rstd) = norm::layer_norm_fwd(self.value(x), eps);
        self.push(out, Op::LayerNorm { x, rstd }, &[x])
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, valid: usize, eps: T) -> Var {
        let xv = self.value(x);
        assert!(xv.cols() % groups == 0, "groups must divide width");
        assert!(valid >= 1 && valid <= xv.rows(), "invalid valid length");
        let (out, rstd) = norm::group_norm_fwd(xv, groups, valid, eps);
        self.push(out, Op::GroupNorm { x, groups, valid, rstd }, &[x])
    }

    pub fn mean_rows(&mut self, x: Var, valid: usize) -> Var {
        let out = norm::mean_rows_fwd(self.value(x), valid);
        self.push(out, Op::MeanRows { x, valid }, &[x])
    }

    // ---------------------------------------------------------------- convolution

    pub fn dwconv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Var {
        let out = conv::dwconv1d_fwd(self.value(x), self.value(w), self.value(b), dilation);
        self.push(out, Op::DwConv1d { x, w, b, dilation }, &[x, w, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 4, "conv2d input must be [n, c, h, w]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = Conv2dGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let (out, cols) = conv::conv2d_fwd(self.value(x), self.value(w), self.value(b), &geom);
        self.push(out, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b])
    }

    /// `[n, c, h, w] -> [n, c]` spatial average.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let p = xs[2] * xs[3];
        let inv = T::one() / lit::<T>(p as f64);
        let data = self
            .value(x)
            .data()
            .chunks(p)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[xs[0], xs[1]], data).expect("shape");
        self.push(out, Op::SpatialMean(x), &[x])
    }

    pub fn gate_shift(&mut self, x: Var, w: Var, b: Var, fuse: Var, geom: ShiftGeom) -> Var {
        let (out, cache) = shift::gate_shift_fwd(
            self.value(x),
            self.value(w),
            self.value(b),
            self.value(fuse),
            &geom,
        );
        self.push(out, Op::GateShift { x, w, b, fuse, geom, cache }, &[x, w, b, fuse])
    }

    // ---------------------------------------------------------------- sequence ops

    pub fn max_pool(&mut self, x: Var, k: usize) -> Var {
        let (out, arg) = seq::max_pool_fwd(self.value(x), k);
        self.push(out, Op::MaxPool { x, arg }, &[x])
    }

    pub fn upsample(&mut self, x: Var, len: usize) -> Var {
        let out = seq::upsample_fwd(self.value(x), len);
        self.push(out, Op::Upsample(x), &[x])
    }

    /// Selects rows `idx` of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(&[idx.len(), d], data).expect("shape");
        self.push(out, Op::Gather { x, idx }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.data_mut()[i * total + off..i * total + off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let (rows, m) = (xv.rows(), xv.cols());
        assert!(start < end && end <= m, "slice_cols out of range");
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&xv.data()[i * m + start..i * m + end]);
        }
        let out = Tensor::from_vec(&[rows, w], data).expect("shape");
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape).expect("reshape size");
        self.push(out, Op::Reshape(x), &[x])
    }

    /// GRU recurrence; see [`seq::gru_fwd`].
    pub fn gru(&mut self, xg: Var, u: Var, bh: Var, reverse: bool) -> Var {
        let (out, cache) = seq::gru_fwd(self.value(xg), self.value(u), self.value(bh), reverse);
        self.push(out, Op::Gru { xg, u, bh, reverse, cache }, &[xg, u, bh])
    }

    // ---------------------------------------------------------------- reductions & losses

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `sum_i sum_c -w_c * y_ic * ln(max(p_ic, eps))`.
    pub fn weighted_ce(&mut self, probs: Var, target: Tensor<T>, weights: Vec<T>, eps: T) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.shape(), target.shape(), "weighted_ce shape mismatch");
        let m = pv.cols();
        assert_eq!(weights.len(), m, "weighted_ce weight count");
        let mut s = T::zero();
        for (i, (&p, &y)) in pv.data().iter().zip(target.data()).enumerate() {
            if y != T::zero() {
                s -= weights[i % m] * y * p.max(eps).ln();
            }
        }
        self.push(
            Tensor::scalar(s),
            Op::WeightedCe { probs, target, weights, eps },
            &[probs],
        )
    }

    /// Sum of squared differences against a constant target.
    pub fn sq_err(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len(), "sq_err size mismatch");
        let s = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        self.push(Tensor::scalar(s), Op::SqErr { pred, target }, &[pred])
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads {
            nodes: grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*r) {
                    let rv = self.value(*r);
                    let m = rv.len();
                    let mut dr = Tensor::zeros(rv.shape());
                    for chunk in g.data().chunks(m) {
                        for (o, &v) in dr.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *r, dr);
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a), self.value(*r));
                let m = rv.len();
                if self.wants(*a) {
                    let mut da = g.clone();
                    for chunk in da.data_mut().chunks_mut(m) {
                        for (o, &b) in chunk.iter_mut().zip(rv.data()) {
                            *o *= b;
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.wants(*r) {
                    let mut dr = Tensor::zeros(rv.shape());
                    for (gc, ac) in g.data().chunks(m).zip(av.data().chunks(m)) {
                        for j in 0..m {
                            dr.data_mut()[j] += gc[j] * ac[j];
                        }
                    }
                    self.acc(grads, *r, dr);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|v| v * s));
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                if self.wants(*a) {
                    // da = g @ b^T (or g @ b when b was transposed)
                    let mut da = Tensor::zeros(&[m, k]);
                    let bs = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        (g.data(), n as isize, 1),
                        (bv.data(), bs.0, bs.1),
                        T::zero(),
                        (da.data_mut(), k as isize, 1),
                    );
                    self.acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    if *trans_b {
                        // db (n x k) = g^T @ a
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            (g.data(), 1, n as isize),
                            (av.data(), k as isize, 1),
                            T::zero(),
                            (db.data_mut(), k as isize, 1),
                        );
                    } else {
                        // db (k x n) = a^T @ g
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            (av.data(), 1, k as isize),
                            (g.data(), n as isize, 1),
                            T::zero(),
                            (db.data_mut(), n as isize, 1),
                        );
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                self.acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = zip_map(g, self.value(*a), |gv, x| gv * gelu_parts(x).1);
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, out, |gv, y| gv * y * (T::one() - y));
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip_map(g, out, |gv, y| gv * (T::one() - y * y));
                self.acc(grads, *a, d);
            }
            Op::Softmax(a) => {
                let m = out.cols();
                let mut d = Tensor::zeros(out.shape());
                for ((dr, gr), yr) in d
                    .data_mut()
                    .chunks_mut(m)
                    .zip(g.data().chunks(m))
                    .zip(out.data().chunks(m))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for j in 0..m {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { x, rstd } => {
                self.acc(grads, *x, norm::layer_norm_bwd(out, rstd, g));
            }
            Op::GroupNorm { x, groups, valid, rstd } => {
                self.acc(grads, *x, norm::group_norm_bwd(out, rstd, *groups, *valid, g));
            }
            Op::MeanRows { x, valid } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                let m = xv.cols();
                let inv = T::one() / lit::<T>(*valid as f64);
                for i in 0..*valid {
                    for j in 0..m {
                        d.data_mut()[i * m + j] = g.data()[j] * inv;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::DwConv1d { x, w, b, dilation } => {
                let (dx, dw, db) =
                    conv::dwconv1d_bwd(self.value(*x), self.value(*w), *dilation, g);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (dx, dw, db) = conv::conv2d_bwd(cols, self.value(*w), geom, g, self.wants(*x));
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
            Op::SpatialMean(x) => {
                let xs = self.shape(*x);
                let p = xs[2] * xs[3];
                let inv = T::one() / lit::<T>(p as f64);
                let mut d = Tensor::zeros(xs);
                for (chunk, &gv) in d.data_mut().chunks_mut(p).zip(g.data()) {
                    chunk.fill(gv * inv);
                }
                self.acc(grads, *x, d);
            }
            Op::GateShift { x, w, b, fuse, geom, cache } => {
                let (dx, dw, db, df) =
                    shift::gate_shift_bwd(self.value(*x), self.value(*w), cache, geom, g);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
                self.acc(grads, *fuse, df);
            }
            Op::MaxPool { x, arg } => {
                let xv = self.value(*x);
                let m = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                for (k, &src) in arg.iter().enumerate() {
                    d.data_mut()[src * m + k % m] += g.data()[k];
                }
                self.acc(grads, *x, d);
            }
            Op::Upsample(x) => {
                let n = self.value(*x).rows();
                self.acc(grads, *x, seq::upsample_bwd(n, g));
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let m = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..m {
                        d.data_mut()[src * m + j] += g.data()[r * m + j];
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Tensor::zeros(&[rows, w]);
                        for i in 0..rows {
                            d.data_mut()[i * w..(i + 1) * w]
                                .copy_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        self.acc(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, m) = (xv.rows(), xv.cols());
                let w = g.cols();
                let mut d = Tensor::zeros(xv.shape());
                for i in 0..rows {
                    d.data_mut()[i * m + start..i * m + start + w].copy_from_slice(g.row(i));
                }
                self.acc(grads, *x, d);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, g.clone().reshaped(&shape).expect("reshape"));
            }
            Op::Gru { xg, u, bh, reverse, cache } => {
                let (dxg, du, dbh) = seq::gru_bwd(self.value(*u), cache, *reverse, g);
                self.acc(grads, *xg, dxg);
                self.acc(grads, *u, du);
                self.acc(grads, *bh, dbh);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::WeightedCe { probs, target, weights, eps } => {
                let pv = self.value(*probs);
                let m = pv.cols();
                let gv = g.data()[0];
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(i, (&p, &y))| {
                        if y == T::zero() || p <= *eps {
                            T::zero()
                        } else {
                            -gv * weights[i % m] * y / p
                        }
                    })
                    .collect();
                self.acc(grads, *probs, Tensor::from_vec(pv.shape(), data).expect("shape"));
            }
            Op::SqErr { pred, target } => {
                let pv = self.value(*pred);
                let gv = g.data()[0];
                let two = lit::<T>(2.0);
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| gv * two * (a - b))
                    .collect();
                self.acc(grads, *pred, Tensor::from_vec(pv.shape(), data).expect("shape"));
            }
        }
    }
}

#[cfg(test)]
mod tests;
