//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for parameters and tracked inputs. Tangent (JVP) computations in
//! [`crate::dual`] are themselves recorded here, so gradients flow through
//! them as well.

mod backward;
pub(crate) mod kernels;

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

pub use backward::Grads;
use kernels::ConvGeom;

use crate::error::{bail, Result};
use crate::kancondnet::bspline::BSplineBasis;
use crate::nn::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Elementwise nonlinearities. Each knows its first and second derivative so
/// that tangents can be differentiated once more.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Sigmoid,
    Tanh,
    Exp,
    Rsqrt,
    Recip,
}

impl Unary {
    /// `order`-th derivative at `x`, for `order` in `0..=2`.
    pub fn eval(self, x: f64, order: u8) -> f64 {
        let sig = |x: f64| 1.0 / (1.0 + libm_exp(-x));
        match (self, order) {
            (Unary::Silu, 0) => x * sig(x),
            (Unary::Silu, 1) => {
                let s = sig(x);
                s + x * s * (1.0 - s)
            }
            (Unary::Silu, 2) => {
                let s = sig(x);
                s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
            }
            (Unary::Sigmoid, 0) => sig(x),
            (Unary::Sigmoid, 1) => {
                let s = sig(x);
                s * (1.0 - s)
            }
            (Unary::Sigmoid, 2) => {
                let s = sig(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            (Unary::Tanh, 0) => libm_tanh(x),
            (Unary::Tanh, 1) => {
                let y = libm_tanh(x);
                1.0 - y * y
            }
            (Unary::Tanh, 2) => {
                let y = libm_tanh(x);
                -2.0 * y * (1.0 - y * y)
            }
            (Unary::Exp, _) => libm_exp(x),
            (Unary::Rsqrt, 0) => 1.0 / libm_sqrt(x),
            (Unary::Rsqrt, 1) => -0.5 / (x * libm_sqrt(x)),
            (Unary::Rsqrt, 2) => 0.75 / (x * x * libm_sqrt(x)),
            (Unary::Recip, 0) => 1.0 / x,
            (Unary::Recip, 1) => -1.0 / (x * x),
            (Unary::Recip, 2) => 2.0 / (x * x * x),
            _ => panic!("derivative order {order} of {self:?} is not available"),
        }
    }
}

#[inline]
fn libm_exp(x: f64) -> f64 {
    num_traits::Float::exp(x)
}

#[inline]
fn libm_tanh(x: f64) -> f64 {
    num_traits::Float::tanh(x)
}

#[inline]
fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Shift(Var),
    ScaleRows(Var, Vec<S>),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Unary(Var, Unary, u8),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    SumLast(Var),
    ExpandLast(Var),
    Conv { x: Var, w: Var, geo: ConvGeom },
    ConvT2 { x: Var, w: Var },
    Basis { x: Var, basis: Rc<BSplineBasis>, deriv: u8 },
    RepeatChannels(Var, usize),
    SumAll(Var),
}

pub(crate) struct Node<S> {
    pub(crate) value: Rc<Tensor<S>>,
    pub(crate) op: Op<S>,
    pub(crate) grad: bool,
    pub(crate) param: Option<ParamId>,
}

/// Operation tape bound (optionally) to a parameter store.
pub struct Graph<'s, S: Real> {
    store: Option<&'s ParamStore<S>>,
    track_params: bool,
    nodes: RefCell<Vec<Node<S>>>,
    bound: RefCell<BTreeMap<ParamId, Var>>,
    counts: RefCell<BTreeMap<&'static str, usize>>,
}

impl<'s, S: Real> Graph<'s, S> {
    /// Tape whose parameters are differentiable.
    pub fn new(store: &'s ParamStore<S>) -> Self {
        Self::build(Some(store), true)
    }

    /// Tape for pure evaluation; nothing is differentiable unless an input is
    /// explicitly created with [`Graph::input`].
    pub fn inference(store: &'s ParamStore<S>) -> Self {
        Self::build(Some(store), false)
    }

    /// Tape without parameters.
    pub fn detached() -> Self {
        Self::build(None, false)
    }

    fn build(store: Option<&'s ParamStore<S>>, track_params: bool) -> Self {
        Self {
            store,
            track_params,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(BTreeMap::new()),
            counts: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// How many times an op kind has been recorded (instrumentation).
    pub fn count(&self, kind: &str) -> usize {
        self.counts.borrow().get(kind).copied().unwrap_or(0)
    }

    fn bump(&self, kind: &'static str) {
        *self.counts.borrow_mut().entry(kind).or_insert(0) += 1;
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].grad)
        };
        self.push_rc(Rc::new(value), if grad { op } else { Op::Leaf }, grad, None)
    }

    fn push_rc(&self, value: Rc<Tensor<S>>, op: Op<S>, grad: bool, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, grad, param });
        Var(nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push_rc(Rc::new(value), Op::Leaf, false, None)
    }

    /// Differentiable leaf; its gradient is reported by [`Grads::wrt`].
    pub fn input(&self, value: Tensor<S>) -> Var {
        self.push_rc(Rc::new(value), Op::Leaf, true, None)
    }

    /// Leaf sharing the value of `v` with gradient flow cut.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push_rc(value, Op::Leaf, false, None)
    }

    /// Binds a parameter of the attached store (once per tape).
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push_rc(store.value_rc(id), Op::Leaf, self.track_params, Some(id));
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<S>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(Rc<Tensor<S>>, Rc<Tensor<S>>)> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            bail!(Shape, "{}: {:?} vs {:?}", what, x.shape(), y.shape());
        }
        Ok((x, y))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = self.same_shape(a, b, "add")?;
        Ok(self.push(x.zip_map(&y, |p, q| p + q)?, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = self.same_shape(a, b, "sub")?;
        Ok(self.push(x.zip_map(&y, |p, q| p - q)?, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = self.same_shape(a, b, "mul")?;
        Ok(self.push(x.zip_map(&y, |p, q| p * q)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let x = self.value(a);
        self.push(x.scale(c), Op::Scale(a, c), &[a])
    }

    /// Adds a constant to every element.
    pub fn shift(&self, a: Var, c: S) -> Var {
        let x = self.value(a);
        self.push(x.map(|v| v + c), Op::Shift(a), &[a])
    }

    /// Multiplies slice `i` along axis 0 by `factors[i]`.
    pub fn scale_rows(&self, a: Var, factors: &[S]) -> Result<Var> {
        let x = self.value(a);
        if x.dim(0) != factors.len() {
            bail!(Shape, "scale_rows: {} factors for leading dim {}", factors.len(), x.dim(0));
        }
        let inner = x.len() / factors.len().max(1);
        let data = x.data().iter().enumerate().map(|(i, &v)| v * factors[i / inner]).collect();
        Ok(self.push(Tensor::new(x.shape(), data)?, Op::ScaleRows(a, factors.to_vec()), &[a]))
    }

    fn channel_layout(&self, x: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<(usize, usize, usize, bool)> {
        let s = x.shape();
        if s.len() < 2 {
            bail!(Shape, "{}: input rank {} < 2", what, s.len());
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let per_sample = match b.shape() {
            [bc] if *bc == c => false,
            [bn, bc] if *bn == n && *bc == c => true,
            other => bail!(Shape, "{}: channel operand {:?} for input {:?}", what, other, s),
        };
        Ok((n, c, inner, per_sample))
    }

    /// `x[n, c, ...] + b[c]` (or `b[n, c]`).
    pub fn add_channel(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (n, c, inner, per_sample) = self.channel_layout(&xv, &bv, "add_channel")?;
        let mut out = xv.as_ref().clone();
        let d = out.data_mut();
        for i in 0..n {
            for j in 0..c {
                let add = bv.data()[if per_sample { i * c + j } else { j }];
                for v in &mut d[(i * c + j) * inner..(i * c + j + 1) * inner] {
                    *v = *v + add;
                }
            }
        }
        Ok(self.push(out, Op::AddChannel(x, b), &[x, b]))
    }

    /// `x[n, c, ...] * s[c]` (or `s[n, c]`).
    pub fn mul_channel(&self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (n, c, inner, per_sample) = self.channel_layout(&xv, &sv, "mul_channel")?;
        let mut out = xv.as_ref().clone();
        let d = out.data_mut();
        for i in 0..n {
            for j in 0..c {
                let m = sv.data()[if per_sample { i * c + j } else { j }];
                for v in &mut d[(i * c + j) * inner..(i * c + j + 1) * inner] {
                    *v = *v * m;
                }
            }
        }
        Ok(self.push(out, Op::MulChannel(x, s), &[x, s]))
    }

    /// `order`-th derivative of `f` applied elementwise (`order <= 1`).
    pub fn unary(&self, a: Var, f: Unary, order: u8) -> Var {
        assert!(order <= 1, "only first derivatives can be recorded");
        let x = self.value(a);
        self.push(x.map(|v| S::of(f.eval(v.f64(), order))), Op::Unary(a, f, order), &[a])
    }

    /// Batched matrix product over the last two axes; rank 2 or 3 operands.
    pub fn matmul(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (xs, ys) = (x.shape(), y.shape());
        if xs.len() != ys.len() || !(2..=3).contains(&xs.len()) || (xs.len() == 3 && xs[0] != ys[0]) {
            bail!(Shape, "matmul {:?} x {:?}", xs, ys);
        }
        let r = xs.len();
        let batch = if r == 3 { xs[0] } else { 1 };
        let (m, k) = if ta { (xs[r - 1], xs[r - 2]) } else { (xs[r - 2], xs[r - 1]) };
        let (k2, n) = if tb { (ys[r - 1], ys[r - 2]) } else { (ys[r - 2], ys[r - 1]) };
        if k != k2 {
            bail!(Shape, "matmul inner dims {} vs {} ({:?} x {:?})", k, k2, xs, ys);
        }
        let mut out = vec![S::zero(); batch * m * n];
        kernels::bmm(x.data(), y.data(), &mut out, batch, m, k, n, ta, tb, S::zero());
        let shape: Vec<usize> = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        self.bump("matmul");
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let t = x.as_ref().clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let t = permute_tensor(&x, perm)?;
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Rc<Tensor<S>>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<S>> = vals.iter().map(|v| v.as_ref()).collect();
        let t = Tensor::concat(&refs, axis)?;
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(t, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Sum over the last axis (which is removed).
    pub fn sum_last(&self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.shape();
        let m = *s.last().expect("sum_last on a scalar");
        let data = x.data().chunks(m).map(|c| S::of(c.iter().map(|v| v.f64()).sum())).collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::new(&shape, data).expect("sum_last shape"), Op::SumLast(a), &[a])
    }

    pub fn mean_last(&self, a: Var) -> Var {
        let m = *self.shape(a).last().expect("mean_last on a scalar");
        let s = self.sum_last(a);
        self.scale(s, S::one() / S::of(m as f64))
    }

    /// Repeats every element `m` times along a new trailing axis.
    pub fn expand_last(&self, a: Var, m: usize) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len() * m);
        for &v in x.data() {
            data.extend(core::iter::repeat_n(v, m));
        }
        let mut shape = x.shape().to_vec();
        shape.push(m);
        self.push(Tensor::new(&shape, data).expect("expand_last shape"), Op::ExpandLast(a), &[a])
    }

    /// 2-D convolution; `x: [n, cin, h, w]`, `w: [cout, cin / groups, kh, kw]`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: (usize, usize), groups: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 {
            bail!(Shape, "conv2d expects rank-4 input and kernel, got {:?} and {:?}", xs, ws);
        }
        if groups == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 || ws[1] * groups != xs[1] {
            bail!(Shape, "conv2d channels: input {:?}, kernel {:?}, groups {}", xs, ws, groups);
        }
        if xs[2] + 2 * pad.0 < ws[2] || xs[3] + 2 * pad.1 < ws[3] || stride == 0 {
            bail!(Shape, "conv2d kernel {:?} larger than padded input {:?}", ws, xs);
        }
        let geo = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            ph: pad.0,
            pw: pad.1,
            groups,
        };
        let out = kernels::conv2d(xv.data(), wv.data(), &geo);
        self.bump("conv2d");
        Ok(self.push(Tensor::new(&[geo.n, geo.cout, geo.ho(), geo.wo()], out)?, Op::Conv { x, w, geo }, &[x, w]))
    }

    /// Stride-2 transposed convolution; `w: [cin, cout, 2, 2]`.
    pub fn conv_transpose2(&self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != 2 || ws[3] != 2 {
            bail!(Shape, "conv_transpose2 input {:?} kernel {:?}", xs, ws);
        }
        let (n, cin, h, wd, cout) = (xs[0], xs[1], xs[2], xs[3], ws[1]);
        let out = kernels::conv_t2(xv.data(), wv.data(), n, cin, cout, h, wd);
        self.bump("conv_transpose2");
        Ok(self.push(Tensor::new(&[n, cout, 2 * h, 2 * wd], out)?, Op::ConvT2 { x, w }, &[x, w]))
    }

    /// B-spline basis expansion folded into channels:
    /// `[n, c, ...] -> [n, c * nb, ...]` with channel index `c * nb + b`.
    pub fn basis(&self, x: Var, basis: &Rc<BSplineBasis>, deriv: u8) -> Result<Var> {
        assert!(deriv <= 1, "only first basis derivatives can be recorded");
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 {
            bail!(Shape, "basis expansion needs [n, c, ...], got {:?}", s);
        }
        let nb = basis.len();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let mut out = vec![S::zero(); n * c * nb * inner];
        let mut row = vec![0.0; nb];
        for i in 0..n * c {
            for p in 0..inner {
                basis.eval_into(xv.data()[i * inner + p].f64(), deriv as usize, &mut row);
                for (b, &r) in row.iter().enumerate() {
                    out[(i * nb + b) * inner + p] = S::of(r);
                }
            }
        }
        let mut shape = s.to_vec();
        shape[1] = c * nb;
        self.bump("spline");
        Ok(self.push(Tensor::new(&shape, out)?, Op::Basis { x, basis: basis.clone(), deriv }, &[x]))
    }

    /// `[n, c, ...] -> [n, c * r, ...]`, each channel repeated `r` times in place.
    pub fn repeat_channels(&self, x: Var, r: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 {
            bail!(Shape, "repeat_channels needs [n, c, ...], got {:?}", s);
        }
        let inner: usize = s[2..].iter().product();
        let mut out = Vec::with_capacity(xv.len() * r);
        for chunk in xv.data().chunks(inner) {
            for _ in 0..r {
                out.extend_from_slice(chunk);
            }
        }
        let mut shape = s.to_vec();
        shape[1] *= r;
        Ok(self.push(Tensor::new(&shape, out)?, Op::RepeatChannels(x, r), &[x]))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let x = self.value(a);
        self.push(Tensor::scalar(S::of(x.sum())), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, S::one() / S::of(n as f64))
    }

    /// Mean of squared differences.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        backward::run(self, loss)
    }
}

pub(crate) fn permute_tensor<S: Real>(x: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
    let s = x.shape();
    let r = s.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || core::mem::replace(&mut seen[p], true)) {
        bail!(Shape, "invalid permutation {:?} for rank {}", perm, r);
    }
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; r];
    let data = x.data();
    let last = r - 1;
    let (last_len, last_stride) = (out_shape[last], strides[last]);
    if x.is_empty() {
        return Tensor::new(&out_shape, out);
    }
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..last_len {
            out.push(data[base + j * last_stride]);
        }
        // advance all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::new(&out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}
