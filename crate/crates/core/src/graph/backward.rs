use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::{kernels, permute_tensor, Graph, Op, Var};
use crate::error::{bail, Result};
use crate::nn::ParamId;
use crate::real::Real;
use crate::tensor::Tensor;

/// Gradients collected by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Grads<S> {
    params: BTreeMap<ParamId, Tensor<S>>,
    inputs: BTreeMap<Var, Tensor<S>>,
}

impl<S: Real> Grads<S> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.inputs.get(&v)
    }

    pub fn global_norm(&self) -> f64 {
        num_traits::Float::sqrt(
            self.params.values().map(|t| t.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>()).sum::<f64>(),
        )
    }

    pub fn scale(&mut self, c: S) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v = *v * c;
            }
        }
    }
}

fn acc<S: Real>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn acc_with<S: Real>(slot: &mut Option<Tensor<S>>, shape: &[usize], f: impl FnOnce(&mut [S])) {
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    f(slot.as_mut().expect("slot initialised").data_mut());
}

pub(super) fn run<S: Real>(graph: &Graph<'_, S>, loss: Var) -> Result<Grads<S>> {
    let nodes = graph.nodes.borrow();
    if nodes[loss.0].value.len() != 1 {
        bail!(Shape, "backward needs a scalar loss, got {:?}", nodes[loss.0].value.shape());
    }
    let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
    grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), S::one()));
    let mut out = Grads { params: BTreeMap::new(), inputs: BTreeMap::new() };

    for i in (0..=loss.0).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &nodes[i];
        if !node.grad {
            continue;
        }
        let wants = |v: Var| nodes[v.0].grad;
        let val = |v: Var| nodes[v.0].value.clone();
        match &node.op {
            Op::Leaf => {
                match node.param {
                    Some(id) => {
                        out.params.insert(id, g);
                    }
                    None => {
                        out.inputs.insert(Var(i), g);
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*b) {
                    acc(&mut grads[b.0], g.clone());
                }
                if wants(*a) {
                    acc(&mut grads[a.0], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*b) {
                    acc(&mut grads[b.0], g.scale(-S::one()));
                }
                if wants(*a) {
                    acc(&mut grads[a.0], g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(&mut grads[a.0], g.zip_map(&val(*b), |p, q| p * q)?);
                }
                if wants(*b) {
                    acc(&mut grads[b.0], g.zip_map(&val(*a), |p, q| p * q)?);
                }
            }
            Op::Scale(a, c) => acc(&mut grads[a.0], g.scale(*c)),
            Op::Shift(a) => acc(&mut grads[a.0], g),
            Op::ScaleRows(a, f) => {
                let inner = g.len() / f.len().max(1);
                let d = g.data().iter().enumerate().map(|(j, &v)| v * f[j / inner]).collect();
                acc(&mut grads[a.0], Tensor::new(g.shape(), d)?);
            }
            Op::AddChannel(x, b) | Op::MulChannel(x, b) => {
                let is_mul = matches!(node.op, Op::MulChannel(..));
                let (xv, bv) = (val(*x), val(*b));
                let s = xv.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let per_sample = bv.shape().len() == 2;
                let bidx = |i: usize, j: usize| if per_sample { i * c + j } else { j };
                if wants(*x) {
                    if is_mul {
                        let mut gx = g.clone();
                        let d = gx.data_mut();
                        for i in 0..n {
                            for j in 0..c {
                                let m = bv.data()[bidx(i, j)];
                                for v in &mut d[(i * c + j) * inner..(i * c + j + 1) * inner] {
                                    *v = *v * m;
                                }
                            }
                        }
                        acc(&mut grads[x.0], gx);
                    } else {
                        acc(&mut grads[x.0], g.clone());
                    }
                }
                if wants(*b) {
                    acc_with(&mut grads[b.0], bv.shape(), |gb| {
                        for i in 0..n {
                            for j in 0..c {
                                let r = (i * c + j) * inner..(i * c + j + 1) * inner;
                                let s: f64 = if is_mul {
                                    g.data()[r.clone()].iter().zip(&xv.data()[r]).map(|(p, q)| p.f64() * q.f64()).sum()
                                } else {
                                    g.data()[r].iter().map(|p| p.f64()).sum()
                                };
                                gb[bidx(i, j)] = gb[bidx(i, j)] + S::of(s);
                            }
                        }
                    });
                }
            }
            Op::Unary(a, f, order) => {
                let xv = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &x)| gv * S::of(f.eval(x.f64(), order + 1)))
                    .collect();
                acc(&mut grads[a.0], Tensor::new(g.shape(), d)?);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let r = av.shape().len();
                let batch = if r == 3 { av.dim(0) } else { 1 };
                let (m, k) = if *ta { (av.dim(r - 1), av.dim(r - 2)) } else { (av.dim(r - 2), av.dim(r - 1)) };
                let n = if *tb { bv.dim(r - 2) } else { bv.dim(r - 1) };
                if wants(*a) {
                    // C = A'B'. dA' = dC B'^T ([m,k]); dA = ta ? (B' dC^T) ([k,m]) : dA'.
                    acc_with(&mut grads[a.0], av.shape(), |ga| {
                        if *ta {
                            kernels::bmm(bv.data(), g.data(), ga, batch, k, n, m, *tb, true, S::one());
                        } else {
                            kernels::bmm(g.data(), bv.data(), ga, batch, m, n, k, false, !*tb, S::one());
                        }
                    });
                }
                if wants(*b) {
                    // dB' = A'^T dC ([k,n]); dB = tb ? (dC^T A') ([n,k]) : dB'.
                    acc_with(&mut grads[b.0], bv.shape(), |gb| {
                        if *tb {
                            kernels::bmm(g.data(), av.data(), gb, batch, n, m, k, true, *ta, S::one());
                        } else {
                            kernels::bmm(av.data(), g.data(), gb, batch, k, m, n, !*ta, false, S::one());
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                let shape = nodes[a.0].value.shape().to_vec();
                acc(&mut grads[a.0], g.reshape(&shape)?);
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(&mut grads[a.0], permute_tensor(&g, &inv)?);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = nodes[p.0].value.dim(*axis);
                    if wants(*p) {
                        acc(&mut grads[p.0], g.narrow(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = nodes[x.0].value.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let (full, len) = (shape[*axis], g.dim(*axis));
                acc_with(&mut grads[x.0], &shape, |gx| {
                    for o in 0..outer {
                        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                        let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                });
            }
            Op::SumLast(a) => {
                let shape = nodes[a.0].value.shape().to_vec();
                let m = *shape.last().expect("rank >= 1");
                let mut d = Vec::with_capacity(g.len() * m);
                for &v in g.data() {
                    d.extend(core::iter::repeat_n(v, m));
                }
                acc(&mut grads[a.0], Tensor::new(&shape, d)?);
            }
            Op::ExpandLast(a) => {
                let shape = nodes[a.0].value.shape().to_vec();
                let m = *g.shape().last().expect("rank >= 1");
                let d = g.data().chunks(m).map(|c| S::of(c.iter().map(|v| v.f64()).sum())).collect();
                acc(&mut grads[a.0], Tensor::new(&shape, d)?);
            }
            Op::Conv { x, w, geo } => {
                let (xv, wv) = (val(*x), val(*w));
                let (wx, ww) = (wants(*x), wants(*w));
                let mut gx = wx.then(|| vec![S::zero(); xv.len()]);
                let mut gw = ww.then(|| vec![S::zero(); wv.len()]);
                kernels::conv2d_backward(xv.data(), wv.data(), g.data(), geo, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(gx) = gx {
                    acc(&mut grads[x.0], Tensor::new(xv.shape(), gx)?);
                }
                if let Some(gw) = gw {
                    acc(&mut grads[w.0], Tensor::new(wv.shape(), gw)?);
                }
            }
            Op::ConvT2 { x, w } => {
                let (xv, wv) = (val(*x), val(*w));
                let s = xv.shape();
                let mut gx = wants(*x).then(|| vec![S::zero(); xv.len()]);
                let mut gw = wants(*w).then(|| vec![S::zero(); wv.len()]);
                kernels::conv_t2_backward(
                    xv.data(),
                    wv.data(),
                    g.data(),
                    s[0],
                    s[1],
                    wv.dim(1),
                    s[2],
                    s[3],
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    acc(&mut grads[x.0], Tensor::new(xv.shape(), gx)?);
                }
                if let Some(gw) = gw {
                    acc(&mut grads[w.0], Tensor::new(wv.shape(), gw)?);
                }
            }
            Op::Basis { x, basis, deriv } => {
                let xv = val(*x);
                let s = xv.shape();
                let nb = basis.len();
                let inner: usize = s[2..].iter().product();
                let mut row = vec![0.0; nb];
                let mut gx = vec![S::zero(); xv.len()];
                for i in 0..s[0] * s[1] {
                    for p in 0..inner {
                        basis.eval_into(xv.data()[i * inner + p].f64(), *deriv as usize + 1, &mut row);
                        let mut sum = 0.0;
                        for (b, &r) in row.iter().enumerate() {
                            sum += g.data()[(i * nb + b) * inner + p].f64() * r;
                        }
                        gx[i * inner + p] = S::of(sum);
                    }
                }
                acc(&mut grads[x.0], Tensor::new(s, gx)?);
            }
            Op::RepeatChannels(x, r) => {
                let shape = nodes[x.0].value.shape().to_vec();
                let inner: usize = shape[2..].iter().product();
                let mut gx = vec![S::zero(); nodes[x.0].value.len()];
                for (ci, dst) in gx.chunks_mut(inner).enumerate() {
                    for j in 0..*r {
                        let src = &g.data()[(ci * r + j) * inner..(ci * r + j + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
                acc(&mut grads[x.0], Tensor::new(&shape, gx)?);
            }
            Op::SumAll(a) => {
                let shape = nodes[a.0].value.shape().to_vec();
                acc(&mut grads[a.0], Tensor::full(&shape, g.item()));
            }
        }
    }
    Ok(out)
}
