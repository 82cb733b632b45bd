//! Forward-mode tangents carried alongside primal values.
//!
//! A [`Dual`] pairs a primal [`Var`] with an optional tangent `Var`. Every
//! function here records both the primal op and its linearisation on the same
//! tape, so a network written against these functions yields a Jacobian-vector
//! product in one pass and that product stays differentiable by
//! [`Graph::backward`]. Parameters never carry tangents.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Unary, Var};
use crate::kancondnet::bspline::BSplineBasis;
use crate::real::Real;
use crate::tensor::Tensor;
use alloc::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dual {
    pub p: Var,
    pub t: Option<Var>,
}

impl Dual {
    pub fn new(p: Var, t: Var) -> Self {
        Self { p, t: Some(t) }
    }

    /// Value with zero tangent.
    pub fn constant(p: Var) -> Self {
        Self { p, t: None }
    }
}

impl From<Var> for Dual {
    fn from(p: Var) -> Self {
        Self::constant(p)
    }
}

fn zeros_like<S: Real>(g: &Graph<'_, S>, v: Var) -> Var {
    g.constant(Tensor::zeros(&g.shape(v)))
}

fn sum_opt<S: Real>(g: &Graph<'_, S>, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, b) => a.or(b),
    })
}

pub fn add<S: Real>(g: &Graph<'_, S>, a: Dual, b: Dual) -> Result<Dual> {
    Ok(Dual { p: g.add(a.p, b.p)?, t: sum_opt(g, a.t, b.t)? })
}

pub fn sub<S: Real>(g: &Graph<'_, S>, a: Dual, b: Dual) -> Result<Dual> {
    let t = match (a.t, b.t) {
        (Some(x), Some(y)) => Some(g.sub(x, y)?),
        (Some(x), None) => Some(x),
        (None, Some(y)) => Some(g.scale(y, -S::one())),
        (None, None) => None,
    };
    Ok(Dual { p: g.sub(a.p, b.p)?, t })
}

pub fn mul<S: Real>(g: &Graph<'_, S>, a: Dual, b: Dual) -> Result<Dual> {
    let left = a.t.map(|t| g.mul(t, b.p)).transpose()?;
    let right = b.t.map(|t| g.mul(a.p, t)).transpose()?;
    Ok(Dual { p: g.mul(a.p, b.p)?, t: sum_opt(g, left, right)? })
}

pub fn scale<S: Real>(g: &Graph<'_, S>, a: Dual, c: S) -> Dual {
    Dual { p: g.scale(a.p, c), t: a.t.map(|t| g.scale(t, c)) }
}

pub fn shift<S: Real>(g: &Graph<'_, S>, a: Dual, c: S) -> Dual {
    Dual { p: g.shift(a.p, c), t: a.t }
}

pub fn scale_rows<S: Real>(g: &Graph<'_, S>, a: Dual, factors: &[S]) -> Result<Dual> {
    Ok(Dual { p: g.scale_rows(a.p, factors)?, t: a.t.map(|t| g.scale_rows(t, factors)).transpose()? })
}

pub fn add_channel<S: Real>(g: &Graph<'_, S>, x: Dual, b: Dual) -> Result<Dual> {
    let t = match (x.t, b.t) {
        (tx, Some(tb)) => {
            let base = tx.unwrap_or_else(|| zeros_like(g, x.p));
            Some(g.add_channel(base, tb)?)
        }
        (tx, None) => tx,
    };
    Ok(Dual { p: g.add_channel(x.p, b.p)?, t })
}

pub fn mul_channel<S: Real>(g: &Graph<'_, S>, x: Dual, s: Dual) -> Result<Dual> {
    let left = x.t.map(|t| g.mul_channel(t, s.p)).transpose()?;
    let right = s.t.map(|t| g.mul_channel(x.p, t)).transpose()?;
    Ok(Dual { p: g.mul_channel(x.p, s.p)?, t: sum_opt(g, left, right)? })
}

pub fn unary<S: Real>(g: &Graph<'_, S>, a: Dual, f: Unary) -> Result<Dual> {
    let p = g.unary(a.p, f, 0);
    let t = match a.t {
        Some(t) => {
            let d = g.unary(a.p, f, 1);
            Some(g.mul(d, t)?)
        }
        None => None,
    };
    Ok(Dual { p, t })
}

pub fn silu<S: Real>(g: &Graph<'_, S>, a: Dual) -> Result<Dual> {
    unary(g, a, Unary::Silu)
}

pub fn matmul<S: Real>(g: &Graph<'_, S>, a: Dual, b: Dual, ta: bool, tb: bool) -> Result<Dual> {
    let left = a.t.map(|t| g.matmul(t, b.p, ta, tb)).transpose()?;
    let right = b.t.map(|t| g.matmul(a.p, t, ta, tb)).transpose()?;
    Ok(Dual { p: g.matmul(a.p, b.p, ta, tb)?, t: sum_opt(g, left, right)? })
}

pub fn reshape<S: Real>(g: &Graph<'_, S>, a: Dual, shape: &[usize]) -> Result<Dual> {
    Ok(Dual { p: g.reshape(a.p, shape)?, t: a.t.map(|t| g.reshape(t, shape)).transpose()? })
}

pub fn permute<S: Real>(g: &Graph<'_, S>, a: Dual, perm: &[usize]) -> Result<Dual> {
    Ok(Dual { p: g.permute(a.p, perm)?, t: a.t.map(|t| g.permute(t, perm)).transpose()? })
}

pub fn narrow<S: Real>(g: &Graph<'_, S>, a: Dual, axis: usize, start: usize, len: usize) -> Result<Dual> {
    Ok(Dual {
        p: g.narrow(a.p, axis, start, len)?,
        t: a.t.map(|t| g.narrow(t, axis, start, len)).transpose()?,
    })
}

pub fn concat<S: Real>(g: &Graph<'_, S>, parts: &[Dual], axis: usize) -> Result<Dual> {
    let ps: Vec<Var> = parts.iter().map(|d| d.p).collect();
    let p = g.concat(&ps, axis)?;
    let t = if parts.iter().any(|d| d.t.is_some()) {
        let ts: Vec<Var> = parts.iter().map(|d| d.t.unwrap_or_else(|| zeros_like(g, d.p))).collect();
        Some(g.concat(&ts, axis)?)
    } else {
        None
    };
    Ok(Dual { p, t })
}

pub fn sum_last<S: Real>(g: &Graph<'_, S>, a: Dual) -> Dual {
    Dual { p: g.sum_last(a.p), t: a.t.map(|t| g.sum_last(t)) }
}

pub fn mean_last<S: Real>(g: &Graph<'_, S>, a: Dual) -> Dual {
    Dual { p: g.mean_last(a.p), t: a.t.map(|t| g.mean_last(t)) }
}

pub fn expand_last<S: Real>(g: &Graph<'_, S>, a: Dual, m: usize) -> Dual {
    Dual { p: g.expand_last(a.p, m), t: a.t.map(|t| g.expand_last(t, m)) }
}

pub fn mean_all<S: Real>(g: &Graph<'_, S>, a: Dual) -> Dual {
    Dual { p: g.mean_all(a.p), t: a.t.map(|t| g.mean_all(t)) }
}

/// Convolution with a tangent-free kernel; the bias only enters the primal.
pub fn conv2d<S: Real>(
    g: &Graph<'_, S>,
    x: Dual,
    w: Var,
    bias: Option<Var>,
    stride: usize,
    pad: (usize, usize),
    groups: usize,
) -> Result<Dual> {
    let mut p = g.conv2d(x.p, w, stride, pad, groups)?;
    if let Some(b) = bias {
        p = g.add_channel(p, b)?;
    }
    let t = x.t.map(|t| g.conv2d(t, w, stride, pad, groups)).transpose()?;
    Ok(Dual { p, t })
}

pub fn conv_transpose2<S: Real>(g: &Graph<'_, S>, x: Dual, w: Var, bias: Option<Var>) -> Result<Dual> {
    let mut p = g.conv_transpose2(x.p, w)?;
    if let Some(b) = bias {
        p = g.add_channel(p, b)?;
    }
    let t = x.t.map(|t| g.conv_transpose2(t, w)).transpose()?;
    Ok(Dual { p, t })
}

/// B-spline expansion; the tangent is `B'(x) * dx` per basis function.
pub fn basis<S: Real>(g: &Graph<'_, S>, x: Dual, basis: &Rc<BSplineBasis>) -> Result<Dual> {
    let p = g.basis(x.p, basis, 0)?;
    let t = match x.t {
        Some(t) => {
            let d = g.basis(x.p, basis, 1)?;
            let r = g.repeat_channels(t, basis.len())?;
            Some(g.mul(d, r)?)
        }
        None => None,
    };
    Ok(Dual { p, t })
}

/// Softmax over the last axis. The row maximum is subtracted as a constant.
pub fn softmax_last<S: Real>(g: &Graph<'_, S>, a: Dual) -> Result<Dual> {
    let v = g.value(a.p);
    let m = *v.shape().last().expect("softmax on a scalar");
    let maxes: Vec<S> = v
        .data()
        .chunks(m)
        .map(|c| c.iter().copied().fold(S::neg_infinity(), |x, y| if y > x { y } else { x }))
        .collect();
    let mut shape = v.shape().to_vec();
    shape.pop();
    let mx = g.constant(Tensor::new(&shape, maxes)?);
    let mx = g.expand_last(mx, m);
    let z = sub(g, a, Dual::constant(mx))?;
    let e = unary(g, z, Unary::Exp)?;
    let s = sum_last(g, e);
    let inv = unary(g, s, Unary::Recip)?;
    let inv = expand_last(g, inv, m);
    mul(g, e, inv)
}

/// Group normalisation of `[n, c, ...]` over `groups` channel groups (no affine).
pub fn group_norm<S: Real>(g: &Graph<'_, S>, x: Dual, groups: usize, eps: S) -> Result<Dual> {
    let shape = g.shape(x.p);
    let n = shape[0];
    let m = g.value(x.p).len() / (n * groups);
    let xr = reshape(g, x, &[n, groups, m])?;
    let mean = mean_last(g, xr);
    let centered = sub(g, xr, expand_last(g, mean, m))?;
    let var = mean_last(g, mul(g, centered, centered)?);
    let inv = unary(g, shift(g, var, eps), Unary::Rsqrt)?;
    let normed = mul(g, centered, expand_last(g, inv, m))?;
    reshape(g, normed, &shape)
}
