//! Pixel mean flows: the interpolation path, average and instantaneous
//! velocities (the latter by a forward-mode JVP), the training loss and the
//! few-step sampler.

mod net;
mod sampler;

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

pub use net::{sinusoid, sinusoid_pair, XPredNet, XPredNetConfig};
pub use sampler::{sample, Extraction, SamplerConfig};

use crate::dual::Dual;
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::kancondnet::ConditionSet;
use crate::real::Real;
use crate::tensor::Tensor;

/// Lower bound on `t`; the average velocity divides by it.
pub const T_MIN: f64 = 1e-3;

/// Anything that maps `(Z_t, t, r, conditions)` to an x-prediction. With
/// `jvp`, the returned tangent is the derivative along the tangent carried by
/// `z` and `dt = 1, dr = 0`.
pub trait XPredictor<S: Real> {
    fn forward(&self, g: &Graph<'_, S>, z: Dual, t: &[f64], r: &[f64], cond: &ConditionSet, jvp: bool) -> Result<Dual>;
}

/// One training draw: residual target, noise, times and the interpolant.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState<S> {
    pub z: Tensor<S>,
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub eps: Tensor<S>,
    pub x_res: Tensor<S>,
}

impl<S: Real> FlowState<S> {
    /// `t ~ U(t_min, 1)`, `r ~ U(0, t)` and standard normal noise per sample.
    pub fn draw(x_res: Tensor<S>, rng: &mut impl Rng, t_min: f64) -> Result<Self> {
        let n = x_res.dim(0);
        let (t, r) = draw_times(n, rng, t_min);
        let eps = Tensor::from_fn(x_res.shape(), |_| S::of(rng.sample::<f64, _>(StandardNormal)));
        let z = interpolate_rows(&x_res, &eps, &t)?;
        Ok(Self { z, t, r, eps, x_res })
    }
}

pub fn draw_times(n: usize, rng: &mut impl Rng, t_min: f64) -> (Vec<f64>, Vec<f64>) {
    let t: Vec<f64> = (0..n).map(|_| rng.gen_range(t_min..1.0)).collect();
    let r = t.iter().map(|&t| rng.gen_range(0.0..t)).collect();
    (t, r)
}

/// `Z_t = (1 - t) X_res + t eps`.
pub fn interpolate<S: Real>(x_res: &Tensor<S>, eps: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
    if t == 0.0 {
        return Ok(x_res.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    let (a, b) = (S::of(1.0 - t), S::of(t));
    x_res.zip_map(eps, |x, e| a * x + b * e)
}

/// [`interpolate`] with one `t` per leading-axis sample.
pub fn interpolate_rows<S: Real>(x_res: &Tensor<S>, eps: &Tensor<S>, t: &[f64]) -> Result<Tensor<S>> {
    if x_res.shape() != eps.shape() || x_res.dim(0) != t.len() {
        bail!(Shape, "interpolate: {:?} / {:?} with {} times", x_res.shape(), eps.shape(), t.len());
    }
    let inner = x_res.len() / t.len();
    let mut parts = Vec::with_capacity(x_res.len());
    for (i, &ti) in t.iter().enumerate() {
        let xs = Tensor::new(&[inner], x_res.data()[i * inner..(i + 1) * inner].to_vec())?;
        let es = Tensor::new(&[inner], eps.data()[i * inner..(i + 1) * inner].to_vec())?;
        parts.extend_from_slice(interpolate(&xs, &es, ti)?.data());
    }
    Tensor::new(x_res.shape(), parts)
}

fn guard(t: f64, t_min: f64) -> Result<()> {
    if !(t >= t_min) {
        return Err(Error::Singular { t, t_min });
    }
    Ok(())
}

/// `u = (Z_t - X_pred) / t`.
pub fn average_velocity<S: Real>(z: &Tensor<S>, x_pred: &Tensor<S>, t: f64, t_min: f64) -> Result<Tensor<S>> {
    guard(t, t_min)?;
    let inv = S::of(1.0 / t);
    z.zip_map(x_pred, |z, x| (z - x) * inv)
}

/// Graph nodes of one velocity evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Velocity {
    pub x_pred: Var,
    pub u: Var,
    /// Total derivative of `u` along the trajectory.
    pub du: Var,
    pub v: Var,
}

/// `v = u + (t - r) du/dt`, with `du/dt` taken along the tangent
/// `(dZ, dr, dt) = (dz, 0, 1)` by a single forward-mode pass.
#[allow(clippy::too_many_arguments)]
pub fn instantaneous_velocity<S: Real, P: XPredictor<S> + ?Sized>(
    net: &P,
    g: &Graph<'_, S>,
    z: Var,
    dz: Var,
    t: &[f64],
    r: &[f64],
    cond: &ConditionSet,
    t_min: f64,
) -> Result<Velocity> {
    for (&ti, &ri) in t.iter().zip(r) {
        guard(ti, t_min)?;
        if !(0.0..=ti).contains(&ri) {
            bail!(Input, "r = {} outside [0, t = {}]", ri, ti);
        }
    }
    let pred = net.forward(g, Dual::new(z, dz), t, r, cond, true)?;
    let inv: Vec<S> = t.iter().map(|&t| S::of(1.0 / t)).collect();
    let u = g.scale_rows(g.sub(z, pred.p)?, &inv)?;
    let dpred = match pred.t {
        Some(tp) => g.sub(dz, tp)?,
        None => dz,
    };
    let du = g.scale_rows(g.sub(dpred, u)?, &inv)?;
    let gap: Vec<S> = t.iter().zip(r).map(|(&t, &r)| S::of(t - r)).collect();
    let v = g.add(u, g.scale_rows(du, &gap)?)?;
    Ok(Velocity { x_pred: pred.p, u, du, v })
}

/// Loss value and the pieces it was built from.
#[derive(Clone, Copy, Debug)]
pub struct PmfLoss {
    pub loss: Var,
    pub velocity: Velocity,
}

/// `MSE(v, eps - X_res)` for a residual target that may itself depend on
/// upstream parameters. With `detach_jvp` the `du/dt` term is a constant for
/// the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn pmf_loss<S: Real, P: XPredictor<S> + ?Sized>(
    net: &P,
    g: &Graph<'_, S>,
    x_res: Var,
    eps: &Tensor<S>,
    t: &[f64],
    r: &[f64],
    cond: &ConditionSet,
    detach_jvp: bool,
    t_min: f64,
) -> Result<PmfLoss> {
    let n = g.shape(x_res)[0];
    if eps.shape() != g.shape(x_res).as_slice() || t.len() != n || r.len() != n {
        bail!(Shape, "pmf_loss: residual {:?}, noise {:?}, {} t, {} r", g.shape(x_res), eps.shape(), t.len(), r.len());
    }
    let e = g.constant(eps.clone());
    let keep: Vec<S> = t.iter().map(|&t| S::of(1.0 - t)).collect();
    let tt: Vec<S> = t.iter().map(|&t| S::of(t)).collect();
    let z = g.add(g.scale_rows(x_res, &keep)?, g.scale_rows(e, &tt)?)?;
    let target = g.sub(e, x_res)?;
    let mut vel = instantaneous_velocity(net, g, z, target, t, r, cond, t_min)?;
    if detach_jvp {
        let gap: Vec<S> = t.iter().zip(r).map(|(&t, &r)| S::of(t - r)).collect();
        let du = g.detach(vel.du);
        vel.v = g.add(vel.u, g.scale_rows(du, &gap)?)?;
    }
    let loss = g.mse(vel.v, target)?;
    let value = g.value(loss).item().f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { which: "L_PMF".into(), at: format!("t = {:?}, r = {:?}", t, r) });
    }
    Ok(PmfLoss { loss, velocity: vel })
}

/// [`pmf_loss`] on a drawn [`FlowState`] with a constant residual target.
pub fn pmf_loss_state<S: Real, P: XPredictor<S> + ?Sized>(
    net: &P,
    g: &Graph<'_, S>,
    state: &FlowState<S>,
    cond: &ConditionSet,
    detach_jvp: bool,
) -> Result<PmfLoss> {
    let x_res = g.constant(state.x_res.clone());
    pmf_loss(net, g, x_res, &state.eps, &state.t, &state.r, cond, detach_jvp, T_MIN)
}
