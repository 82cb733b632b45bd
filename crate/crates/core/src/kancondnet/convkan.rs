//! Convolutional KAN layer: a SiLU base path plus a B-spline path.

use alloc::rc::Rc;

use super::bspline::BSplineBasis;
use crate::dual::{self, Dual};
use crate::error::{bail, Result};
use crate::graph::Graph;
use crate::nn::{Conv2d, Init, ParamId};
use crate::real::Real;

/// `conv(W_base, silu(x)) + conv(W_spline, basis(tanh(x)))`.
///
/// Inputs are squashed by `tanh` so every activation lands inside the spline
/// grid. The spline kernel starts at zero, so a fresh layer is a plain conv.
#[derive(Clone, Debug)]
pub struct ConvKan {
    pub base: Conv2d,
    pub spline_weight: ParamId,
    pub basis: Rc<BSplineBasis>,
    cin: usize,
}

impl ConvKan {
    pub fn new<S: Real>(mut init: Init<'_, S>, cin: usize, cout: usize, kernel: usize, basis: Rc<BSplineBasis>) -> Self {
        let pad = (kernel / 2, kernel / 2);
        let base = Conv2d::build(init.sub("base"), cin, cout, (kernel, kernel), 1, pad, 1, false, false);
        let spline_weight = init.constant("spline", &[cout, cin * basis.len(), kernel, kernel], 0.0);
        Self { base, spline_weight, basis, cin }
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        let c = g.shape(x.p)[1];
        if c != self.cin {
            bail!(Shape, "ConvKAN expects {} input channels, got {}", self.cin, c);
        }
        let base = self.base.forward(g, dual::silu(g, x)?)?;
        let squashed = dual::unary(g, x, crate::graph::Unary::Tanh)?;
        let expanded = dual::basis(g, squashed, &self.basis)?;
        let spline = dual::conv2d(g, expanded, g.param(self.spline_weight), None, 1, self.base.pad, 1)?;
        dual::add(g, base, spline)
    }
}

#[cfg(test)]
mod tests {
    use alloc::vec;
    use alloc::vec::Vec;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{randomize, ParamStore};
    use crate::tensor::Tensor;
    use crate::testutil::rand_tensor;

    fn layer(cin: usize, cout: usize, k: usize, seed: u64) -> (ParamStore<f64>, ConvKan) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = Rc::new(BSplineBasis::new(3, 2, -1.0, 1.0).unwrap());
        let l = ConvKan::new(Init::new(&mut store, &mut rng), cin, cout, k, basis);
        (store, l)
    }

    fn run(store: &ParamStore<f64>, l: &ConvKan, x: &Tensor<f64>) -> Tensor<f64> {
        let g = Graph::inference(store);
        let y = l.forward(&g, g.constant(x.clone()).into()).unwrap();
        (*g.value(y.p)).clone()
    }

    #[test]
    fn zero_spline_weights_reduce_to_base_path() {
        let (store, l) = layer(3, 4, 3, 1);
        let x = rand_tensor(&[2, 3, 5, 5], 2).scale(2.0);
        let g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let base = l.base.forward(&g, dual::silu(&g, xv.into()).unwrap()).unwrap();
        assert_eq!(*g.value(base.p), run(&store, &l, &x));
    }

    #[test]
    fn all_zero_weights_give_zero() {
        let (mut store, l) = layer(2, 2, 3, 3);
        store.value_mut(l.base.weight).data_mut().fill(0.0);
        let y = run(&store, &l, &rand_tensor(&[1, 2, 4, 4], 4));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_oracle() {
        let (mut store, l) = layer(1, 1, 1, 5);
        store.set(l.base.weight, Tensor::new(&[1, 1, 1, 1], vec![0.7]).unwrap());
        let ws = vec![0.3, -1.2, 0.5, 2.0, -0.4];
        store.set(l.spline_weight, Tensor::new(&[1, 5, 1, 1], ws.clone()).unwrap());
        let x = 0.37f64;
        // base: w * silu(x); spline: sum_b ws_b * B_b(tanh x), B from the
        // quadratic uniform B-spline closed form on knots -7/3 .. 7/3.
        let silu = x / (1.0 + (-x).exp());
        let u = x.tanh();
        let h = 2.0 / 3.0;
        let quad = |s: f64| -> f64 {
            if (0.0..1.0).contains(&s) {
                s * s / 2.0
            } else if (1.0..2.0).contains(&s) {
                (-2.0 * s * s + 6.0 * s - 3.0) / 2.0
            } else if (2.0..3.0).contains(&s) {
                (3.0 - s) * (3.0 - s) / 2.0
            } else {
                0.0
            }
        };
        let spline: f64 = (0..5).map(|b| ws[b] * quad((u - (-1.0 - 2.0 * h + b as f64 * h)) / h)).sum();
        let want = 0.7 * silu + spline;
        let got = run(&store, &l, &Tensor::new(&[1, 1, 1, 1], vec![x]).unwrap()).item();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn linear_in_weights() {
        let (mut s1, l) = layer(2, 3, 3, 6);
        let mut s2 = s1.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        randomize(&mut s1, &mut rng, 0.5);
        randomize(&mut s2, &mut rng, 0.5);
        let (a, b) = (0.8, -1.7);
        let mut mix = s1.clone();
        for id in s1.ids().collect::<Vec<_>>() {
            let v = s1.value(id).scale(a).add(&s2.value(id).scale(b)).unwrap();
            mix.set(id, v);
        }
        let x = rand_tensor(&[1, 2, 4, 4], 10);
        let want = run(&s1, &l, &x).scale(a).add(&run(&s2, &l, &x).scale(b)).unwrap();
        assert!(run(&mix, &l, &x).max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn spline_weight_gradient_matches_differences() {
        let (mut store, l) = layer(1, 1, 3, 11);
        randomize(&mut store, &mut ChaCha8Rng::seed_from_u64(12), 0.5);
        let x = rand_tensor(&[1, 1, 4, 4], 13).scale(1.5);
        let target = rand_tensor(&[1, 1, 4, 4], 14);
        let loss = |s: &ParamStore<f64>| {
            let g = Graph::new(s);
            let y = l.forward(&g, g.constant(x.clone()).into()).unwrap();
            let t = g.constant(target.clone());
            let loss = g.mse(y.p, t).unwrap();
            (g.value(loss).item(), g.backward(loss).unwrap().param(l.spline_weight).unwrap().clone())
        };
        let (_, grad) = loss(&store);
        let h = 1e-5;
        for j in 0..grad.len() {
            let mut p = store.clone();
            p.value_mut(l.spline_weight).data_mut()[j] += h;
            let mut m = store.clone();
            m.value_mut(l.spline_weight).data_mut()[j] -= h;
            let fd = (loss(&p).0 - loss(&m).0) / (2.0 * h);
            let a = grad.data()[j];
            assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-3), "{j}: {a} vs {fd}");
        }
    }
}
