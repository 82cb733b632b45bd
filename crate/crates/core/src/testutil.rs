//! Finite-difference oracles shared by unit tests.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn eval(f: &dyn Fn(&Graph<'_, f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> f64 {
    let g = Graph::detached();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars).expect("forward");
    g.value(out).item()
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences for every input element. Returns the worst relative error.
pub fn grad_check(f: &dyn Fn(&Graph<'_, f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>], h: f64) -> f64 {
    let g = Graph::detached();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars).expect("forward");
    let grads = g.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(f, &plus) - eval(f, &minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - fd).abs() / (1.0f64).max(a.abs()).max(fd.abs());
            worst = worst.max(err);
        }
    }
    worst
}

/// Relative error `|a - b| / max(|a|, |b|, floor)` in the 2-norm.
pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / a.norm().max(b.norm()).max(floor)
}
