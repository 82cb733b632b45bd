//! Uniform B-spline basis on an extended knot vector (Cox-de Boor recursion).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    grid_size: usize,
    spline_order: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

impl BSplineBasis {
    /// `grid_size` intervals on `[lo, hi]`, knots extended by `spline_order`
    /// on each side.
    pub fn new(grid_size: usize, spline_order: usize, lo: f64, hi: f64) -> Result<Self> {
        if grid_size < 1 {
            bail!(Config, "B-spline grid_size must be >= 1, got {}", grid_size);
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            bail!(Config, "B-spline grid range [{}, {}] is empty", lo, hi);
        }
        let h = (hi - lo) / grid_size as f64;
        let knots = (0..=grid_size + 2 * spline_order)
            .map(|i| lo + (i as f64 - spline_order as f64) * h)
            .collect();
        Ok(Self { grid_size, spline_order, lo, hi, knots })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn spline_order(&self) -> usize {
        self.spline_order
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `grid_size + spline_order`.
    pub fn len(&self) -> usize {
        self.grid_size + self.spline_order
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Writes the `deriv`-th derivative of every basis function at `x` into `out`.
    pub fn eval_into(&self, x: f64, deriv: usize, out: &mut [f64]) {
        let t = &self.knots;
        let p_max = self.spline_order;
        let intervals = t.len() - 1;
        let mut stack = [0.0f64; 64];
        let mut heap = Vec::new();
        let b: &mut [f64] = if intervals <= stack.len() {
            &mut stack[..intervals]
        } else {
            heap.resize(intervals, 0.0);
            &mut heap[..]
        };
        for (i, v) in b.iter_mut().enumerate() {
            *v = if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        if deriv > p_max {
            out[..self.len()].fill(0.0);
            return;
        }
        for p in 1..=p_max {
            let use_derivative = p + deriv > p_max;
            for i in 0..intervals - p {
                let left = t[i + p] - t[i];
                let right = t[i + p + 1] - t[i + 1];
                b[i] = if use_derivative {
                    p as f64 * (b[i] / left - b[i + 1] / right)
                } else {
                    (x - t[i]) / left * b[i] + (t[i + p + 1] - x) / right * b[i + 1]
                };
            }
        }
        out[..self.len()].copy_from_slice(&b[..self.len()]);
    }

    /// Basis values for every element of `x`, with a trailing axis of size
    /// [`Self::len`].
    pub fn eval<S: Real>(&self, x: &[S]) -> Vec<S> {
        self.eval_deriv(x, 0)
    }

    pub fn eval_deriv<S: Real>(&self, x: &[S], deriv: usize) -> Vec<S> {
        let nb = self.len();
        let mut row = vec![0.0; nb];
        let mut out = Vec::with_capacity(x.len() * nb);
        for &v in x {
            self.eval_into(v.f64(), deriv, &mut row);
            out.extend(row.iter().map(|&r| S::of(r)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Textbook recursion, written independently of the in-place table above.
    fn naive(t: &[f64], i: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        let a = (x - t[i]) / (t[i + p] - t[i]) * naive(t, i, p - 1, x);
        let b = (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * naive(t, i + 1, p - 1, x);
        a + b
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(BSplineBasis::new(0, 2, -1.0, 1.0).is_err());
        assert!(BSplineBasis::new(3, 2, 1.0, 1.0).is_err());
        assert!(BSplineBasis::new(3, 2, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn count_and_knots() {
        let b = BSplineBasis::new(3, 2, -1.0, 1.0).unwrap();
        assert_eq!(b.len(), 5);
        assert_eq!(b.knots().len(), 8);
        assert!((b.knots()[2] + 1.0).abs() < 1e-15 && (b.knots()[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn partition_of_unity_and_nonnegativity() {
        let b = BSplineBasis::new(3, 2, -1.0, 1.0).unwrap();
        let mut out = [0.0; 5];
        for i in 1..=1000 {
            let x = -1.0 + 2.0 * i as f64 / 1001.0;
            b.eval_into(x, 0, &mut out);
            assert!(out.iter().all(|&v| v >= 0.0));
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn matches_textbook_recursion() {
        for (grid, order) in [(3, 2), (5, 3), (1, 1), (4, 0)] {
            let b = BSplineBasis::new(grid, order, -1.0, 1.0).unwrap();
            let mut out = vec![0.0; b.len()];
            for i in 0..97 {
                let x = -1.6 + 3.2 * i as f64 / 96.0;
                b.eval_into(x, 0, &mut out);
                for (j, &v) in out.iter().enumerate() {
                    assert!((v - naive(b.knots(), j, order, x)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn order_zero_is_an_indicator() {
        let b = BSplineBasis::new(4, 0, -1.0, 1.0).unwrap();
        let v = b.eval(&[0.2f64]);
        assert_eq!(v, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn vanishes_far_outside() {
        let b = BSplineBasis::new(3, 2, -1.0, 1.0).unwrap();
        assert!(b.eval(&[10.0f64, -10.0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn derivative_matches_differences() {
        let b = BSplineBasis::new(3, 2, -1.0, 1.0).unwrap();
        let h = 1e-6;
        for &x in &[-0.9f64, -0.31, 0.05, 0.5, 0.97] {
            let d = b.eval_deriv(&[x], 1);
            let p = b.eval(&[x + h]);
            let m = b.eval(&[x - h]);
            for j in 0..5 {
                assert!((d[j] - (p[j] - m[j]) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }
}
