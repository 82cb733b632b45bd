//! Temporal cues unit: gated depthwise mixing across the frame groups of a
//! frames-as-channels feature map.

use crate::dual::{self, Dual};
use crate::error::{bail, Result};
use crate::graph::{Graph, Unary};
use crate::nn::{Init, ParamId};
use crate::real::Real;

/// `x + sigmoid(w * x) * (M(x) - x)`, where `M` is a zero-padded temporal
/// convolution (kernel 3) applied per feature across the `frames` channel
/// groups. `M` starts as the identity, so the unit starts as the identity.
#[derive(Clone, Debug)]
pub struct Tcu {
    pub frames: usize,
    pub channels: usize,
    /// `[features, 1, 3, 1]`
    pub temporal: ParamId,
    /// `[channels]`
    pub gate: ParamId,
}

impl Tcu {
    pub fn new<S: Real>(mut init: Init<'_, S>, channels: usize, frames: usize) -> Result<Self> {
        if frames == 0 || !channels.is_multiple_of(frames) {
            bail!(Config, "{} channels cannot be split into {} frame groups", channels, frames);
        }
        let features = channels / frames;
        let kernel = crate::tensor::Tensor::from_fn(&[features, 1, 3, 1], |i| if i % 3 == 1 { S::one() } else { S::zero() });
        let temporal = init.tensor("temporal", kernel);
        let gate = init.constant("gate", &[channels], 0.0);
        Ok(Self { frames, channels, temporal, gate })
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        let s = g.shape(x.p);
        if s.len() != 4 || s[1] != self.channels {
            bail!(Shape, "TCU over {} channels got {:?}", self.channels, s);
        }
        let (n, f, hw) = (s[0], self.channels / self.frames, s[2] * s[3]);
        // [n, t*f, h, w] -> [n, f, t, h*w]; the temporal axis becomes a conv row
        let y = dual::reshape(g, x, &[n, self.frames, f, hw])?;
        let y = dual::permute(g, y, &[0, 2, 1, 3])?;
        let y = dual::conv2d(g, y, g.param(self.temporal), None, 1, (1, 0), f)?;
        let y = dual::permute(g, y, &[0, 2, 1, 3])?;
        let mixed = dual::reshape(g, y, &s)?;
        let gate = dual::mul_channel(g, x, Dual::constant(g.param(self.gate)))?;
        let gate = dual::unary(g, gate, Unary::Sigmoid)?;
        let delta = dual::mul(g, gate, dual::sub(g, mixed, x)?)?;
        dual::add(g, x, delta)
    }
}

#[cfg(test)]
mod tests {
    use alloc::vec::Vec;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use crate::testutil::rand_tensor;

    fn unit(channels: usize, frames: usize) -> (ParamStore<f64>, Tcu) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tcu::new(Init::new(&mut store, &mut rng), channels, frames).unwrap();
        (store, t)
    }

    fn run(store: &ParamStore<f64>, t: &Tcu, x: &Tensor<f64>) -> Tensor<f64> {
        let g = Graph::inference(store);
        let y = t.forward(&g, g.constant(x.clone()).into()).unwrap();
        (*g.value(y.p)).clone()
    }

    #[test]
    fn identity_at_init() {
        let (store, t) = unit(12, 4);
        let x = rand_tensor(&[2, 12, 3, 5], 1);
        assert!(run(&store, &t, &x).max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn indivisible_channels_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Tcu::new(Init::new(&mut store, &mut rng), 10, 4).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let (mut store, t) = unit(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let y = run(&store, &t, &Tensor::zeros(&[1, 8, 4, 4]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixes_neighbouring_frames() {
        let (mut store, t) = unit(3, 3);
        store.set(t.temporal, Tensor::new(&[1, 1, 3, 1], alloc::vec![0.5, 0.0, 0.0]).unwrap());
        // frame 1 only sees frame 0 through the kernel's first tap
        let x = Tensor::new(&[1, 3, 1, 1], alloc::vec![2.0, 0.0, 0.0]).unwrap();
        let y = run(&store, &t, &x);
        // gate at w = 0 is 1/2: y = x + (M(x) - x) / 2
        assert_eq!(y.data(), &[1.0, 0.5, 0.0]);
    }

    #[test]
    fn permutation_equivariant_with_shared_weights() {
        let (frames, features) = (4, 3);
        let (mut store, t) = unit(frames * features, frames);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // center-only temporal taps, gate weights shared across frame groups
        let taps: Vec<f64> = (0..features).flat_map(|_| [0.0, 0.0, 0.0]).collect();
        let mut taps = taps;
        for f in 0..features {
            taps[3 * f + 1] = rng.gen_range(0.5..1.5);
        }
        store.set(t.temporal, Tensor::new(&[features, 1, 3, 1], taps).unwrap());
        let w: Vec<f64> = (0..features).map(|_| rng.gen_range(-2.0..2.0)).collect();
        store.set(t.gate, Tensor::from_fn(&[frames * features], |c| w[c % features]));

        let x = rand_tensor(&[1, frames * features, 3, 3], 5);
        let swap = |x: &Tensor<f64>| {
            let parts: Vec<Tensor<f64>> = [2, 1, 0, 3].iter().map(|&t| x.narrow(1, t * features, features).unwrap()).collect();
            Tensor::concat(&parts.iter().collect::<Vec<_>>(), 1).unwrap()
        };
        let a = swap(&run(&store, &t, &x));
        let b = run(&store, &t, &swap(&x));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
