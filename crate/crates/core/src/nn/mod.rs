//! Parameters, initialisation and the basic layers every model is built from.

mod attention;
mod layers;

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use attention::{SpatialAttention, SpatioTemporalAttention, TemporalAttention};
pub use layers::{Conv2d, ConvTranspose2, GroupNorm, Linear};

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Param<S> {
    name: String,
    value: Rc<Tensor<S>>,
}

/// Flat, ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: String, value: Tensor<S>) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value: Rc::new(value) });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub(crate) fn value_rc(&self, id: ParamId) -> Rc<Tensor<S>> {
        self.params[id.0].value.clone()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) {
        assert_eq!(self.params[id.0].value.shape(), value.shape(), "shape of {}", self.params[id.0].name);
        self.params[id.0].value = Rc::new(value);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p.name.as_str(), p.value.as_ref()))
    }

    /// Ids whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id)
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: Rc::new(p.value.cast()) })
                .collect(),
        }
    }
}

/// Registers parameters under a dotted name prefix, drawing from a seeded RNG.
pub struct Init<'a, S: Real> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, S: Real> Init<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_, S> {
        let prefix = if self.prefix.is_empty() { String::from(name) } else { format!("{}.{}", self.prefix, name) };
        Init { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..=bound)));
        let n = self.full_name(name);
        self.store.add(n, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::full(shape, S::of(value)))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<S>) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, value)
    }
}

/// Overwrites every parameter with uniform noise in `[-scale, scale]`.
/// Used to obtain generic (non-degenerate) networks in tests and oracles.
pub fn randomize<S: Real>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        let t = Tensor::from_fn(&shape, |_| S::of(rng.gen_range(-scale..=scale)));
        store.set(id, t);
    }
}
