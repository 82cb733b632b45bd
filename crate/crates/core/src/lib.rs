//! Core of a two-stage precipitation nowcaster: a deterministic coarse
//! forecaster, a spline-augmented condition encoder and a pixel-space
//! mean-flow residual generator, plus skill scores.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, timing and the
//! command line live in the `pixelflow` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod data;
pub mod dual;
pub mod error;
pub mod graph;
pub mod kancondnet;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pmf;
pub mod real;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil;
