//! Travelling waves of reaction-diffusion SPDEs with multiplicative,
//! translation-invariant noise.

// `!(x > 0.0)` is used on purpose so that NaN fails validation; banded
// kernels index several arrays per loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod banded;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod expansion;
pub mod grid;
pub mod io;
pub mod model;
pub mod noise;
pub mod phase;
pub mod simulator;
pub mod stats;
pub mod stochastic;
pub mod wave;

pub use error::{Error, Result};
pub use grid::{BoundaryMode, Grid, Profile, Stencil};
