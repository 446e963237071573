//! Representation-aligned flow matching on a two-square toy world, with
//! feature-conditioned guidance toward potential-tilted distributions.
//!
//! The crate is organised bottom-up:
//!
//! - [`net`] and [`checkpoint`]: the ReLU velocity MLP with an internal feature
//!   tap, its projection head, hand-written reverse-mode gradients and the
//!   on-disk checkpoint format.
//! - [`toy`]: the ground-truth data density, the unit-circle feature map and
//!   the exact samplers (rejection oracle, analytic Gaussian world).
//! - [`train`]: the compound flow-matching + alignment objective and Adam.
//! - [`potential`]: patch-wise alignment potentials and their gradients.
//! - [`sampler`]: PF-ODE Euler and reverse-time Euler-Maruyama samplers, with
//!   optional potential guidance.
//! - [`eval`]: two-sample statistics, coverage, alignment and embedding scans.
//!
//! Data-parallel loops (batch gradient accumulation, sampler chains, all-pairs
//! statistics) go through [`exec`], which runs on rayon when the `parallel`
//! feature is enabled. Chunking is fixed independently of the thread count, so
//! results are bit-identical between the parallel and sequential paths.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod feature;
pub mod gradcheck;
pub mod net;
pub mod plot;
pub mod potential;
pub mod rng;
pub mod sampler;
pub mod toy;
pub mod train;

pub use batch::{Point2, SampleBatch};
pub use error::{Error, Result};
pub use feature::FeatureMap;
pub use net::{Arch, ModelParams};
