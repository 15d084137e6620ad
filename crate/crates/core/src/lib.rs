//! Operator-learning workbench for second-order elliptic PDEs.
//!
//! The pieces, roughly in dependency order:
//!
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` arrays.
//! - [`random_fields`]: Karhunen-Loeve samplers for Gaussian random fields
//!   and the derived coefficient/forcing fields.
//! - [`solvers`]: finite-difference Darcy solver, grid downsampling, and
//!   closed-form Green's functions for the 1D interval and the unit disk.
//! - [`graph`]: radius graphs on grid nodes and Nystrom subsampling.
//! - [`model`]: the graph kernel network itself.
//! - [`training`]: normalization, Adam, the training loop, and the
//!   resolution-transfer experiment harness.
//! - [`baselines`]: pointwise NN, PCA/PCA+NN, and a reduced-basis method.
//! - [`nystrom`]: Monte-Carlo operator-approximation rate measurement.

// Numeric code on purpose: `!(x > 0.0)` guards reject NaN where the
// suggested rewrite would accept it, and explicit indexing in kernels and
// stencil assembly reads better than iterator chains over flat buffers.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::manual_is_multiple_of
)]

pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod graph;
pub mod model;
pub mod nystrom;
pub mod random_fields;
pub mod solvers;
pub mod training;

pub use error::{Error, Result};
