//! Weak-form and strong-form residual training of small fully-connected
//! networks for subsurface flow problems.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: reverse-mode autodiff tape over dense `f64` matrices, with
//!   graph-recording backward passes for second-order input derivatives.
//! - [`network`]: the fully-connected trial network and its checkpoint format.
//! - [`quadrature`]: Gauss–Legendre rules, space-time subdomains and Latin
//!   hypercube sampling.
//! - [`testfuncs`]: compactly supported polynomial test functions.
//! - [`losses`]: data / IC / BC / strong-form / weak-form residuals.
//! - [`optimizer`]: Adam, dual ascent on the theory weight, and the training loop.
//! - [`singlephase`], [`buckley`]: the two benchmark problems.
//! - [`evalkit`]: metrics, noise injection, training-set sampling.
//! - [`experiment`]: declarative experiment configs and the run / matrix drivers.

// Validation is written as `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod buckley;
pub mod diffcore;
pub mod evalkit;
pub mod experiment;
pub mod losses;
pub mod network;
pub mod optimizer;
pub mod quadrature;
pub mod singlephase;
pub mod testfuncs;

mod error;

pub use error::{Error, Result};
