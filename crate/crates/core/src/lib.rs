//! Gradient-adaptive PCA parametrization for PDE-constrained inverse problems.
//!
//! The crate bundles a reference pipeline around a 1D nonlinear diffusion
//! problem: prior ensemble generation ([`field`]), the Karhunen-Loève basis
//! ([`basis`]), an implicit finite-volume forward solver ([`forward`]),
//! discrete adjoint gradients ([`adjoint`]), the rotation / extension / swap
//! basis adaptations ([`strategies`]), nonlinear CG ([`optimize`]) and the
//! experiment harness behind the `aspca` binary ([`experiment`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod basis;
pub mod error;
pub mod experiment;
pub mod field;
pub mod forward;
pub mod optimize;
pub mod strategies;

pub use error::{Error, Result};
