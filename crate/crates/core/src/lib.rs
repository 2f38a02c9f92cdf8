//! Simulation and algorithm toolkit for flexible intelligent metasurface (FIM)
//! aided single-antenna links.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the geometry, channel and forward model.
//! * [`interference`] has the closed-form mode solvers, power bounds and
//!   interference fringe maps.
//! * [`bayesopt`] is a constrained Gaussian-process optimizer used for the
//!   multi-path movement modes.
//! * [`estimation`] turns pilot schedules into compressive-sensing problems.
//! * [`recovery`] contains the sparse recovery algorithms (OMP, FISTA and the
//!   variational SBL family).
//! * [`bench`] drives the Monte Carlo experiments behind the `fimsim` binary.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayesopt;
pub mod bench;
pub mod error;
pub mod estimation;
pub mod interference;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod recovery;

pub use error::{FimError, Result};
pub use num_complex::Complex64;
