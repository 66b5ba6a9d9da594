//! Gauge-invariant representation holonomy.
//!
//! Feature clouds along a closed input-space loop are whitened with a
//! pool-fitted transform, aligned edge by edge with orthogonal Procrustes in
//! a shared subspace, and composed into a holonomy matrix whose distance from
//! the identity measures path dependence of the representation.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod gauge;
pub mod holonomy;
pub mod io;
pub mod linalg;
pub mod loops;
pub mod models;
pub mod neighbors;
pub mod transport;

pub use error::{HolonomyError, Result};
