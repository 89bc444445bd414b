//! Numerical laboratory for geodesic flow, semiclassical kernel and radiation-field
//! computations on asymptotically hyperbolic model metrics.
//!
//! The manifold is the Poincaré ball of dimension `n + 1` (boundary dimension
//! `n` is 1 or 2), optionally carrying a metric perturbation supported in the
//! collar near infinity. Everything downstream — bicharacteristic flows, the
//! flow-out Lagrangian, WKB transport amplitudes, weighted resolvent bounds,
//! Eisenstein boundary limits and the Friedlander radiation field — is computed
//! against this family of metrics, with the exact hyperbolic ball supplying
//! closed-form cross-checks.
//!
//! The crate is `no_std` (alloc required); IO, configuration and the CLI live
//! in the companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod chart;
pub mod error;
pub mod exact;
pub mod flow;
pub mod geodesic;
pub mod lagrangian;
pub mod metric;
pub mod numerics;
pub mod parametrix;
pub mod radiation;
pub mod resolvent;

pub use error::{CoreError, Result};
