//! Learning welfare-maximizing randomized treatment policies.
//!
//! The crate covers the full pipeline: sample containers and fold splits
//! ([`data`]), parametric randomized policies ([`policy`]), sieve bases
//! ([`sieve`]), entropy-tilting stabilized weights ([`weights`]), outcome
//! regressions and cross-fitting ([`nuisance`]), the three welfare estimators
//! and their optimization ([`welfare`]), regret asymptotics and the
//! Gaussian-process supremum comparison ([`asymptotics`]), and a Monte Carlo
//! harness with synthetic designs ([`simlab`]).

pub mod asymptotics;
pub mod data;
pub mod error;
pub mod expr;
pub mod nuisance;
pub mod optim;
pub mod policy;
pub mod quadrature;
pub mod rng;
pub mod sieve;
pub mod simlab;
pub mod stats;
pub mod weights;
pub mod welfare;

pub use error::{Error, ErrorClass, Result};
