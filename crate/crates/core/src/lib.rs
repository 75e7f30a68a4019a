//! Chance-constrained electricity market clearing.
//!
//! The crate clears a DC-network market under four balancing-reserve policies
//! (system-wide or node-to-node participation, symmetric or asymmetric forecast
//! errors) plus a security-constrained variant, and extracts energy and
//! balancing reserve prices from the dual solution. Closed-form price
//! expressions, revenue accounting, equilibrium checks and Monte-Carlo
//! validation of the chance constraints live next to the clearing models so
//! every identity can be verified numerically.
//!
//! Module map:
//!
//! * [`grid`] – network cases, JSON case format, validation.
//! * [`uncertainty`] – forecast-error statistics, truncated split, mean and
//!   covariance per policy, error sampling.
//! * [`conic`] – convex program representation with named rows, solver
//!   backend, finite-difference shadow prices.
//! * [`market`] – clearing programs for each policy and dispatch decoding.
//! * [`mccormick`] – envelope relaxation of the bilinear cost terms and the
//!   sequential tightening loop.
//! * [`pricing`] – closed-form prices, dual cross-checks, settlements,
//!   RES cost accounting and generator best responses.
//! * [`security`] – security-constrained clearing with contingency states.
//! * [`validation`] – Monte-Carlo violation rates, KKT audits,
//!   finite-difference price oracles.
//! * [`cli`] – command-line front end and output files.

pub mod cli;
pub mod conic;
pub mod grid;
pub mod market;
pub mod mccormick;
pub mod output;
pub mod pricing;
pub mod security;
pub mod uncertainty;
pub mod validation;

pub use conic::{ConicProgram, SolveOptions, SolveStatus, Solution};
pub use grid::{GridCase, ValidationReport};
pub use uncertainty::BalancingPolicy;
pub use uncertainty::UncertaintyModel;
