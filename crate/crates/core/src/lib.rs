//! Numerical toolkit for stochastic optimal control of fully coupled
//! forward-backward systems driven by Brownian motion and a compensated
//! Poisson random measure with finitely many marks, where the controller
//! observes a possibly coarser filtration than the driving noise.
//!
//! The crate is organized around the workflow
//!
//! 1. describe the problem (`model`): dynamics, costs, control set,
//!    observation filtration, mark space;
//! 2. draw reproducible driving noise (`scenario`);
//! 3. solve the coupled forward-backward system and its adjoint and
//!    variational companions (`fbsde`);
//! 4. evaluate the Hamiltonian and its gradients (`hamiltonian`);
//! 5. check optimality certificates: directional derivatives three ways,
//!    stationarity residuals, product-rule identities, moment diagnostics
//!    (`maxprinciple`);
//! 6. improve a control by projected conditional-gradient descent
//!    (`optimizer`).
//!
//! The command line front end (`cli`) wires these together behind config
//! files (`config`), CSV tables (`csvio`) and structured reports (`report`);
//! `benchmarks` holds the builtin fixtures with frozen reference values.

pub mod benchmarks;
pub mod cli;
pub mod config;
pub mod csvio;
pub mod error;
pub mod fbsde;
pub mod hamiltonian;
pub mod maxprinciple;
pub mod model;
pub mod optimizer;
pub mod report;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
