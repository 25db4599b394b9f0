//! Decentralized low-rank adapter fine-tuning simulator.
//!
//! A set of agents each holds a LoRA adapter `(A, B)` over a frozen weight
//! `W₀` and trains it on a private least-squares task. Agents periodically
//! gossip with their neighbours through a doubly stochastic mixing matrix,
//! merging either the factors individually (DLoRA), the products `BA`
//! followed by a truncated-SVD refactorization (DeCAF), or only `B` with a
//! shared frozen `A` (the FA variants). Every theoretical quantity the
//! analysis relies on — interference, TSVD error, consensus-difference
//! bounds, smoothness constants — is measured along the way.
//!
//! Module map:
//! - [`lowrank`]: dense matrices, Jacobi SVD/eigensolvers, truncated SVD.
//! - [`topology`]: mixing matrices and their spectral report.
//! - [`adapter`]: adapter pairs, initialization, effective weights.
//! - [`objective`]: synthetic matrix-regression tasks and their gradients.
//! - [`consensus`]: the gossip merge operators.
//! - [`optimizer`]: SGD, momentum SGD and the tracked-Adam variant.
//! - [`metrics`]: interference, bounds and CSV output.
//! - [`config`]: flat `key = value` run configuration.
//! - [`trainer`]: the synchronous training loop and parameter sweeps.

pub mod adapter;
pub mod config;
pub mod consensus;
pub mod error;
pub mod lowrank;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod rng;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
