//! Variational GAN training with importance re-weighted critic updates and
//! probability-ratio clipped generator updates.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffmath`]: a reverse-mode differentiation tape with second-order
//!   support.
//! - [`models`]: MLP and categorical parameter containers, checkpoints.
//! - [`data`]: synthetic targets with exact densities and samplers.
//! - [`vgan`]: the training algorithm and its ablations.
//! - [`exact`]: brute-force oracles on finite sample spaces.
//! - [`metrics`]: mode coverage, Wasserstein estimates, collapse detection.
//! - [`config`], [`experiment`]: configuration files and the train / sweep /
//!   oracle / ablate drivers behind the command line tool.

pub mod data;
pub mod diffmath;
pub mod config;
pub mod exact;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod vgan;
