//! Federated-learning simulation with networked leave-one-out control variates.
//!
//! Clients reshape their per-sample gradients with a leave-one-out (RLOO)
//! baseline, the server subtracts a second, cross-client control variate,
//! and the resulting double-control-variate estimate drives a FedAvg-style
//! round loop. Alongside the estimators live exact oracles (a categorical
//! score-function environment, finite differences, grid searches) that
//! check unbiasedness, the closed-form coefficient and the variance claims.

pub mod data;
pub mod error;
pub mod estimators;
pub mod fedsim;
pub mod format;
pub mod models;
pub mod numeric;
pub mod output;
pub mod run_config;
pub mod score_oracle;
pub mod verify;

pub use error::{ClientId, Error, Result};
pub use numeric::{derive_stream, GradVec, RngStream, SampleStats};
