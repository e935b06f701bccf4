//! Fairness-aware agnostic federated learning.
//!
//! A set of simulated clients and one server jointly train a logistic model
//! while an adversary reweighs training samples through a kernel mixture
//! `theta(x) = sum_m alpha_m K_m(x)`. The learner minimizes the worst-case
//! reweighed loss subject to a reweighed decision-boundary covariance bound,
//! so the model stays accurate and fair on testing distributions that differ
//! from the training union.
//!
//! Module map:
//!
//! - [`dataset`]: CSV loading, encoding, shift splits and client shards.
//! - [`kernel`]: reweighing bases (Gaussian, constant, per-client indicator).
//! - [`model`]: logistic model, weighted loss, penalized gradient, local solver.
//! - [`fairness`]: risk difference metrics and covariance coefficient algebra.
//! - [`lpsolve`]: bounded-variable simplex for the adversary's LP.
//! - [`federation`]: client/server state machines and protocol messages.
//! - [`engine`]: algorithm runs, baselines, synthetic data and experiment grids.
//! - [`verify`]: self-contained oracle checks used by `fairfed verify`.

pub mod dataset;
pub mod engine;
pub mod error;
pub mod fairness;
pub mod federation;
pub mod kernel;
pub mod linalg;
pub mod lpsolve;
pub mod model;
pub mod verify;

pub use error::{Error, Result};
