//! Ensemble distributional Q-learning (REN / RENAULT) on desk-scale pixel
//! environments, together with a numerical laboratory that verifies the
//! bias-variance-covariance decomposition of ensembles built from randomized
//! learning algorithms.
//!
//! The crate is organized as:
//!
//! - [`tensor`]: dense f64 tensors, reverse-mode differentiation, Adam.
//! - [`distributional`]: C51 support, categorical projection, dueling and
//!   noisy-layer math, n-step return aggregation.
//! - [`replay`]: one shared transition store with per-member prioritized
//!   sum-tree views.
//! - [`net`]: the Q-network (conv trunk + dueling noisy heads).
//! - [`aux_tasks`]: the five auxiliary tasks and assignment strategies.
//! - [`agent`]: REN / REN-J ensemble agents and the training step.
//! - [`envs`]: two deterministic pixel environments plus preprocessing.
//! - [`bvc`]: bias/variance/covariance estimators, synthetic task suite and
//!   the TD-return proxy-bias measurement.
//! - [`config`], [`checkpoint`], [`trainer`], [`metrics`], [`cli`]: the
//!   user-facing surface.

pub mod agent;
pub mod aux_tasks;
pub mod bvc;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod distributional;
pub mod envs;
pub mod error;
pub mod metrics;
pub mod net;
pub mod replay;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::RenqError;
