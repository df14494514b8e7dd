//! Distributionally robust preference optimization over soft preference
//! scores.
//!
//! The crate is organized bottom-up:
//!
//! - [`dro`]: ambiguity sets over the Bernoulli preference distribution and
//!   their exact worst-case solvers.
//! - [`policy`]: log-linear and tabular preference policies exposing the
//!   log-ratio margin and its parameter gradient.
//! - [`loss`]: per-sample DPO loss, the robust loss and gradient, and the
//!   rDPO / DrDPO baselines.
//! - [`trainer`]: deterministic minibatch SGD over any loss method.
//! - [`rmab`]: the restless-bandit benchmark (reward DSL, Whittle indices,
//!   budgeted simulation).
//! - [`prefdata`]: preference samples, JSONL I/O and the synthetic-judge
//!   dataset generator.
//! - [`noise`]: train-time corruption of soft scores.
//! - [`evalmetrics`]: win rate and evaluation reward.
//! - [`bench`]: the desk-scale end-to-end benchmark wiring all of the above.

pub mod bench;
pub mod config;
pub mod dro;
pub mod error;
pub mod evalmetrics;
pub mod loss;
pub mod noise;
pub mod policy;
pub mod prefdata;
pub mod rmab;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
