//! Temporal-difference learning and general stochastic approximation with
//! compressed update directions and error feedback.
//!
//! The crate is organised around the pieces of a simulation:
//!
//! * [`env_model`] builds Markov reward processes with linear features and
//!   computes the exact steady-state quantities used as ground truth.
//! * [`compression`] holds the contraction operators `Q_δ`.
//! * [`ef_td`] has the single-agent kernels (TD(0), EF-TD, mean-path and
//!   projected variants) and the trajectory runner.
//! * [`nonlinear_sa`] generalises the kernel to arbitrary update maps.
//! * [`multi_agent`] simulates the parameter-server variant.
//! * [`analysis`] evaluates Lyapunov functions, bound envelopes and the lemma
//!   verification suite.
//! * [`cli`] wires everything into config-driven experiments.

// `!(x > 0.0)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod cli;
pub mod compression;
pub mod ef_td;
pub mod env_model;
pub mod error;
pub mod multi_agent;
pub mod nonlinear_sa;
pub mod rng;
pub mod trace;
pub(crate) mod vecops;

pub use error::{Error, Result};
