//! Large deviations of the empirical measure and empirical flow of
//! continuous-time Markov chains on finite (truncated) state spaces.
//!
//! The crate is organised around a handful of modules:
//!
//! - [`markov`]: state spaces, jump-rate kernels, measures, flows, divergence
//!   and invariant measures.
//! - [`simulate`]: seedable trajectory sampling and the empirical statistics
//!   `(mu_T, Q_T)` computed from a path.
//! - [`rate_function`]: the joint rate function `I(mu, Q)`, its variational
//!   form, affine decomposition and a Perron eigenvalue oracle.
//! - [`decomposition`]: cycle decomposition of divergence-free flows and the
//!   approximation constructions built on it.
//! - [`tilting`]: exponentially tilted chains, likelihood ratios, exponential
//!   martingales and importance-sampling estimators.
//! - [`models`]: birth–death chains and numeric checkers for the compactness
//!   conditions.
//! - [`io`]: JSON and CSV formats shared with the command-line tool.

pub mod decomposition;
pub mod error;
pub mod event;
pub mod ext;
pub mod io;
pub mod markov;
pub mod models;
pub mod rate_function;
pub mod simulate;
pub mod tilting;

pub use error::{Error, Result};
pub use ext::ExtReal;
pub use markov::{Edge, Flow, Measure, ProbabilityMeasure, RateKernel, SignedMeasure, StateSpace};

/// Library version embedded in every artifact written by the CLI.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
