//! Optimal stopping lines for homogeneous mass fragmentations with finite
//! binary dislocation measures.
//!
//! The optimal line freezes a block once the generalized Ornstein-Uhlenbeck
//! statistic carried along its ancestry first exceeds a threshold `b*`. The
//! threshold is the root of a ratio of moments of an exponential functional
//! of the tagged-fragment driver under an exponentially tilted law. This crate
//! computes `b*` and the value function from a shared Monte Carlo sample and
//! checks the surrounding identities (first-passage Laplace transform,
//! martingale and supermartingale properties, smooth pasting, generator
//! equation, many-to-one formulas) by exact event-driven simulation.
//!
//! Module map:
//! - [`levy`]: dislocation families, `Φ`, `ψ`, `κ(λ)` and tilted dynamics.
//! - [`pathsim`]: exact simulation of `ξ`, `Y`, `Z^c`, first passages, `I∞`.
//! - [`expfun`]: shared `I∞` samples, tilted moments, `f(b)`, moment recursion.
//! - [`stopsolve`]: `b*`, `Ṽ`, `V*` and the verification checks.
//! - [`fragsim`]: the fragmentation itself, stopping lines, payoffs.
//! - [`harness`]: configuration, commands and exports used by the CLI.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod expfun;
pub mod fragsim;
pub mod harness;
pub mod levy;
pub mod pathsim;
pub mod quad;
pub mod rng;
pub mod stats;
pub mod stopsolve;

pub use error::{Error, Result};
pub use levy::{DislocationModel, ModelParams, TiltedDynamics};

/// Version tag written into every JSON and CSV output.
pub const SCHEMA_VERSION: &str = "fragstop.v1";
