//! Variance-reduction toolkit for Markov chain Monte Carlo.
//!
//! Chains driven by shared counter-based randomness couple: two HMC
//! chains fed the same momenta and accept uniforms contract toward each
//! other even when their targets differ slightly. This crate exploits
//! that to build three estimator families on top of plain HMC, MALA,
//! and random-walk Metropolis:
//!
//! - **antithetic** pairs, where the partner chain consumes negated
//!   momenta and the average of the two anti-correlated chains has far
//!   lower variance;
//! - **control variates**, where an auxiliary chain targets a tractable
//!   Gaussian surrogate and is regressed out of the primary chain;
//! - the **combined** scheme, which averages two variance-reduced chains
//!   built from a four-chain group.
//!
//! An affine transport map fitted by variational inference
//! ([`preconditioner`]) both preconditions the sampler and supplies the
//! surrogate. [`diagnostics`] provides ESS (Geyer truncation), split
//! R-hat, coupling statistics, and an acceptance-rate tuning heuristic.
//!
//! Determinism: all randomness flows through [`rng::NoiseStream`], so any
//! run is bit-reproducible from its seed, and each member of a coupled
//! group is bit-identical to a solo chain run with the same seed.

// negated comparisons are deliberate: they reject NaN along with the
// out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_io;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod integrator;
pub mod linalg;
pub mod preconditioner;
pub mod rng;
pub mod samplers;
pub mod swindles;
pub mod targets;

pub use error::{Error, Result};
