//! Un-normalized log-densities with analytic gradients.
//!
//! Every target exposes the potential `U(x) = -log P(x) + const` and its
//! gradient. Additive constants are fixed per type and documented on the
//! type; samplers only ever use differences, but the tests rely on the
//! stated conventions.

mod gaussian;
mod irt;
mod logistic;

pub use gaussian::Gaussian;
pub use irt::ItemResponse;
pub use logistic::{LogisticRegression, SparseLogisticRegression};

use ndarray::{Array1, ArrayView1};

/// A differentiable un-normalized negative log-density on R^D.
///
/// Evaluations are pure; implementations are immutable and safe to share
/// across threads. Callers must pass vectors of length `dim()`; the
/// methods panic on dimension mismatch (a contract violation, not a
/// recoverable condition).
pub trait TargetDensity: Send + Sync {
    fn dim(&self) -> usize;

    /// U(x). Finite for all finite inputs.
    fn potential(&self, x: ArrayView1<f64>) -> f64;

    /// ∇U(x), analytic.
    fn grad_potential(&self, x: ArrayView1<f64>) -> Array1<f64>;

    /// The mean of the normalized density, when known in closed form
    /// (Gaussian surrogates). Used as the reflection center for
    /// antithetic partner chains.
    fn known_mean(&self) -> Option<Array1<f64>> {
        None
    }
}

/// Numerically stable log(1 + e^z).
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logistic sigmoid with the large-|z| branches handled by `exp` underflow.
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-likelihood log Bern(y; σ(z)) = y·z − log(1+e^z).
pub(crate) fn bernoulli_log_lik(y: f64, z: f64) -> f64 {
    y * z - softplus(z)
}
