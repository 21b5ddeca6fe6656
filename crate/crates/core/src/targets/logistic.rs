//! Bayesian logistic regression posteriors: the plain model with a
//! standard-normal weight prior, and the hierarchical sparse variant with
//! Gamma scale priors sampled in unconstrained space.

use ndarray::{Array1, Array2, ArrayView1};

use super::{bernoulli_log_lik, sigmoid, softplus, TargetDensity};
use crate::error::{Error, Result};

/// Posterior potential for w_d ~ N(0,1), y_n ~ Bern(σ(x_nᵀw)).
///
/// U(w) = ½‖w‖² + Σ_n [softplus(x_nᵀw) − y_n·x_nᵀw]; the prior's
/// ½D·log(2π) constant is dropped.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    design: Array2<f64>,
    labels: Array1<f64>,
}

impl LogisticRegression {
    pub fn new(design: Array2<f64>, labels: Array1<f64>) -> Result<Self> {
        if design.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: design.nrows(),
                got: labels.len(),
            });
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Schema("labels must be 0 or 1".into()));
        }
        Ok(LogisticRegression { design, labels })
    }

    pub fn design(&self) -> &Array2<f64> {
        &self.design
    }

    pub fn labels(&self) -> &Array1<f64> {
        &self.labels
    }
}

impl TargetDensity for LogisticRegression {
    fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn potential(&self, w: ArrayView1<f64>) -> f64 {
        assert_eq!(w.len(), self.dim(), "dimension mismatch in potential");
        let z = self.design.dot(&w);
        let mut u = 0.5 * w.dot(&w);
        for (zn, &yn) in z.iter().zip(self.labels.iter()) {
            u -= bernoulli_log_lik(yn, *zn);
        }
        u
    }

    fn grad_potential(&self, w: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(w.len(), self.dim(), "dimension mismatch in grad_potential");
        let z = self.design.dot(&w);
        let resid = Array1::from_iter(
            z.iter()
                .zip(self.labels.iter())
                .map(|(&zn, &yn)| sigmoid(zn) - yn),
        );
        &self.design.t().dot(&resid) + &w
    }
}

/// Hierarchical logistic regression with a soft-sparsity prior:
/// τ ~ Gam(0.5, 0.5), λ_d ~ Gam(0.5, 0.5) (shape/rate), w_d ~ N(0,1),
/// y_n ~ Bern(σ(x_nᵀ(τ·w∘λ))).
///
/// Sampled in unconstrained space with τ = exp(t), λ_d = exp(l_d); the
/// log-Jacobian t + Σ_d l_d is folded into the potential. Parameter
/// layout: `[t, l_0..l_{c-1}, w_0..w_{c-1}]` for c covariate columns, so
/// the dimension is 2c + 1. Gamma normalization constants are dropped.
#[derive(Debug, Clone)]
pub struct SparseLogisticRegression {
    design: Array2<f64>,
    labels: Array1<f64>,
}

const GAMMA_SHAPE: f64 = 0.5;
const GAMMA_RATE: f64 = 0.5;

impl SparseLogisticRegression {
    pub fn new(design: Array2<f64>, labels: Array1<f64>) -> Result<Self> {
        if design.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: design.nrows(),
                got: labels.len(),
            });
        }
        Ok(SparseLogisticRegression { design, labels })
    }

    pub fn covariates(&self) -> usize {
        self.design.ncols()
    }

    /// Splits an unconstrained parameter vector into (t, l, w).
    fn split<'a>(&self, x: ArrayView1<'a, f64>) -> (f64, ArrayView1<'a, f64>, ArrayView1<'a, f64>) {
        let c = self.covariates();
        let t = x[0];
        let (_, rest) = x.split_at(ndarray::Axis(0), 1);
        let (l, w) = rest.split_at(ndarray::Axis(0), c);
        (t, l, w)
    }

    /// Effective weight vector τ·(w ∘ λ) from unconstrained parameters.
    pub fn effective_weights(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let (t, l, w) = self.split(x);
        let tau = t.exp();
        Array1::from_iter(l.iter().zip(w.iter()).map(|(&ld, &wd)| tau * wd * ld.exp()))
    }

    /// Gamma(shape α, rate β) prior on exp(v), in unconstrained space and
    /// including the Jacobian: log p(v) = α·v − β·e^v + const.
    fn log_gamma_prior_unconstrained(v: f64) -> f64 {
        GAMMA_SHAPE * v - GAMMA_RATE * v.exp()
    }
}

impl TargetDensity for SparseLogisticRegression {
    fn dim(&self) -> usize {
        2 * self.covariates() + 1
    }

    fn potential(&self, x: ArrayView1<f64>) -> f64 {
        assert_eq!(x.len(), self.dim(), "dimension mismatch in potential");
        let (t, l, w) = self.split(x);
        let mut u = -Self::log_gamma_prior_unconstrained(t);
        for &ld in l.iter() {
            u -= Self::log_gamma_prior_unconstrained(ld);
        }
        u += 0.5 * w.dot(&w);
        let v = self.effective_weights(x);
        let z = self.design.dot(&v);
        for (&zn, &yn) in z.iter().zip(self.labels.iter()) {
            u += softplus(zn) - yn * zn;
        }
        u
    }

    fn grad_potential(&self, x: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.dim(), "dimension mismatch in grad_potential");
        let c = self.covariates();
        let (t, l, w) = self.split(x);
        let tau = t.exp();
        let lambda = l.mapv(f64::exp);
        let v = Array1::from_iter(
            lambda
                .iter()
                .zip(w.iter())
                .map(|(&lam, &wd)| tau * wd * lam),
        );
        let z = self.design.dot(&v);
        let resid = Array1::from_iter(
            z.iter()
                .zip(self.labels.iter())
                .map(|(&zn, &yn)| sigmoid(zn) - yn),
        );
        // dU/dv_d for the likelihood part
        let g_v = self.design.t().dot(&resid);

        let mut grad = Array1::<f64>::zeros(self.dim());
        // t: prior −(α − β e^t) plus likelihood via v_d = τ w_d λ_d.
        let lik_t: f64 = g_v.iter().zip(v.iter()).map(|(&gd, &vd)| gd * vd).sum();
        grad[0] = -(GAMMA_SHAPE - GAMMA_RATE * tau) + lik_t;
        for d in 0..c {
            let ld = l[d];
            grad[1 + d] = -(GAMMA_SHAPE - GAMMA_RATE * ld.exp()) + g_v[d] * v[d];
            grad[1 + c + d] = w[d] + g_v[d] * tau * lambda[d];
        }
        grad
    }
}
