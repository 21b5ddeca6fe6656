//! Multivariate Gaussian density, used both as a test target and as the
//! tractable surrogate for control-variate chains.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::TargetDensity;
use crate::error::Result;
use crate::linalg;
use crate::rng::Draws;

/// N(μ, Σ) with Σ = L Lᵀ held via its lower-triangular Cholesky factor.
///
/// Potential convention: U(x) = ½‖L⁻¹(x−μ)‖², so U(μ) = 0 exactly and the
/// Gaussian normalization constant is dropped.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Array1<f64>,
    chol: Array2<f64>,
}

impl Gaussian {
    /// Standard normal N(0, I_d).
    pub fn standard(dim: usize) -> Self {
        Gaussian {
            mean: Array1::zeros(dim),
            chol: Array2::eye(dim),
        }
    }

    pub fn from_mean_cov(mean: Array1<f64>, cov: ArrayView2<f64>) -> Result<Self> {
        let chol = linalg::cholesky(cov)?;
        Ok(Gaussian { mean, chol })
    }

    /// Builds from a lower-triangular factor with strictly positive diagonal.
    pub fn from_mean_chol(mean: Array1<f64>, chol: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if chol.nrows() != d || chol.ncols() != d {
            return Err(crate::error::Error::DimensionMismatch {
                expected: d,
                got: chol.nrows(),
            });
        }
        for i in 0..d {
            if chol[[i, i]] <= 0.0 {
                return Err(crate::error::Error::Config(format!(
                    "Cholesky factor needs a positive diagonal, got {} at {i}",
                    chol[[i, i]]
                )));
            }
            for j in (i + 1)..d {
                if chol[[i, j]] != 0.0 {
                    return Err(crate::error::Error::Config(
                        "Cholesky factor must be lower triangular".into(),
                    ));
                }
            }
        }
        Ok(Gaussian { mean, chol })
    }

    /// Diagonal covariance from per-coordinate standard deviations.
    pub fn diagonal(mean: Array1<f64>, std_devs: ArrayView1<f64>) -> Result<Self> {
        let d = mean.len();
        let mut chol = Array2::zeros((d, d));
        for i in 0..d {
            if std_devs[i] <= 0.0 {
                return Err(crate::error::Error::Config(format!(
                    "standard deviation must be positive, got {}",
                    std_devs[i]
                )));
            }
            chol[[i, i]] = std_devs[i];
        }
        Ok(Gaussian { mean, chol })
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    pub fn chol(&self) -> ArrayView2<'_, f64> {
        self.chol.view()
    }

    pub fn covariance(&self) -> Array2<f64> {
        self.chol.dot(&self.chol.t())
    }

    /// Marginal variances, diag(Σ) = Σ_k L_dk².
    pub fn marginal_variances(&self) -> Array1<f64> {
        let d = self.mean.len();
        Array1::from_iter((0..d).map(|i| (0..=i).map(|k| self.chol[[i, k]].powi(2)).sum()))
    }

    /// Exact i.i.d. draw x = μ + L z with z ~ N(0, I).
    pub fn sample(&self, draws: &mut Draws) -> Array1<f64> {
        let z = draws.standard_normal_vec(self.mean.len());
        &self.mean + &linalg::lower_matvec(self.chol.view(), z.view())
    }
}

impl TargetDensity for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn potential(&self, x: ArrayView1<f64>) -> f64 {
        assert_eq!(x.len(), self.dim(), "dimension mismatch in potential");
        let centered = &x - &self.mean;
        let v = linalg::solve_lower(self.chol.view(), centered.view());
        0.5 * v.dot(&v)
    }

    fn grad_potential(&self, x: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.dim(), "dimension mismatch in grad_potential");
        let centered = &x - &self.mean;
        let v = linalg::solve_lower(self.chol.view(), centered.view());
        linalg::solve_lower_transpose(self.chol.view(), v.view())
    }

    fn known_mean(&self) -> Option<Array1<f64>> {
        Some(self.mean.clone())
    }
}
