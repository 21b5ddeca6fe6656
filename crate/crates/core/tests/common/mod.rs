//! Shared test oracles, independent of the implementation paths they check.

use mcmc_swindles::rng::Draws;
use mcmc_swindles::targets::TargetDensity;
use ndarray::Array1;

/// Central-difference gradient with per-coordinate step h = 1e-5·(1+|x_d|).
#[allow(dead_code)]
pub fn finite_difference_grad(target: &dyn TargetDensity, x: &Array1<f64>) -> Array1<f64> {
    let mut grad = Array1::<f64>::zeros(x.len());
    for d in 0..x.len() {
        let h = 1e-5 * (1.0 + x[d].abs());
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[d] += h;
        lo[d] -= h;
        grad[d] = (target.potential(hi.view()) - target.potential(lo.view())) / (2.0 * h);
    }
    grad
}

/// Asserts the analytic gradient against central differences at `points`
/// random standard-normal points, with relative error below `tol`.
#[allow(dead_code)]
pub fn assert_gradient_matches(target: &dyn TargetDensity, points: usize, seed: u64, tol: f64) {
    let mut draws = Draws::new(seed, 0);
    for p in 0..points {
        let x = draws.standard_normal_vec(target.dim());
        let analytic = target.grad_potential(x.view());
        let numeric = finite_difference_grad(target, &x);
        let norm = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        let err = analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt()
            / norm;
        assert!(
            err < tol,
            "gradient mismatch at point {p}: relative error {err:.3e} (tolerance {tol:.1e})"
        );
    }
}

/// Empirical mean and sample variance of a slice.
#[allow(dead_code)]
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Median of a slice (averaging the middle pair for even lengths).
#[allow(dead_code)]
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
