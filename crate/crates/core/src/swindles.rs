//! Variance-reduced chains built from coupled traces.
//!
//! The control-variate chain is Z_{i,j} = f_j(X_i) − β_jᵀ(f(Y_i) − Ê_Q[f(Y)])
//! with β estimated by linear regression; the antithetic estimator averages
//! a chain with its negated-noise partner; the combined scheme averages the
//! two variance-reduced chains Z⁺ and Z⁻.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::preconditioner::TransportMap;
use crate::rng::Draws;
use crate::samplers::CoupledTraces;
use crate::targets::{sigmoid, Gaussian, TargetDensity};

/// A pure map f: R^D → R^K evaluated on chain states.
///
/// When chains run in preconditioned (latent) space, the function first
/// pushes the state through the transport map so that the functional is
/// of the original parameters.
#[derive(Debug, Clone)]
pub struct FunctionOfState {
    pub name: String,
    kind: FunctionKind,
    map: Option<TransportMap>,
}

#[derive(Debug, Clone)]
enum FunctionKind {
    /// f(x) = x (posterior means).
    Mean,
    /// f_d(x) = (x_d − c_d)² about a fixed center (posterior variances).
    CenteredSquare { center: Array1<f64> },
    /// f_k(x) = σ(r_kᵀ x) for test-point rows r_k (predictive probabilities).
    Predictive { rows: Array2<f64> },
}

impl FunctionOfState {
    pub fn mean() -> Self {
        FunctionOfState {
            name: "mean".into(),
            kind: FunctionKind::Mean,
            map: None,
        }
    }

    pub fn centered_square(center: Array1<f64>) -> Self {
        FunctionOfState {
            name: "variance".into(),
            kind: FunctionKind::CenteredSquare { center },
            map: None,
        }
    }

    pub fn predictive(rows: Array2<f64>) -> Self {
        FunctionOfState {
            name: "predictive".into(),
            kind: FunctionKind::Predictive { rows },
            map: None,
        }
    }

    /// Composes with a transport map: states are mapped to parameter space
    /// before the functional is applied.
    pub fn through_map(mut self, map: TransportMap) -> Self {
        self.map = Some(map);
        self
    }

    pub fn map(&self) -> Option<&TransportMap> {
        self.map.as_ref()
    }

    pub fn out_dim(&self, state_dim: usize) -> usize {
        match &self.kind {
            FunctionKind::Mean => state_dim,
            FunctionKind::CenteredSquare { center } => center.len(),
            FunctionKind::Predictive { rows } => rows.nrows(),
        }
    }

    pub fn eval(&self, state: ArrayView1<f64>) -> Array1<f64> {
        let mapped;
        let x = match &self.map {
            Some(m) => {
                mapped = m.forward(state);
                mapped.view()
            }
            None => state,
        };
        match &self.kind {
            FunctionKind::Mean => x.to_owned(),
            FunctionKind::CenteredSquare { center } => Array1::from_iter(
                x.iter()
                    .zip(center.iter())
                    .map(|(&v, &c)| (v - c) * (v - c)),
            ),
            FunctionKind::Predictive { rows } => rows.dot(&x).mapv(sigmoid),
        }
    }

    /// Applies the function row-wise to an n×D sample matrix.
    pub fn eval_trace(&self, samples: ArrayView2<f64>) -> Array2<f64> {
        let n = samples.nrows();
        let k = self.out_dim(samples.ncols());
        let mut out = Array2::<f64>::zeros((n, k));
        for (i, row) in samples.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.eval(row));
        }
        out
    }

    /// Closed-form E_Q[f] for a Gaussian Q over the function's input
    /// space, when available.
    fn closed_form_expectation(&self, q: &Gaussian) -> Option<Array1<f64>> {
        match &self.kind {
            FunctionKind::Mean => Some(q.mean().to_owned()),
            FunctionKind::CenteredSquare { center } => {
                let var = q.marginal_variances();
                Some(Array1::from_iter(
                    var.iter()
                        .zip(q.mean().iter())
                        .zip(center.iter())
                        .map(|((&v, &m), &c)| v + (m - c) * (m - c)),
                ))
            }
            FunctionKind::Predictive { .. } => None,
        }
    }
}

/// Ê_Q[f(Y)] with per-component standard errors (zero when closed-form).
#[derive(Debug, Clone)]
pub struct SurrogateExpectation {
    pub value: Array1<f64>,
    pub std_err: Array1<f64>,
}

/// Estimates E_Q[f(Y)] for the surrogate `latent_q` (the distribution the
/// Y chain targets, in chain space). Identity and centered-square
/// functionals of an affine pushforward are exact; anything else falls
/// back to i.i.d. Monte Carlo, which is valid because Q admits exact
/// sampling.
pub fn surrogate_expectation(
    latent_q: &Gaussian,
    f: &FunctionOfState,
    budget: usize,
    seed: u64,
) -> Result<SurrogateExpectation> {
    if budget < 1_000 {
        return Err(Error::Config(format!(
            "surrogate expectation budget must be at least 1000, got {budget}"
        )));
    }
    // Q as seen by the functional: pushed through the map when present.
    let effective_q = match f.map() {
        Some(m) => m.pushforward_gaussian(latent_q)?,
        None => latent_q.clone(),
    };
    if let Some(value) = f.closed_form_expectation(&effective_q) {
        let k = value.len();
        return Ok(SurrogateExpectation {
            value,
            std_err: Array1::zeros(k),
        });
    }
    let mut draws = Draws::new(seed, 0);
    let k = f.out_dim(latent_q.dim());
    let mut sum = Array1::<f64>::zeros(k);
    let mut sum_sq = Array1::<f64>::zeros(k);
    for _ in 0..budget {
        let y = latent_q.sample(&mut draws);
        let fy = f.eval(y.view());
        sum += &fy;
        sum_sq += &fy.mapv(|v| v * v);
    }
    let n = budget as f64;
    let value = sum.mapv(|s| s / n);
    let std_err = Array1::from_iter(
        sum_sq
            .iter()
            .zip(value.iter())
            .map(|(&sq, &m)| (((sq / n - m * m).max(0.0)) / n).sqrt()),
    );
    Ok(SurrogateExpectation { value, std_err })
}

/// Regression coefficients and the surrogate expectation they are applied
/// with. Row j of `beta` holds β_j over all K surrogate features.
#[derive(Debug, Clone)]
pub struct ControlVariateFit {
    pub beta: Array2<f64>,
    pub expectation: SurrogateExpectation,
    pub residual_variance: Array1<f64>,
    pub regressand_variance: Array1<f64>,
}

fn column_means(m: ArrayView2<f64>) -> Array1<f64> {
    let n = m.nrows() as f64;
    m.sum_axis(ndarray::Axis(0)) / n
}

fn center_columns(m: ArrayView2<f64>) -> Array2<f64> {
    let means = column_means(m);
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        row -= &means;
    }
    out
}

/// Sample variance (n−1 denominator) of each column.
pub fn column_variances(m: ArrayView2<f64>) -> Array1<f64> {
    let n = m.nrows();
    let means = column_means(m);
    let mut out = Array1::<f64>::zeros(m.ncols());
    for j in 0..m.ncols() {
        let s: f64 = m.column(j).iter().map(|&v| (v - means[j]).powi(2)).sum();
        out[j] = s / (n as f64 - 1.0);
    }
    out
}

/// Pearson correlation of paired columns; NaN when either side is constant.
pub fn column_correlations(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array1<f64> {
    assert_eq!(
        a.shape(),
        b.shape(),
        "shape mismatch in column_correlations"
    );
    let n = a.nrows() as f64;
    let ma = column_means(a);
    let mb = column_means(b);
    let mut out = Array1::<f64>::zeros(a.ncols());
    for j in 0..a.ncols() {
        let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
        for i in 0..a.nrows() {
            let da = a[[i, j]] - ma[j];
            let db = b[[i, j]] - mb[j];
            saa += da * da;
            sbb += db * db;
            sab += da * db;
        }
        out[j] = if saa > 0.0 && sbb > 0.0 {
            (sab / n) / ((saa / n).sqrt() * (sbb / n).sqrt())
        } else {
            f64::NAN
        };
    }
    out
}

/// Least-squares fit of each centered f(X) column onto the centered f(Y)
/// features, with trace-scaled ridge damping against collinear features.
/// `diagonal` restricts each β_j to the matching component of f(Y).
pub fn estimate_beta(
    fx: ArrayView2<f64>,
    fy: ArrayView2<f64>,
    expectation: SurrogateExpectation,
    diagonal: bool,
) -> Result<ControlVariateFit> {
    let n = fx.nrows();
    if fy.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: fy.nrows(),
        });
    }
    let k_out = fx.ncols();
    let k_feat = fy.ncols();
    let needed = if diagonal { 3 } else { k_feat + 2 };
    if n < needed {
        return Err(Error::InsufficientData(format!(
            "{n} samples cannot support a regression on {k_feat} features (need {needed})"
        )));
    }
    if fx.iter().any(|v| !v.is_finite()) || fy.iter().any(|v| !v.is_finite()) {
        return Err(Error::InsufficientData(
            "non-finite values in regression inputs".into(),
        ));
    }

    let fx_c = center_columns(fx);
    let fy_c = center_columns(fy);
    let mut beta = Array2::<f64>::zeros((k_out, k_feat));

    if diagonal {
        if k_out != k_feat {
            return Err(Error::DimensionMismatch {
                expected: k_out,
                got: k_feat,
            });
        }
        for j in 0..k_out {
            let var_y: f64 = fy_c.column(j).iter().map(|v| v * v).sum();
            let cov: f64 = fx_c
                .column(j)
                .iter()
                .zip(fy_c.column(j).iter())
                .map(|(a, b)| a * b)
                .sum();
            let damp = 1e-8 * var_y;
            beta[[j, j]] = if var_y > 0.0 {
                cov / (var_y + damp)
            } else {
                0.0
            };
        }
    } else {
        let gram = fy_c.t().dot(&fy_c);
        let trace: f64 = (0..k_feat).map(|i| gram[[i, i]]).sum();
        if trace > 0.0 {
            let mut damped = gram;
            let ridge = 1e-8 * trace / k_feat as f64;
            for i in 0..k_feat {
                damped[[i, i]] += ridge;
            }
            let rhs = fy_c.t().dot(&fx_c); // K_feat × K_out
            let solved = crate::linalg::solve_spd(damped.view(), rhs.view())?;
            beta.assign(&solved.t());
        }
        // trace == 0 leaves β = 0: constant features carry no signal
    }

    let denom = (n - 1) as f64;
    let regressand_variance = Array1::from_iter(
        (0..k_out).map(|j| fx_c.column(j).iter().map(|v| v * v).sum::<f64>() / denom),
    );
    let mut residual_variance = Array1::<f64>::zeros(k_out);
    for j in 0..k_out {
        let mut s = 0.0;
        for i in 0..n {
            let pred: f64 = (0..k_feat).map(|k| beta[[j, k]] * fy_c[[i, k]]).sum();
            let r = fx_c[[i, j]] - pred;
            s += r * r;
        }
        residual_variance[j] = s / denom;
    }

    Ok(ControlVariateFit {
        beta,
        expectation,
        residual_variance,
        regressand_variance,
    })
}

/// Applies Z_{i,j} = f_j(X_i) − β_jᵀ(f(Y_i) − Ê).
pub fn control_variate_chain(
    fx: ArrayView2<f64>,
    fy: ArrayView2<f64>,
    fit: &ControlVariateFit,
) -> Result<Array2<f64>> {
    let (n, k_out) = (fx.nrows(), fx.ncols());
    if fy.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: fy.nrows(),
        });
    }
    if fit.beta.nrows() != k_out || fit.beta.ncols() != fy.ncols() {
        return Err(Error::DimensionMismatch {
            expected: k_out,
            got: fit.beta.nrows(),
        });
    }
    if fit.expectation.value.len() != fy.ncols() {
        return Err(Error::DimensionMismatch {
            expected: fy.ncols(),
            got: fit.expectation.value.len(),
        });
    }
    let mut fy_centered = fy.to_owned();
    for mut row in fy_centered.rows_mut() {
        row -= &fit.expectation.value;
    }
    let correction = fy_centered.dot(&fit.beta.t());
    Ok(&fx - &correction)
}

/// Row-wise mean of an antithetic pair plus the per-component covariance
/// and correlation between the inputs.
#[derive(Debug, Clone)]
pub struct AntitheticAverage {
    pub chain: Array2<f64>,
    pub covariance: Array1<f64>,
    pub correlation: Array1<f64>,
}

pub fn antithetic_average(
    f_plus: ArrayView2<f64>,
    f_minus: ArrayView2<f64>,
) -> Result<AntitheticAverage> {
    if f_plus.shape() != f_minus.shape() {
        return Err(Error::DimensionMismatch {
            expected: f_plus.nrows(),
            got: f_minus.nrows(),
        });
    }
    let chain = (&f_plus + &f_minus) * 0.5;
    let n = f_plus.nrows() as f64;
    let mp = column_means(f_plus);
    let mm = column_means(f_minus);
    let mut covariance = Array1::<f64>::zeros(f_plus.ncols());
    for j in 0..f_plus.ncols() {
        let mut s = 0.0;
        for i in 0..f_plus.nrows() {
            s += (f_plus[[i, j]] - mp[j]) * (f_minus[[i, j]] - mm[j]);
        }
        covariance[j] = s / n;
    }
    let correlation = column_correlations(f_plus, f_minus);
    Ok(AntitheticAverage {
        chain,
        covariance,
        correlation,
    })
}

/// Which variance-reduction scheme produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Plain,
    Antithetic,
    Control,
    Cva,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Plain => "plain",
            EstimatorKind::Antithetic => "antithetic",
            EstimatorKind::Control => "control",
            EstimatorKind::Cva => "cva",
        }
    }
}

/// A variance-reduced estimate with its Z chain and efficiency metadata.
#[derive(Debug, Clone)]
pub struct SwindleEstimate {
    pub kind: EstimatorKind,
    pub estimates: Array1<f64>,
    pub z_chain: Array2<f64>,
    /// Correlation between the paired chains the scheme exploits
    /// (f(X) vs f(Y) for control, Z⁺ vs Z⁻ for the combined scheme);
    /// zero for plain chains.
    pub rho: Array1<f64>,
    /// Var(f(X)) / Var(Z) per component.
    pub vr_factor: Array1<f64>,
    /// Per-component ESS on the target's f(X) scale: the Z chain's
    /// autocorrelation ESS inflated by the variance-reduction factor,
    /// capped at 10× the samples consumed across the member chains.
    pub ess: Array1<f64>,
    /// Gradient evaluations of the target's potential.
    pub grads_used: usize,
    /// All target density evaluations (gradients plus potentials).
    pub target_evals: usize,
    /// All surrogate density evaluations.
    pub surrogate_evals: usize,
}

fn json_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "null".to_string()
    }
}

fn json_array(values: &Array1<f64>) -> String {
    let items: Vec<String> = values.iter().map(|&v| json_float(v)).collect();
    format!("[{}]", items.join(","))
}

impl SwindleEstimate {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"kind\":\"{}\",\"estimates\":{},\"rho\":{},\"vr_factor\":{},\"ess\":{},\"grads_used\":{}}}",
            self.kind.as_str(),
            json_array(&self.estimates),
            json_array(&self.rho),
            json_array(&self.vr_factor),
            json_array(&self.ess),
            self.grads_used
        )
    }
}

/// ESS of each column, treating a constant column as super-efficient
/// (the 10× cap stands in for an infinite value).
fn column_ess(z: ArrayView2<f64>) -> Array1<f64> {
    let n = z.nrows();
    let cap = 10.0 * n as f64;
    Array1::from_iter((0..z.ncols()).map(|j| {
        let col: Vec<f64> = z.column(j).to_vec();
        match diagnostics::ess_scalar(&[&col]) {
            Ok((ess, _)) => ess,
            Err(_) => cap,
        }
    }))
}

fn vr_factors(base_var: &Array1<f64>, z: ArrayView2<f64>) -> Array1<f64> {
    let zv = column_variances(z);
    Array1::from_iter(base_var.iter().zip(zv.iter()).map(|(&b, &v)| {
        if v > 0.0 {
            b / v
        } else {
            f64::INFINITY
        }
    }))
}

/// ESS on the f(X) scale: autocorrelation ESS of Z times the variance
/// reduction, since the estimator's variance is Var(Z)·τ/n while the
/// i.i.d. yardstick is Var(f(X))/N. The super-efficiency cap scales
/// with the samples consumed across the estimator's member chains.
fn inflate_ess(
    auto_ess: Array1<f64>,
    vr: &Array1<f64>,
    samples: usize,
    members: usize,
) -> Array1<f64> {
    let cap = 10.0 * (members * samples) as f64;
    Array1::from_iter(auto_ess.iter().zip(vr.iter()).map(|(&e, &v)| {
        if v.is_finite() {
            (e * v).min(cap)
        } else {
            cap
        }
    }))
}

/// Plain MCMC estimate of E[f(X)] from the primary chain.
pub fn plain_estimate(
    traces: &CoupledTraces,
    f: &FunctionOfState,
    burn_in: usize,
) -> Result<SwindleEstimate> {
    let fx = f.eval_trace(traces.primary.post_burn_in(burn_in));
    let k = fx.ncols();
    let estimates = column_means(fx.view());
    let ess = column_ess(fx.view());
    Ok(SwindleEstimate {
        kind: EstimatorKind::Plain,
        estimates,
        rho: Array1::zeros(k),
        vr_factor: Array1::ones(k),
        ess,
        grads_used: traces.primary.grad_evals,
        target_evals: traces.primary.target_evals(),
        surrogate_evals: 0,
        z_chain: fx,
    })
}

/// Antithetic estimate: the average of f over the primary chain and its
/// negated-noise partner.
pub fn antithetic_estimate(
    traces: &CoupledTraces,
    f: &FunctionOfState,
    burn_in: usize,
) -> Result<SwindleEstimate> {
    let partner = traces.antithetic.as_ref().ok_or_else(|| {
        Error::Config("antithetic estimate requires an antithetic partner chain".into())
    })?;
    let fxp = f.eval_trace(traces.primary.post_burn_in(burn_in));
    let fxm = f.eval_trace(partner.post_burn_in(burn_in));
    let avg = antithetic_average(fxp.view(), fxm.view())?;
    let base_var = column_variances(fxp.view());
    let estimates = column_means(avg.chain.view());
    let vr = vr_factors(&base_var, avg.chain.view());
    let ess = inflate_ess(column_ess(avg.chain.view()), &vr, avg.chain.nrows(), 2);
    Ok(SwindleEstimate {
        kind: EstimatorKind::Antithetic,
        estimates,
        rho: avg.correlation,
        vr_factor: vr,
        ess,
        grads_used: traces.primary.grad_evals + partner.grad_evals,
        target_evals: traces.primary.target_evals() + partner.target_evals(),
        surrogate_evals: 0,
        z_chain: avg.chain,
    })
}

/// Control-variate estimate from the primary chain and the surrogate
/// chain Y⁺.
pub fn control_estimate(
    traces: &CoupledTraces,
    f: &FunctionOfState,
    fit: &ControlVariateFit,
    burn_in: usize,
) -> Result<SwindleEstimate> {
    let control = traces
        .control
        .as_ref()
        .ok_or_else(|| Error::Config("control estimate requires a surrogate chain".into()))?;
    let fx = f.eval_trace(traces.primary.post_burn_in(burn_in));
    let fy = f.eval_trace(control.post_burn_in(burn_in));
    let z = control_variate_chain(fx.view(), fy.view(), fit)?;
    let base_var = column_variances(fx.view());
    let estimates = column_means(z.view());
    let rho = column_correlations(fx.view(), fy.view());
    let vr = vr_factors(&base_var, z.view());
    let ess = inflate_ess(column_ess(z.view()), &vr, z.nrows(), 2);
    Ok(SwindleEstimate {
        kind: EstimatorKind::Control,
        estimates,
        rho,
        vr_factor: vr,
        ess,
        grads_used: traces.primary.grad_evals,
        target_evals: traces.primary.target_evals(),
        surrogate_evals: control.target_evals(),
        z_chain: z,
    })
}

/// Combined control-variate + antithetic estimate: Z = ½(Z⁺ + Z⁻) with
/// the shared β and Ê applied to both pairs.
pub fn cva_estimate(
    traces: &CoupledTraces,
    f: &FunctionOfState,
    fit: &ControlVariateFit,
    burn_in: usize,
) -> Result<SwindleEstimate> {
    let (xm, yp, ym) = match (
        &traces.antithetic,
        &traces.control,
        &traces.reflected_control,
    ) {
        (Some(a), Some(c), Some(r)) => (a, c, r),
        _ => {
            return Err(Error::Config(
                "combined estimate requires all four chains (X⁺, X⁻, Y⁺, Y⁻)".into(),
            ))
        }
    };
    let fxp = f.eval_trace(traces.primary.post_burn_in(burn_in));
    let fxm = f.eval_trace(xm.post_burn_in(burn_in));
    let fyp = f.eval_trace(yp.post_burn_in(burn_in));
    let fym = f.eval_trace(ym.post_burn_in(burn_in));
    let z_plus = control_variate_chain(fxp.view(), fyp.view(), fit)?;
    let z_minus = control_variate_chain(fxm.view(), fym.view(), fit)?;
    let avg = antithetic_average(z_plus.view(), z_minus.view())?;
    let base_var = column_variances(fxp.view());
    let estimates = column_means(avg.chain.view());
    let vr = vr_factors(&base_var, avg.chain.view());
    let ess = inflate_ess(column_ess(avg.chain.view()), &vr, avg.chain.nrows(), 4);
    Ok(SwindleEstimate {
        kind: EstimatorKind::Cva,
        estimates,
        rho: avg.correlation,
        vr_factor: vr,
        ess,
        grads_used: traces.primary.grad_evals + xm.grad_evals,
        target_evals: traces.primary.target_evals() + xm.target_evals(),
        surrogate_evals: yp.target_evals(),
        z_chain: avg.chain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn exact_expectation(values: Array1<f64>) -> SurrogateExpectation {
        let k = values.len();
        SurrogateExpectation {
            value: values,
            std_err: Array1::zeros(k),
        }
    }

    #[test]
    fn beta_identity_when_fy_equals_fx() {
        let mut draws = Draws::new(1, 0);
        let n = 200;
        let mut fx = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            fx.row_mut(i).assign(&draws.standard_normal_vec(2));
        }
        let fit = estimate_beta(
            fx.view(),
            fx.view(),
            exact_expectation(Array1::zeros(2)),
            false,
        )
        .unwrap();
        for j in 0..2 {
            for k in 0..2 {
                let want = if j == k { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(fit.beta[[j, k]], want, epsilon = 1e-6);
            }
            assert!(fit.residual_variance[j] < 1e-12);
            assert!(fit.residual_variance[j] <= fit.regressand_variance[j]);
        }
    }

    #[test]
    fn beta_near_zero_for_independent_noise() {
        let mut draws = Draws::new(2, 0);
        let n = 2000;
        let mut fx = Array2::<f64>::zeros((n, 1));
        let mut fy = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            fx[[i, 0]] = draws.standard_normal();
            fy[[i, 0]] = draws.standard_normal();
        }
        let fit =
            estimate_beta(fx.view(), fy.view(), exact_expectation(array![0.0]), false).unwrap();
        // |β| below 3 regression standard errors ≈ 3/√n for unit-variance pairs
        let se = (1.0 / n as f64).sqrt();
        assert!(
            fit.beta[[0, 0]].abs() < 3.0 * se,
            "β = {} exceeds 3·se = {}",
            fit.beta[[0, 0]],
            3.0 * se
        );
    }

    #[test]
    fn beta_recovers_synthetic_slope() {
        let mut draws = Draws::new(3, 0);
        let n = 4000;
        let mut fx = Array2::<f64>::zeros((n, 1));
        let mut fy = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            let y = draws.standard_normal();
            fy[[i, 0]] = y;
            fx[[i, 0]] = 2.0 * y + 0.1 * draws.standard_normal();
        }
        let fit =
            estimate_beta(fx.view(), fy.view(), exact_expectation(array![0.0]), false).unwrap();
        assert!(
            (fit.beta[[0, 0]] - 2.0).abs() / 2.0 < 0.05,
            "β = {}",
            fit.beta[[0, 0]]
        );
    }

    #[test]
    fn beta_requires_enough_rows() {
        let fx = Array2::<f64>::zeros((4, 3));
        let fy = Array2::<f64>::zeros((4, 3));
        match estimate_beta(
            fx.view(),
            fy.view(),
            exact_expectation(Array1::zeros(3)),
            false,
        ) {
            Err(Error::InsufficientData(_)) => {}
            other => panic!("expected insufficient data, got {other:?}"),
        }
    }

    #[test]
    fn zero_beta_chain_is_fx() {
        let fx = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let fy = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let fit = ControlVariateFit {
            beta: Array2::zeros((2, 2)),
            expectation: exact_expectation(array![0.5, 0.5]),
            residual_variance: Array1::zeros(2),
            regressand_variance: Array1::zeros(2),
        };
        let z = control_variate_chain(fx.view(), fy.view(), &fit).unwrap();
        assert_eq!(z, fx);
    }

    #[test]
    fn perfect_coupling_gives_constant_z() {
        let mut draws = Draws::new(5, 0);
        let n = 50;
        let mut fx = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            fx[[i, 0]] = draws.standard_normal();
        }
        let mean = fx.column(0).mean().unwrap();
        let fit =
            estimate_beta(fx.view(), fx.view(), exact_expectation(array![mean]), false).unwrap();
        let z = control_variate_chain(fx.view(), fx.view(), &fit).unwrap();
        // ridge damping perturbs β at the 1e-8 level, so Z is constant
        // only to that order
        for i in 0..n {
            assert_abs_diff_eq!(z[[i, 0]], mean, epsilon = 1e-6);
        }
    }

    #[test]
    fn antithetic_average_degenerate_cases() {
        let mut draws = Draws::new(6, 0);
        let n = 100;
        let mut f = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            f[[i, 0]] = draws.standard_normal();
        }
        // identical inputs → average equals inputs, correlation +1
        let same = antithetic_average(f.view(), f.view()).unwrap();
        assert_eq!(same.chain, f);
        assert_abs_diff_eq!(same.correlation[0], 1.0, epsilon = 1e-12);
        // exact negation → average ≡ 0, zero variance
        let neg = f.mapv(|v| -v);
        let anti = antithetic_average(f.view(), neg.view()).unwrap();
        assert!(anti.chain.iter().all(|&v| v == 0.0));
        assert_abs_diff_eq!(anti.correlation[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn surrogate_expectation_identity_is_exact_mean() {
        let q = Gaussian::from_mean_cov(array![1.0, -2.0], (ndarray::Array2::eye(2) * 2.0).view())
            .unwrap();
        let f = FunctionOfState::mean();
        let e = surrogate_expectation(&q, &f, 1_000, 0).unwrap();
        assert_eq!(e.value, array![1.0, -2.0]);
        assert_eq!(e.std_err, array![0.0, 0.0]);
    }

    #[test]
    fn surrogate_expectation_square_is_exact_variance() {
        let cov = array![[1.5, 0.2], [0.2, 0.7]];
        let q = Gaussian::from_mean_cov(array![0.0, 0.0], cov.view()).unwrap();
        let f = FunctionOfState::centered_square(array![0.0, 0.0]);
        let e = surrogate_expectation(&q, &f, 1_000, 0).unwrap();
        assert_abs_diff_eq!(e.value[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(e.value[1], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn surrogate_expectation_predictive_self_consistent() {
        let q = Gaussian::standard(3);
        let rows = array![[1.0, -0.5, 0.25], [0.0, 1.0, 1.0]];
        let f = FunctionOfState::predictive(rows);
        let a = surrogate_expectation(&q, &f, 200_000, 1).unwrap();
        let b = surrogate_expectation(&q, &f, 200_000, 2).unwrap();
        for k in 0..2 {
            let combined = (a.std_err[k].powi(2) + b.std_err[k].powi(2)).sqrt();
            assert!(
                (a.value[k] - b.value[k]).abs() < 4.0 * combined,
                "estimates {} vs {} beyond 4 combined SEs {}",
                a.value[k],
                b.value[k],
                combined
            );
        }
    }

    #[test]
    fn function_through_map_evaluates_in_parameter_space() {
        let map = TransportMap::new(array![[2.0, 0.0], [0.0, 0.5]], array![1.0, -1.0]).unwrap();
        let f = FunctionOfState::mean().through_map(map);
        let out = f.eval(array![1.0, 2.0].view());
        assert_eq!(out, array![3.0, 0.0]);
    }

    #[test]
    fn cva_even_function_sees_no_antithetic_gain() {
        // perfectly anti-coupled chains about 0 with an even functional:
        // the two variance-reduced chains coincide, so averaging them
        // adds nothing
        use crate::integrator::LeapfrogConfig;
        use crate::samplers::{run_cva, KernelConfig, KernelKind};
        let target = Gaussian::standard(2);
        let surrogate = Gaussian::standard(2);
        let cfg = KernelConfig::new(
            KernelKind::Hmc(LeapfrogConfig::new(0.4, 4).unwrap()),
            300,
            100,
        )
        .unwrap();
        let mut draws = Draws::new(3, 9);
        let x0 = draws.standard_normal_vec(2);
        let x0m = x0.mapv(|v| -v);
        let traces = run_cva(
            &target,
            &surrogate,
            x0.view(),
            x0m.view(),
            x0.view(),
            &cfg,
            12,
        )
        .unwrap();
        let f = FunctionOfState::centered_square(Array1::zeros(2));
        let fxp = f.eval_trace(traces.primary.post_burn_in(100));
        let fyp = f.eval_trace(traces.control.as_ref().unwrap().post_burn_in(100));
        let expectation = surrogate_expectation(&surrogate, &f, 1_000, 0).unwrap();
        let fit = estimate_beta(fxp.view(), fyp.view(), expectation, false).unwrap();
        let est = cva_estimate(&traces, &f, &fit, 100).unwrap();
        // X⁻ starts at the exact reflection, so with the even functional
        // Z⁺ ≡ Z⁻ and the antithetic correlation is +1
        for &r in est.rho.iter() {
            assert!(r > 0.999, "expected Z⁺ ≡ Z⁻, got correlation {r}");
        }
    }

    #[test]
    fn cva_with_perfect_surrogate_is_exact() {
        use crate::integrator::LeapfrogConfig;
        use crate::samplers::{run_cva, KernelConfig, KernelKind};
        let target = Gaussian::standard(2);
        let surrogate = Gaussian::standard(2);
        let cfg = KernelConfig::new(
            KernelKind::Hmc(LeapfrogConfig::new(0.4, 4).unwrap()),
            300,
            100,
        )
        .unwrap();
        let x0 = ndarray::array![0.8, -0.4];
        let traces = run_cva(
            &target,
            &surrogate,
            x0.view(),
            x0.view(),
            x0.view(),
            &cfg,
            44,
        )
        .unwrap();
        let f = FunctionOfState::mean();
        let fxp = f.eval_trace(traces.primary.post_burn_in(100));
        let fyp = f.eval_trace(traces.control.as_ref().unwrap().post_burn_in(100));
        let expectation = surrogate_expectation(&surrogate, &f, 1_000, 0).unwrap();
        let fit = estimate_beta(fxp.view(), fyp.view(), expectation, false).unwrap();
        let est = cva_estimate(&traces, &f, &fit, 100).unwrap();
        // X⁺ ≡ Y⁺ bit-for-bit, so both Z chains sit at Ê and the
        // estimate is the exact surrogate (= target) mean
        for d in 0..2 {
            assert!(
                est.estimates[d].abs() < 1e-6,
                "estimate {d}: {}",
                est.estimates[d]
            );
            let col = est.z_chain.column(d);
            let spread = col.iter().cloned().fold(f64::MIN, f64::max)
                - col.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread < 1e-6, "Z chain {d} not constant: spread {spread}");
        }
    }

    #[test]
    fn swindle_estimate_json_has_expected_keys() {
        let est = SwindleEstimate {
            kind: EstimatorKind::Control,
            estimates: array![1.0],
            z_chain: Array2::zeros((2, 1)),
            rho: array![0.5],
            vr_factor: array![f64::INFINITY],
            ess: array![20.0],
            grads_used: 123,
            target_evals: 150,
            surrogate_evals: 75,
        };
        let json = est.to_json();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["kind"], "control");
        assert_eq!(parsed["grads_used"], 123);
        assert!(parsed["vr_factor"][0].is_null());
        assert_eq!(parsed["ess"][0], 20.0);
    }
}
