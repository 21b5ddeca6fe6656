//! Affine transport-map preconditioning.
//!
//! A map x = A·x̃ + b (A lower-triangular, positive diagonal) is fitted by
//! variational inference so that the pulled-back target in x̃ space is
//! approximately standard normal. Samplers then run in latent space, where
//! the control-variate surrogate Q = N(0, I) has a known mean of zero.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::Draws;
use crate::targets::{Gaussian, TargetDensity};

/// Invertible affine change of variables with positive-diagonal
/// lower-triangular scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMap {
    scale: Array2<f64>,
    shift: Array1<f64>,
}

impl TransportMap {
    pub fn identity(dim: usize) -> Self {
        TransportMap {
            scale: Array2::eye(dim),
            shift: Array1::zeros(dim),
        }
    }

    pub fn new(scale: Array2<f64>, shift: Array1<f64>) -> Result<Self> {
        let d = shift.len();
        if scale.nrows() != d || scale.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: scale.nrows(),
            });
        }
        for i in 0..d {
            if !(scale[[i, i]] > 0.0) {
                return Err(Error::Config(format!(
                    "transport map scale diagonal must be positive, got {} at {i}",
                    scale[[i, i]]
                )));
            }
            for j in (i + 1)..d {
                if scale[[i, j]] != 0.0 {
                    return Err(Error::Config(
                        "transport map scale must be lower triangular".into(),
                    ));
                }
            }
        }
        Ok(TransportMap { scale, shift })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn scale(&self) -> &Array2<f64> {
        &self.scale
    }

    pub fn shift(&self) -> &Array1<f64> {
        &self.shift
    }

    /// x = A·x̃ + b.
    pub fn forward(&self, latent: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(latent.len(), self.dim(), "dimension mismatch in forward");
        &linalg::lower_matvec(self.scale.view(), latent) + &self.shift
    }

    /// x̃ = A⁻¹(x − b).
    pub fn inverse(&self, x: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.dim(), "dimension mismatch in inverse");
        let centered = &x - &self.shift;
        linalg::solve_lower(self.scale.view(), centered.view())
    }

    /// log |det ∂x/∂x̃| = Σ_d log A_dd.
    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|d| self.scale[[d, d]].ln()).sum()
    }

    /// The pushforward of a latent Gaussian through this map:
    /// x̃ ~ N(μ₀, L₀L₀ᵀ) ⇒ x ~ N(Aμ₀ + b, (AL₀)(AL₀)ᵀ).
    pub fn pushforward_gaussian(&self, latent: &Gaussian) -> Result<Gaussian> {
        if latent.mean().len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: latent.mean().len(),
            });
        }
        let mean = self.forward(latent.mean());
        let d = self.dim();
        let mut chol = Array2::<f64>::zeros((d, d));
        // product of two lower-triangular matrices stays lower-triangular
        for i in 0..d {
            for j in 0..=i {
                let mut s = 0.0;
                for k in j..=i {
                    s += self.scale[[i, k]] * latent.chol()[[k, j]];
                }
                chol[[i, j]] = s;
            }
        }
        Gaussian::from_mean_chol(mean, chol)
    }

    /// Serializes to a JSON document with decimal floats carrying 17
    /// significant digits, enough for a bit-exact round-trip.
    pub fn to_json(&self) -> String {
        let d = self.dim();
        let mut scale_entries = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                scale_entries.push(format!("{:.16e}", self.scale[[i, j]]));
            }
        }
        let shift_entries: Vec<String> = self.shift.iter().map(|v| format!("{v:.16e}")).collect();
        format!(
            "{{\"dim\":{},\"scale_lower_triangular_row_major\":[{}],\"shift\":[{}]}}\n",
            d,
            scale_entries.join(","),
            shift_entries.join(",")
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            dim: usize,
            scale_lower_triangular_row_major: Vec<f64>,
            shift: Vec<f64>,
        }
        let doc: Doc = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("transport map JSON: {e}")))?;
        if doc.scale_lower_triangular_row_major.len() != doc.dim * doc.dim {
            return Err(Error::Schema(format!(
                "scale has {} entries, expected {}",
                doc.scale_lower_triangular_row_major.len(),
                doc.dim * doc.dim
            )));
        }
        if doc.shift.len() != doc.dim {
            return Err(Error::Schema(format!(
                "shift has {} entries, expected {}",
                doc.shift.len(),
                doc.dim
            )));
        }
        let scale =
            Array2::from_shape_vec((doc.dim, doc.dim), doc.scale_lower_triangular_row_major)
                .expect("shape checked above");
        TransportMap::new(scale, Array1::from_vec(doc.shift))
    }
}

/// Settings for the variational fit.
///
/// The optimizer is Adam (β₁=0.9, β₂=0.999, ε=1e-8) with the step size
/// decayed linearly from `learning_rate` to 2% of it over the run, and
/// the returned map averages the parameter iterates of the last quarter
/// of the steps to strip the residual stochastic-gradient jitter. The
/// variational family is N(b, AAᵀ) initialized at A = I, b = 0.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VIConfig {
    pub steps: usize,
    /// Monte Carlo batch size per step.
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Restrict A to diagonal (ablation); full-rank is the default.
    pub diagonal: bool,
}

impl Default for VIConfig {
    fn default() -> Self {
        VIConfig {
            steps: 2000,
            batch: 8,
            learning_rate: 0.05,
            seed: 0,
            diagonal: false,
        }
    }
}

impl VIConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("VI steps and batch must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("VI learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A fitted map together with the per-step ELBO estimates.
#[derive(Debug, Clone)]
pub struct VIFit {
    pub map: TransportMap,
    pub elbo_trace: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] += lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Maximizes the ELBO of the full-rank Gaussian family over the target by
/// stochastic gradient ascent with reparameterization gradients and the
/// analytic entropy term.
///
/// Parameterization: b free, strict lower triangle of A free, diagonal of
/// A through exp to stay positive. ELBO per draw z ~ N(0, I):
/// −U(Az + b) + Σ_d log A_dd + D/2·(1 + log 2π).
pub fn fit_affine_vi(target: &dyn TargetDensity, cfg: &VIConfig) -> Result<VIFit> {
    cfg.validate()?;
    let d = target.dim();
    // layout: [b (d) | log-diag (d) | strict lower rows (d(d-1)/2, full-rank only)]
    let n_lower = if cfg.diagonal { 0 } else { d * (d - 1) / 2 };
    let n_params = 2 * d + n_lower;
    let mut params: Vec<f64> = vec![0.0; n_params];
    let mut opt = Adam::new(n_params);
    let mut draws = Draws::new(cfg.seed, u64::MAX); // dedicated stream for the fit
    let mut elbo_trace = Vec::with_capacity(cfg.steps);
    let entropy_const = 0.5 * d as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln());

    let tail_start = cfg.steps - cfg.steps / 4;
    let mut tail_sum: Vec<f64> = vec![0.0; n_params];
    let mut tail_count = 0usize;

    let mut scale = Array2::<f64>::zeros((d, d));
    for step in 0..cfg.steps {
        // materialize A from parameters
        let mut idx = 2 * d;
        for i in 0..d {
            scale[[i, i]] = params[d + i].exp();
            if !cfg.diagonal {
                for j in 0..i {
                    scale[[i, j]] = params[idx];
                    idx += 1;
                }
            }
        }
        let shift = ArrayView1::from(&params[..d]);

        let mut grad = vec![0.0; n_params];
        let mut elbo = 0.0;
        for _ in 0..cfg.batch {
            let z = draws.standard_normal_vec(d);
            let x = &linalg::lower_matvec(scale.view(), z.view()) + &shift;
            let u = target.potential(x.view());
            let g = target.grad_potential(x.view());
            elbo += -u;
            for i in 0..d {
                grad[i] += -g[i]; // ∂/∂b
                grad[d + i] += -g[i] * z[i] * scale[[i, i]]; // ∂/∂log A_dd
            }
            if !cfg.diagonal {
                let mut k = 2 * d;
                for i in 0..d {
                    for j in 0..i {
                        grad[k] += -g[i] * z[j];
                        k += 1;
                    }
                }
            }
        }
        let inv_batch = 1.0 / cfg.batch as f64;
        for g in grad.iter_mut() {
            *g *= inv_batch;
        }
        // analytic entropy: Σ log A_dd, gradient 1 per log-diag parameter
        let log_det: f64 = (0..d).map(|i| params[d + i]).sum();
        for i in 0..d {
            grad[d + i] += 1.0;
        }
        let elbo_step = elbo * inv_batch + log_det + entropy_const;
        if !elbo_step.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "ELBO".into(),
            });
        }
        elbo_trace.push(elbo_step);

        let lr = cfg.learning_rate * (1.0 - 0.98 * step as f64 / cfg.steps as f64);
        opt.step(&mut params, &grad, lr);

        if step + 1 > tail_start {
            for (acc, &p) in tail_sum.iter_mut().zip(params.iter()) {
                *acc += p;
            }
            tail_count += 1;
        }
    }

    let averaged: Vec<f64> = if tail_count > 0 {
        tail_sum.iter().map(|&s| s / tail_count as f64).collect()
    } else {
        params
    };
    let mut scale = Array2::<f64>::zeros((d, d));
    let mut idx = 2 * d;
    for i in 0..d {
        scale[[i, i]] = averaged[d + i].exp();
        if !cfg.diagonal {
            for j in 0..i {
                scale[[i, j]] = averaged[idx];
                idx += 1;
            }
        }
    }
    let map = TransportMap::new(scale, Array1::from_vec(averaged[..d].to_vec()))?;
    Ok(VIFit { map, elbo_trace })
}

/// Checks that an ELBO trace is non-decreasing once smoothed: consecutive
/// non-overlapping windows of `window` steps must not drop by more than
/// `slack` standard errors of the window mean.
pub fn smoothed_elbo_nondecreasing(trace: &[f64], window: usize, slack: f64) -> bool {
    if trace.len() < 2 * window {
        return true;
    }
    let windows: Vec<&[f64]> = trace.chunks(window).filter(|c| c.len() == window).collect();
    let stats: Vec<(f64, f64)> = windows
        .iter()
        .map(|w| {
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
            (mean, (var / w.len() as f64).sqrt())
        })
        .collect();
    for pair in stats.windows(2) {
        let (prev_mean, prev_se) = pair[0];
        let (next_mean, next_se) = pair[1];
        let tol = slack * (prev_se.powi(2) + next_se.powi(2)).sqrt();
        if next_mean < prev_mean - tol {
            return false;
        }
    }
    true
}

/// The target pulled back through a transport map:
/// U_latent(x̃) = U(m(x̃)) − log|det A|, ∇U_latent(x̃) = Aᵀ ∇U(m(x̃)).
pub struct Preconditioned {
    base: Arc<dyn TargetDensity>,
    map: TransportMap,
    log_det: f64,
}

impl Preconditioned {
    pub fn map(&self) -> &TransportMap {
        &self.map
    }

    pub fn base(&self) -> &Arc<dyn TargetDensity> {
        &self.base
    }
}

pub fn precondition(base: Arc<dyn TargetDensity>, map: TransportMap) -> Result<Preconditioned> {
    if base.dim() != map.dim() {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            got: map.dim(),
        });
    }
    let log_det = map.log_det();
    Ok(Preconditioned { base, map, log_det })
}

impl TargetDensity for Preconditioned {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn potential(&self, latent: ArrayView1<f64>) -> f64 {
        let x = self.map.forward(latent);
        self.base.potential(x.view()) - self.log_det
    }

    fn grad_potential(&self, latent: ArrayView1<f64>) -> Array1<f64> {
        let x = self.map.forward(latent);
        let g = self.base.grad_potential(x.view());
        // Aᵀ g without materializing the transpose
        let d = self.dim();
        let scale = self.map.scale();
        let mut out = Array1::<f64>::zeros(d);
        for j in 0..d {
            let mut s = 0.0;
            for i in j..d {
                s += scale[[i, j]] * g[i];
            }
            out[j] = s;
        }
        out
    }
}
