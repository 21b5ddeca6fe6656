//! Experiment pipeline: assemble a (possibly preconditioned) target with
//! its surrogate, run estimator suites over chain groups and
//! replications, and produce the efficiency tables, sweeps, and held-out
//! prediction studies the CLI serializes.
//!
//! Everything here is deterministic given the master seed. Replications
//! and chain groups are independent (separate derived seeds), so callers
//! may evaluate them in parallel and assemble results in index order.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};

use crate::diagnostics::{self, CouplingStats};
use crate::error::{Error, Result};
use crate::preconditioner::{fit_affine_vi, precondition, TransportMap, VIConfig, VIFit};
use crate::rng::{derive_seed, Draws};
use crate::samplers::{run_chain, run_coupled, run_cva, CoupledTraces, CouplingMode, KernelConfig};
use crate::swindles::{
    antithetic_average, control_variate_chain, estimate_beta, surrogate_expectation,
    ControlVariateFit, EstimatorKind, FunctionOfState, SurrogateExpectation,
};
use crate::targets::{sigmoid, Gaussian, TargetDensity};

const TAG_REPLICATION: u64 = 0x01;
const TAG_GROUP: u64 = 0x02;
const TAG_INIT: u64 = 0x03;
const TAG_EQ: u64 = 0x04;

/// A sampling-ready target: the density chains actually run on (latent
/// space when preconditioned), the transport map for pushing functionals
/// back to parameter space, and the latent-space Gaussian surrogate for
/// control chains.
pub struct TargetBundle {
    pub target: Arc<dyn TargetDensity>,
    pub map: Option<TransportMap>,
    pub surrogate: Option<Gaussian>,
}

impl TargetBundle {
    /// Raw target, no preconditioning, no surrogate: supports plain and
    /// antithetic estimators only.
    pub fn raw(target: Arc<dyn TargetDensity>) -> Self {
        TargetBundle {
            target,
            map: None,
            surrogate: None,
        }
    }

    /// Preconditions the target with a fitted map; chains run in latent
    /// space where the surrogate is standard normal with known mean 0.
    pub fn preconditioned(base: Arc<dyn TargetDensity>, map: TransportMap) -> Result<Self> {
        let dim = base.dim();
        let latent = precondition(base, map.clone())?;
        Ok(TargetBundle {
            target: Arc::new(latent),
            map: Some(map),
            surrogate: Some(Gaussian::standard(dim)),
        })
    }

    /// Keeps the target in parameter space but uses the fitted Gaussian
    /// N(b, AAᵀ) as the surrogate (no change of variables).
    pub fn with_gaussian_surrogate(
        target: Arc<dyn TargetDensity>,
        surrogate: Gaussian,
    ) -> Result<Self> {
        if target.dim() != surrogate.dim() {
            return Err(Error::DimensionMismatch {
                expected: target.dim(),
                got: surrogate.dim(),
            });
        }
        Ok(TargetBundle {
            target,
            map: None,
            surrogate: Some(surrogate),
        })
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// Composes a functional with the transport map when one is active,
    /// so it always evaluates in parameter space.
    pub fn functional(&self, f: FunctionOfState) -> FunctionOfState {
        match &self.map {
            Some(m) => f.through_map(m.clone()),
            None => f,
        }
    }

    /// Draws an initial state from the surrogate (the fitted variational
    /// distribution), falling back to a standard normal draw.
    pub fn draw_initial(&self, draws: &mut Draws) -> Array1<f64> {
        match &self.surrogate {
            Some(q) => q.sample(draws),
            None => draws.standard_normal_vec(self.dim()),
        }
    }
}

/// Fits the affine map by VI and assembles the bundle per the requested
/// preconditioning flavor.
pub fn fit_bundle(
    base: Arc<dyn TargetDensity>,
    vi_cfg: &VIConfig,
    precondition_space: bool,
) -> Result<(TargetBundle, VIFit)> {
    let fit = fit_affine_vi(base.as_ref(), vi_cfg)?;
    let bundle = if precondition_space {
        TargetBundle::preconditioned(base, fit.map.clone())?
    } else {
        let surrogate = Gaussian::from_mean_chol(fit.map.shift().clone(), fit.map.scale().clone())?;
        TargetBundle::with_gaussian_surrogate(base, surrogate)?
    };
    Ok((bundle, fit))
}

/// The per-replication estimator suite settings.
#[derive(Debug, Clone)]
pub struct SuiteSpec {
    pub kernel: KernelConfig,
    pub chain_groups: usize,
    pub estimators: Vec<EstimatorKind>,
    /// Monte Carlo budget for Ê_Q when no closed form applies.
    pub eq_budget: usize,
    /// Restrict β to the matching component (automatic fallback when the
    /// pooled sample count cannot support the full regression).
    pub diagonal_beta: bool,
    /// Relative cost of a surrogate density evaluation in the weighted
    /// efficiency column.
    pub surrogate_cost_weight: f64,
}

impl SuiteSpec {
    pub fn new(kernel: KernelConfig, chain_groups: usize, estimators: Vec<EstimatorKind>) -> Self {
        SuiteSpec {
            kernel,
            chain_groups,
            estimators,
            eq_budget: 100_000,
            diagonal_beta: false,
            surrogate_cost_weight: 0.2,
        }
    }

    fn needs_surrogate(&self) -> bool {
        self.estimators
            .iter()
            .any(|k| matches!(k, EstimatorKind::Control | EstimatorKind::Cva))
    }

    fn needs_antithetic(&self) -> bool {
        self.estimators
            .iter()
            .any(|k| matches!(k, EstimatorKind::Antithetic | EstimatorKind::Cva))
    }
}

/// Efficiency summary of one estimator kind within one replication.
#[derive(Debug, Clone)]
pub struct EstimatorResult {
    pub kind: EstimatorKind,
    /// Pooled point estimate per component.
    pub estimates: Array1<f64>,
    /// Multi-chain ESS per component over the replication's groups.
    pub ess: Array1<f64>,
    /// ESS normalized by target density evaluations.
    pub ess_per_target_eval: Array1<f64>,
    /// ESS normalized by target evals + weighted surrogate evals.
    pub ess_per_weighted_eval: Array1<f64>,
    /// Mean over groups of the per-component coupling correlation.
    pub rho: Array1<f64>,
    pub vr_factor: Array1<f64>,
    pub target_evals: usize,
    pub surrogate_evals: usize,
    pub grads_used: usize,
}

/// One replication's results for one functional.
#[derive(Debug, Clone)]
pub struct ReplicationResult {
    pub estimators: Vec<EstimatorResult>,
    /// Split R-hat per component of the plain chains across groups.
    pub rhat: Array1<f64>,
    pub acceptance_primary: f64,
    pub acceptance_surrogate: Option<f64>,
    pub decoupling_rate: Option<f64>,
}

struct GroupTraces {
    traces: CoupledTraces,
}

fn run_group(bundle: &TargetBundle, spec: &SuiteSpec, group_seed: u64) -> Result<GroupTraces> {
    let mut init = Draws::new(derive_seed(group_seed, TAG_INIT), 0);
    let x0p = bundle.draw_initial(&mut init);
    let traces = if spec.needs_surrogate() {
        let surrogate = bundle.surrogate.as_ref().ok_or_else(|| {
            Error::Config("control/combined estimators need a Gaussian surrogate".into())
        })?;
        let x0m = bundle.draw_initial(&mut init);
        let y0p = bundle.draw_initial(&mut init);
        run_cva(
            bundle.target.as_ref(),
            surrogate,
            x0p.view(),
            x0m.view(),
            y0p.view(),
            &spec.kernel,
            group_seed,
        )?
    } else if spec.needs_antithetic() {
        let x0m = bundle.draw_initial(&mut init);
        run_coupled(
            bundle.target.as_ref(),
            bundle.target.as_ref(),
            x0p.view(),
            x0m.view(),
            CouplingMode::Antithetic,
            &spec.kernel,
            group_seed,
        )?
    } else {
        let trace = run_chain(
            bundle.target.as_ref(),
            x0p.view(),
            &spec.kernel,
            group_seed,
            false,
        )?;
        GroupTraces {
            traces: CoupledTraces {
                primary: trace,
                antithetic: None,
                control: None,
                reflected_control: None,
                seed: group_seed,
                center: Array1::zeros(bundle.dim()),
            },
        }
        .traces
    };
    Ok(GroupTraces { traces })
}

fn pool_rows(mats: &[Array2<f64>]) -> Array2<f64> {
    let total: usize = mats.iter().map(|m| m.nrows()).sum();
    let k = mats[0].ncols();
    let mut out = Array2::<f64>::zeros((total, k));
    let mut at = 0;
    for m in mats {
        out.slice_mut(ndarray::s![at..at + m.nrows(), ..]).assign(m);
        at += m.nrows();
    }
    out
}

fn column_means_of(m: ArrayView2<f64>) -> Array1<f64> {
    m.sum_axis(ndarray::Axis(0)) / m.nrows() as f64
}

/// Fits the shared control-variate regression for one replication by
/// pooling the post-burn-in f(X)/f(Y) rows of all groups (both the
/// forward and antithetic pairs when present). Falls back to the
/// diagonal regression when the pooled rows cannot support the full one.
fn fit_replication_beta(
    groups: &[GroupTraces],
    f: &FunctionOfState,
    burn_in: usize,
    expectation: SurrogateExpectation,
    diagonal: bool,
) -> Result<ControlVariateFit> {
    let mut fx_parts = Vec::new();
    let mut fy_parts = Vec::new();
    for g in groups {
        let t = &g.traces;
        let yp = t
            .control
            .as_ref()
            .ok_or_else(|| Error::Config("β regression requires surrogate chains".into()))?;
        fx_parts.push(f.eval_trace(t.primary.post_burn_in(burn_in)));
        fy_parts.push(f.eval_trace(yp.post_burn_in(burn_in)));
        if let (Some(xm), Some(ym)) = (&t.antithetic, &t.reflected_control) {
            fx_parts.push(f.eval_trace(xm.post_burn_in(burn_in)));
            fy_parts.push(f.eval_trace(ym.post_burn_in(burn_in)));
        }
    }
    let fx = pool_rows(&fx_parts);
    let fy = pool_rows(&fy_parts);
    let use_diagonal = diagonal || fx.nrows() < fy.ncols() + 2;
    estimate_beta(fx.view(), fy.view(), expectation, use_diagonal)
}

/// Builds one estimator's per-group Z chains plus bookkeeping.
struct EstimatorChains {
    z_per_group: Vec<Array2<f64>>,
    rho_sum: Array1<f64>,
    base_var_rows: Vec<Array2<f64>>,
    /// Member chains feeding the estimator (1 plain, 2 antithetic or
    /// control, 4 combined); scales the super-efficiency cap, since the
    /// estimator consumed that many samples per step.
    member_chains: usize,
    target_evals: usize,
    surrogate_evals: usize,
    grads_used: usize,
}

fn estimator_chains(
    kind: EstimatorKind,
    groups: &[GroupTraces],
    f: &FunctionOfState,
    fit: Option<&ControlVariateFit>,
    burn_in: usize,
) -> Result<EstimatorChains> {
    let k = f.out_dim(groups[0].traces.primary.dim());
    let mut out = EstimatorChains {
        z_per_group: Vec::with_capacity(groups.len()),
        rho_sum: Array1::zeros(k),
        base_var_rows: Vec::new(),
        member_chains: match kind {
            EstimatorKind::Plain => 1,
            EstimatorKind::Antithetic | EstimatorKind::Control => 2,
            EstimatorKind::Cva => 4,
        },
        target_evals: 0,
        surrogate_evals: 0,
        grads_used: 0,
    };
    for g in groups {
        let t = &g.traces;
        let fxp = f.eval_trace(t.primary.post_burn_in(burn_in));
        match kind {
            EstimatorKind::Plain => {
                out.target_evals += t.primary.target_evals();
                out.grads_used += t.primary.grad_evals;
                out.z_per_group.push(fxp);
            }
            EstimatorKind::Antithetic => {
                let xm = t.antithetic.as_ref().ok_or_else(|| {
                    Error::Config("antithetic estimator requires the partner chain".into())
                })?;
                let fxm = f.eval_trace(xm.post_burn_in(burn_in));
                let avg = antithetic_average(fxp.view(), fxm.view())?;
                out.rho_sum += &avg
                    .correlation
                    .mapv(|v| if v.is_finite() { v } else { 0.0 });
                out.target_evals += t.primary.target_evals() + xm.target_evals();
                out.grads_used += t.primary.grad_evals + xm.grad_evals;
                out.base_var_rows.push(fxp);
                out.z_per_group.push(avg.chain);
            }
            EstimatorKind::Control => {
                let yp = t.control.as_ref().ok_or_else(|| {
                    Error::Config("control estimator requires the surrogate chain".into())
                })?;
                let fyp = f.eval_trace(yp.post_burn_in(burn_in));
                let fit =
                    fit.ok_or_else(|| Error::Config("control estimator requires a β fit".into()))?;
                let z = control_variate_chain(fxp.view(), fyp.view(), fit)?;
                out.rho_sum += &crate::swindles::column_correlations(fxp.view(), fyp.view())
                    .mapv(|v| if v.is_finite() { v } else { 0.0 });
                out.target_evals += t.primary.target_evals();
                out.grads_used += t.primary.grad_evals;
                out.surrogate_evals += yp.target_evals();
                out.base_var_rows.push(fxp);
                out.z_per_group.push(z);
            }
            EstimatorKind::Cva => {
                let (xm, yp, ym) = match (&t.antithetic, &t.control, &t.reflected_control) {
                    (Some(a), Some(c), Some(r)) => (a, c, r),
                    _ => {
                        return Err(Error::Config(
                            "combined estimator requires all four chains".into(),
                        ))
                    }
                };
                let fit =
                    fit.ok_or_else(|| Error::Config("combined estimator requires a β fit".into()))?;
                let fxm = f.eval_trace(xm.post_burn_in(burn_in));
                let fyp = f.eval_trace(yp.post_burn_in(burn_in));
                let fym = f.eval_trace(ym.post_burn_in(burn_in));
                let zp = control_variate_chain(fxp.view(), fyp.view(), fit)?;
                let zm = control_variate_chain(fxm.view(), fym.view(), fit)?;
                let avg = antithetic_average(zp.view(), zm.view())?;
                out.rho_sum += &avg
                    .correlation
                    .mapv(|v| if v.is_finite() { v } else { 0.0 });
                out.target_evals += t.primary.target_evals() + xm.target_evals();
                out.grads_used += t.primary.grad_evals + xm.grad_evals;
                out.surrogate_evals += yp.target_evals();
                out.base_var_rows.push(fxp);
                out.z_per_group.push(avg.chain);
            }
        }
    }
    Ok(out)
}

/// ESS with the super-efficiency cap applied per component; a
/// constant (perfectly variance-cancelled) chain reports the cap.
fn ess_capped(chains: &[ArrayView2<f64>]) -> Result<Array1<f64>> {
    let total: usize = chains.iter().map(|c| c.nrows()).sum();
    let cap = 10.0 * total as f64;
    let k = chains[0].ncols();
    let mut out = Array1::<f64>::zeros(k);
    for j in 0..k {
        let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(j).to_vec()).collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        out[j] = match diagnostics::ess_scalar(&refs) {
            Ok((e, _)) => e,
            Err(Error::UndefinedEss(_)) => cap,
            Err(e) => return Err(e),
        };
    }
    Ok(out)
}

/// Runs one full replication of the estimator suite for one functional.
pub fn run_replication(
    bundle: &TargetBundle,
    f_raw: FunctionOfState,
    spec: &SuiteSpec,
    replication_seed: u64,
) -> Result<ReplicationResult> {
    if spec.chain_groups == 0 {
        return Err(Error::Config("at least one chain group is required".into()));
    }
    let f = bundle.functional(f_raw);
    let burn_in = spec.kernel.burn_in;
    let mut groups = Vec::with_capacity(spec.chain_groups);
    for g in 0..spec.chain_groups {
        let group_seed = derive_seed(derive_seed(replication_seed, TAG_GROUP), g as u64);
        groups.push(run_group(bundle, spec, group_seed)?);
    }

    // stationarity gate on the plain chains
    let plain_views: Vec<ArrayView2<f64>> = groups
        .iter()
        .map(|g| g.traces.primary.post_burn_in(burn_in))
        .collect();
    let rhat = if groups.len() >= 2 {
        diagnostics::rhat(&plain_views)?
    } else {
        Array1::from_elem(bundle.dim(), f64::NAN)
    };

    let fit = if spec.needs_surrogate() {
        let surrogate = bundle.surrogate.as_ref().ok_or_else(|| {
            Error::Config("control/combined estimators need a Gaussian surrogate".into())
        })?;
        let expectation = surrogate_expectation(
            surrogate,
            &f,
            spec.eq_budget,
            derive_seed(replication_seed, TAG_EQ),
        )?;
        Some(fit_replication_beta(
            &groups,
            &f,
            burn_in,
            expectation,
            spec.diagonal_beta,
        )?)
    } else {
        None
    };

    let mut estimators = Vec::with_capacity(spec.estimators.len());
    for &kind in &spec.estimators {
        let chains = estimator_chains(kind, &groups, &f, fit.as_ref(), burn_in)?;
        let views: Vec<ArrayView2<f64>> = chains.z_per_group.iter().map(|z| z.view()).collect();
        let auto_ess = ess_capped(&views)?;
        let pooled = pool_rows(&chains.z_per_group);
        let estimates = column_means_of(pooled.view());
        let vr_factor = if chains.base_var_rows.is_empty() {
            Array1::ones(auto_ess.len())
        } else {
            let base = crate::swindles::column_variances(pool_rows(&chains.base_var_rows).view());
            let zvar = crate::swindles::column_variances(pooled.view());
            Array1::from_iter(base.iter().zip(zvar.iter()).map(|(&b, &z)| {
                if z > 0.0 {
                    b / z
                } else {
                    f64::INFINITY
                }
            }))
        };
        // ESS on the f(X) scale: Var[Ê] = Var(Z)·τ/n, while the i.i.d.
        // yardstick is Var(f(X))/N, so the variance reduction multiplies
        // the Z chain's autocorrelation ESS. The super-efficiency cap is
        // 10× the samples consumed across the estimator's member chains.
        let cap = 10.0 * (chains.member_chains * pooled.nrows()) as f64;
        let ess = Array1::from_iter(auto_ess.iter().zip(vr_factor.iter()).map(|(&e, &v)| {
            if v.is_finite() {
                (e * v).min(cap)
            } else {
                cap
            }
        }));
        let target_evals = chains.target_evals.max(1);
        let weighted =
            target_evals as f64 + spec.surrogate_cost_weight * chains.surrogate_evals as f64;
        estimators.push(EstimatorResult {
            kind,
            ess_per_target_eval: ess.mapv(|e| e / target_evals as f64),
            ess_per_weighted_eval: ess.mapv(|e| e / weighted),
            rho: chains.rho_sum.mapv(|s| s / groups.len() as f64),
            vr_factor,
            target_evals: chains.target_evals,
            surrogate_evals: chains.surrogate_evals,
            grads_used: chains.grads_used,
            ess,
            estimates,
        });
    }

    let acceptance_primary = groups
        .iter()
        .map(|g| g.traces.primary.acceptance_rate())
        .sum::<f64>()
        / groups.len() as f64;
    let acceptance_surrogate = groups
        .first()
        .and_then(|g| g.traces.control.as_ref())
        .map(|_| {
            groups
                .iter()
                .map(|g| g.traces.control.as_ref().unwrap().acceptance_rate())
                .sum::<f64>()
                / groups.len() as f64
        });
    let decoupling_rate = if spec.needs_surrogate() || spec.needs_antithetic() {
        let mut total = 0.0;
        let mut count = 0usize;
        for g in &groups {
            let partner = g.traces.control.as_ref().or(g.traces.antithetic.as_ref());
            if let Some(p) = partner {
                let n = g.traces.primary.accepts.len();
                total += (0..n)
                    .filter(|&i| g.traces.primary.accepts[i] != p.accepts[i])
                    .count() as f64
                    / n as f64;
                count += 1;
            }
        }
        (count > 0).then(|| total / count as f64)
    } else {
        None
    };

    Ok(ReplicationResult {
        estimators,
        rhat,
        acceptance_primary,
        acceptance_surrogate,
        decoupling_rate,
    })
}

/// Derives the replication seed for index `r` under a master seed.
pub fn replication_seed(master: u64, r: usize) -> u64 {
    derive_seed(derive_seed(master, TAG_REPLICATION), r as u64)
}

/// Re-materializes the raw traces of one chain group exactly as the
/// estimator suite consumed them (for trace dumps and inspection).
pub fn group_traces(
    bundle: &TargetBundle,
    spec: &SuiteSpec,
    replication_seed: u64,
    group: usize,
) -> Result<CoupledTraces> {
    let group_seed = derive_seed(derive_seed(replication_seed, TAG_GROUP), group as u64);
    Ok(run_group(bundle, spec, group_seed)?.traces)
}

/// Coupling statistics of a dedicated two-chain run (used by the sweep
/// and the figure-style coupling tables).
pub fn coupled_pair_stats(
    bundle: &TargetBundle,
    f_raw: FunctionOfState,
    kernel: &KernelConfig,
    seed: u64,
    same_target: bool,
) -> Result<CouplingStats> {
    let f = bundle.functional(f_raw);
    let mut init = Draws::new(derive_seed(seed, TAG_INIT), 0);
    let x0 = bundle.draw_initial(&mut init);
    let traces = if same_target {
        let y0 = bundle.draw_initial(&mut init);
        run_coupled(
            bundle.target.as_ref(),
            bundle.target.as_ref(),
            x0.view(),
            y0.view(),
            CouplingMode::Shared,
            kernel,
            seed,
        )?
    } else {
        let surrogate = bundle
            .surrogate
            .as_ref()
            .ok_or_else(|| Error::Config("coupling to the surrogate needs one fitted".into()))?;
        let y0 = bundle.draw_initial(&mut init);
        run_coupled(
            bundle.target.as_ref(),
            surrogate,
            x0.view(),
            y0.view(),
            CouplingMode::Shared,
            kernel,
            seed,
        )?
    };
    diagnostics::coupling_stats(&traces, &f, kernel.burn_in, same_target)
}

/// MAP estimate by L-BFGS (two-loop recursion, backtracking line search)
/// to the requested gradient norm.
pub fn map_estimate(
    target: &dyn TargetDensity,
    x0: Array1<f64>,
    grad_tol: f64,
    max_iters: usize,
) -> Result<Array1<f64>> {
    const MEMORY: usize = 10;
    let mut x = x0;
    let mut fx = target.potential(x.view());
    let mut grad = target.grad_potential(x.view());
    let mut s_hist: Vec<Array1<f64>> = Vec::new();
    let mut y_hist: Vec<Array1<f64>> = Vec::new();

    for _iter in 0..max_iters {
        let gnorm = grad.dot(&grad).sqrt();
        if gnorm < grad_tol {
            return Ok(x);
        }
        // two-loop recursion
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(y_hist.iter()).rev() {
            let rho = 1.0 / y.dot(s);
            let alpha = rho * s.dot(&q);
            q.scaled_add(-alpha, y);
            alphas.push((alpha, rho));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = s.dot(y) / y.dot(y);
            q *= gamma;
        }
        for ((s, y), (alpha, rho)) in s_hist.iter().zip(y_hist.iter()).zip(alphas.iter().rev()) {
            let beta = rho * y.dot(&q);
            q.scaled_add(alpha - beta, s);
        }
        let direction = q.mapv(|v| -v);

        // backtracking Armijo line search
        let slope = grad.dot(&direction);
        if !slope.is_finite() || slope >= 0.0 {
            // reset curvature history and fall back to steepest descent
            s_hist.clear();
            y_hist.clear();
            continue;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let mut candidate = x.clone();
            candidate.scaled_add(step, &direction);
            let fc = target.potential(candidate.view());
            // the absolute slack keeps the test meaningful once the
            // Armijo decrement falls below rounding on fx
            let armijo = fc <= fx + 1e-4 * step * slope + 4.0 * f64::EPSILON * fx.abs();
            if fc.is_finite() && armijo {
                let new_grad = target.grad_potential(candidate.view());
                let s = &candidate - &x;
                let yv = &new_grad - &grad;
                let s_norm = s.dot(&s).sqrt();
                let y_norm = yv.dot(&yv).sqrt();
                if s.dot(&yv) > 1e-10 * s_norm * y_norm {
                    s_hist.push(s);
                    y_hist.push(yv);
                    if s_hist.len() > MEMORY {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                }
                x = candidate;
                fx = fc;
                grad = new_grad;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NonFinite {
                step: _iter,
                what: "line search stalled in MAP optimization".into(),
            });
        }
    }
    let gnorm = grad.dot(&grad).sqrt();
    if gnorm < grad_tol {
        Ok(x)
    } else {
        Err(Error::NonFinite {
            step: max_iters,
            what: format!("MAP optimizer did not reach gradient norm {grad_tol} (at {gnorm:.2e})"),
        })
    }
}

/// Mean per-row negative log-likelihood (nats) of predictive
/// probabilities against binary labels, with probabilities clamped away
/// from 0 and 1.
pub fn test_nll(probabilities: &Array1<f64>, labels: &Array1<f64>) -> f64 {
    assert_eq!(
        probabilities.len(),
        labels.len(),
        "prediction/label mismatch"
    );
    let eps = 1e-9;
    let n = labels.len() as f64;
    probabilities
        .iter()
        .zip(labels.iter())
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Predictive NLL of the MAP point estimate on a test design.
pub fn map_nll(weights: &Array1<f64>, test_design: &Array2<f64>, test_labels: &Array1<f64>) -> f64 {
    let probs = test_design.dot(weights).mapv(sigmoid);
    test_nll(&probs, test_labels)
}

/// Per-model-evaluation cost of each estimator in the prediction study:
/// how many held-out model evaluations one chain row consumes.
pub fn prediction_cost(kind: EstimatorKind) -> usize {
    match kind {
        EstimatorKind::Plain => 1,
        EstimatorKind::Antithetic | EstimatorKind::Control => 2,
        EstimatorKind::Cva => 4,
    }
}

/// Interleaves the per-group Z-chain rows round-robin (group-major
/// rotation) so that small budgets draw from distinct chains.
pub fn interleave_rows(z_per_group: &[Array2<f64>]) -> Array2<f64> {
    let g = z_per_group.len();
    let n = z_per_group.iter().map(|z| z.nrows()).min().unwrap_or(0);
    let k = z_per_group[0].ncols();
    let mut out = Array2::<f64>::zeros((g * n, k));
    for i in 0..n {
        for (gi, z) in z_per_group.iter().enumerate() {
            out.row_mut(i * g + gi).assign(&z.row(i));
        }
    }
    out
}

/// Predictive-probability chains per group for one replication: the
/// requested estimator's Z chain for the predictive functional, plus the
/// evaluation-cost metadata needed by the budget axis.
pub struct PredictionChains {
    pub per_kind: Vec<(EstimatorKind, Array2<f64>)>,
}

/// Builds interleaved predictive Z rows for every requested estimator
/// from one replication's groups.
pub fn prediction_chains(
    bundle: &TargetBundle,
    test_design: &Array2<f64>,
    spec: &SuiteSpec,
    replication_seed: u64,
) -> Result<PredictionChains> {
    let f_raw = FunctionOfState::predictive(test_design.clone());
    let f = bundle.functional(f_raw);
    let burn_in = spec.kernel.burn_in;
    let mut groups = Vec::with_capacity(spec.chain_groups);
    for g in 0..spec.chain_groups {
        let group_seed = derive_seed(derive_seed(replication_seed, TAG_GROUP), g as u64);
        groups.push(run_group(bundle, spec, group_seed)?);
    }
    let fit = if spec.needs_surrogate() {
        let surrogate = bundle.surrogate.as_ref().ok_or_else(|| {
            Error::Config("control/combined estimators need a Gaussian surrogate".into())
        })?;
        let expectation = surrogate_expectation(
            surrogate,
            &f,
            spec.eq_budget,
            derive_seed(replication_seed, TAG_EQ),
        )?;
        Some(fit_replication_beta(
            &groups,
            &f,
            burn_in,
            expectation,
            spec.diagonal_beta,
        )?)
    } else {
        None
    };
    let mut per_kind = Vec::new();
    for &kind in &spec.estimators {
        let chains = estimator_chains(kind, &groups, &f, fit.as_ref(), burn_in)?;
        per_kind.push((kind, interleave_rows(&chains.z_per_group)));
    }
    Ok(PredictionChains { per_kind })
}

/// Averaged prediction at a model-evaluation budget: the first
/// ⌊budget/cost⌋ interleaved rows. Returns `None` when the budget cannot
/// afford a single row.
pub fn prediction_at_budget(
    rows: &Array2<f64>,
    kind: EstimatorKind,
    budget: usize,
) -> Option<Array1<f64>> {
    let cost = prediction_cost(kind);
    let m = (budget / cost).min(rows.nrows());
    if m == 0 {
        return None;
    }
    Some(column_means_of(rows.slice(ndarray::s![..m, ..])))
}
