//! Transition kernels (HMC, MALA, RWM) and the coupled-chain drivers.
//!
//! All kernels draw their randomness from a [`NoiseStream`], so chains
//! advanced with the same seed consume bit-identical noise regardless of
//! how many partner chains run alongside. Coupled drivers advance every
//! member chain in lockstep per step index; a member chain in isolation
//! is bit-identical to a solo run with the same seed and start.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::integrator::{kinetic, leapfrog_cached, Evaluated, LeapfrogConfig};
use crate::rng::{NoiseStream, StepNoise};
use crate::targets::{Gaussian, TargetDensity};

/// Which transition kernel drives a chain.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelKind {
    Hmc(LeapfrogConfig),
    Mala { step_size: f64 },
    Rwm { step_size: f64 },
}

impl KernelKind {
    fn validate(&self) -> Result<()> {
        let eps = match self {
            KernelKind::Hmc(cfg) => {
                LeapfrogConfig::new(cfg.step_size, cfg.steps)?;
                return Ok(());
            }
            KernelKind::Mala { step_size } | KernelKind::Rwm { step_size } => *step_size,
        };
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::Config(format!(
                "step size must be non-negative, got {eps}"
            )));
        }
        Ok(())
    }

    fn needs_gradient(&self) -> bool {
        !matches!(self, KernelKind::Rwm { .. })
    }
}

/// Kernel, chain length, and burn-in (used downstream by estimators).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct KernelConfig {
    pub kernel: KernelKind,
    pub steps: usize,
    pub burn_in: usize,
}

impl KernelConfig {
    pub fn new(kernel: KernelKind, steps: usize, burn_in: usize) -> Result<Self> {
        kernel.validate()?;
        if steps == 0 {
            return Err(Error::Config("chain length must be positive".into()));
        }
        if burn_in >= steps {
            return Err(Error::Config(format!(
                "burn-in ({burn_in}) must be smaller than the chain length ({steps})"
            )));
        }
        Ok(KernelConfig {
            kernel,
            steps,
            burn_in,
        })
    }
}

/// Metropolis-Hastings correction shared by every kernel: accept the
/// proposal iff b < min(1, exp(h0 − h1)). A non-finite h1 (divergence)
/// always rejects.
pub fn mh_adjust(
    current: ArrayView1<f64>,
    proposal: ArrayView1<f64>,
    h0: f64,
    h1: f64,
    b: f64,
) -> (Array1<f64>, bool) {
    if h1.is_finite() && mh_accepts(h0 - h1, b) {
        (proposal.to_owned(), true)
    } else {
        (current.to_owned(), false)
    }
}

/// Callers guarantee a finite log ratio (non-finite proposal energies
/// reject before reaching here); NaN compares false on both branches.
fn mh_accepts(log_ratio: f64, b: f64) -> bool {
    log_ratio >= 0.0 || b < log_ratio.exp()
}

/// One chain's record: post-transition states row by row, accept flags,
/// per-step log MH ratios, and the evaluation counts billed to its target.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub samples: Array2<f64>,
    pub accepts: Vec<bool>,
    /// log of the Metropolis ratio (h0 − h1 for HMC); −∞ when divergent.
    pub log_accept_ratios: Vec<f64>,
    pub grad_evals: usize,
    pub potential_evals: usize,
    pub divergences: usize,
}

impl ChainTrace {
    fn with_capacity(steps: usize, dim: usize) -> Self {
        ChainTrace {
            samples: Array2::zeros((steps, dim)),
            accepts: Vec::with_capacity(steps),
            log_accept_ratios: Vec::with_capacity(steps),
            grad_evals: 0,
            potential_evals: 0,
            divergences: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Rows after discarding the first `burn_in` steps.
    pub fn post_burn_in(&self, burn_in: usize) -> ndarray::ArrayView2<'_, f64> {
        self.samples
            .slice(ndarray::s![burn_in.min(self.len()).., ..])
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.accepts.is_empty() {
            return 0.0;
        }
        self.accepts.iter().filter(|&&a| a).count() as f64 / self.accepts.len() as f64
    }

    /// Total density evaluations billed to this chain's target, counting
    /// potential and gradient evaluations at equal weight.
    pub fn target_evals(&self) -> usize {
        self.grad_evals + self.potential_evals
    }
}

/// Traces of one coupled group: the primary chain X (or X⁺), plus
/// whichever partners the mode produces.
#[derive(Debug, Clone)]
pub struct CoupledTraces {
    pub primary: ChainTrace,
    /// X⁻: same target, negated noise.
    pub antithetic: Option<ChainTrace>,
    /// Y⁺: surrogate target, shared noise.
    pub control: Option<ChainTrace>,
    /// Y⁻ = 2μ − Y⁺, materialized by reflection.
    pub reflected_control: Option<ChainTrace>,
    pub seed: u64,
    /// Symmetry center μ used for reflections.
    pub center: Array1<f64>,
}

impl CoupledTraces {
    /// Member chains in a fixed order with their conventional ids.
    pub fn chains(&self) -> Vec<(&'static str, &ChainTrace)> {
        let mut out = vec![("x+", &self.primary)];
        if let Some(t) = &self.antithetic {
            out.push(("x-", t));
        }
        if let Some(t) = &self.control {
            out.push(("y+", t));
        }
        if let Some(t) = &self.reflected_control {
            out.push(("y-", t));
        }
        out
    }

    /// Columnar CSV of all member chains: one row per (step, chain) with
    /// the coordinate values and the accept flag.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let dim = self.primary.dim();
        let mut out = String::from("step,chain");
        for d in 0..dim {
            write!(out, ",x{d}").expect("string write");
        }
        out.push_str(",accept\n");
        for (id, trace) in self.chains() {
            for i in 0..trace.len() {
                write!(out, "{i},{id}").expect("string write");
                for d in 0..dim {
                    write!(out, ",{}", trace.samples[[i, d]]).expect("string write");
                }
                writeln!(out, ",{}", trace.accepts[i] as u8).expect("string write");
            }
        }
        out
    }

    /// Compact little-endian binary summary. Layout:
    /// magic `MCVR`, u32 version (1), u64 seed, u32 chain count,
    /// u32 dimension, u32 steps; then per chain: 2-byte id, acceptance
    /// rate (f64), u64 gradient and potential evaluation counts, and the
    /// per-component sample means and variances (f64 each).
    pub fn to_binary_summary(&self) -> Vec<u8> {
        let chains = self.chains();
        let dim = self.primary.dim() as u32;
        let steps = self.primary.len() as u32;
        let mut out = Vec::new();
        out.extend_from_slice(b"MCVR");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(chains.len() as u32).to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&steps.to_le_bytes());
        for (id, trace) in chains {
            let mut tag = [b' '; 2];
            tag.copy_from_slice(id.as_bytes());
            out.extend_from_slice(&tag);
            out.extend_from_slice(&trace.acceptance_rate().to_le_bytes());
            out.extend_from_slice(&(trace.grad_evals as u64).to_le_bytes());
            out.extend_from_slice(&(trace.potential_evals as u64).to_le_bytes());
            let n = trace.len() as f64;
            for d in 0..trace.dim() {
                let col = trace.samples.column(d);
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                out.extend_from_slice(&mean.to_le_bytes());
                out.extend_from_slice(&var.to_le_bytes());
            }
        }
        out
    }
}

/// How a partner chain reads the shared noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    /// Same momenta / proposal noise and the same accept uniforms.
    Shared,
    /// Negated momenta (HMC) or proposal noise (MALA/RWM); accept
    /// uniforms stay shared.
    Antithetic,
}

/// Per-step outcome of a single kernel transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next: Array1<f64>,
    pub accepted: bool,
    pub divergent: bool,
    pub log_accept_ratio: f64,
    pub grad_evals: usize,
    pub potential_evals: usize,
}

struct ChainState {
    position: Array1<f64>,
    potential: f64,
    grad: Option<Array1<f64>>,
}

impl ChainState {
    fn init(
        target: &dyn TargetDensity,
        x0: ArrayView1<f64>,
        kind: &KernelKind,
    ) -> Result<(Self, usize, usize)> {
        if x0.len() != target.dim() {
            return Err(Error::DimensionMismatch {
                expected: target.dim(),
                got: x0.len(),
            });
        }
        let potential = target.potential(x0);
        if !potential.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                what: "potential at the initial state".into(),
            });
        }
        let (grad, grad_evals) = if kind.needs_gradient() {
            (Some(target.grad_potential(x0)), 1)
        } else {
            (None, 0)
        };
        Ok((
            ChainState {
                position: x0.to_owned(),
                potential,
                grad,
            },
            grad_evals,
            1,
        ))
    }

    fn as_evaluated(&self) -> Evaluated {
        Evaluated {
            position: self.position.clone(),
            potential: self.potential,
            grad: self.grad.clone().expect("gradient-based kernel state"),
        }
    }
}

/// Advances one chain by one transition. `negate` flips the sign of the
/// momentum / proposal noise (the antithetic convention); the accept
/// uniform is used as-is either way.
fn transition(
    target: &dyn TargetDensity,
    state: &ChainState,
    noise: &StepNoise,
    kind: &KernelKind,
    negate: bool,
) -> (ChainState, StepOutcome) {
    match kind {
        KernelKind::Hmc(cfg) => hmc_transition(target, state, noise, cfg, negate),
        KernelKind::Mala { step_size } => mala_transition(target, state, noise, *step_size, negate),
        KernelKind::Rwm { step_size } => rwm_transition(target, state, noise, *step_size, negate),
    }
}

fn signed_momentum(noise: &StepNoise, negate: bool) -> Array1<f64> {
    if negate {
        noise.momentum.mapv(|v| -v)
    } else {
        noise.momentum.clone()
    }
}

fn rejected(
    state: &ChainState,
    grad_evals: usize,
    potential_evals: usize,
    divergent: bool,
    log_ratio: f64,
) -> (ChainState, StepOutcome) {
    (
        ChainState {
            position: state.position.clone(),
            potential: state.potential,
            grad: state.grad.clone(),
        },
        StepOutcome {
            next: state.position.clone(),
            accepted: false,
            divergent,
            log_accept_ratio: log_ratio,
            grad_evals,
            potential_evals,
        },
    )
}

fn hmc_transition(
    target: &dyn TargetDensity,
    state: &ChainState,
    noise: &StepNoise,
    cfg: &LeapfrogConfig,
    negate: bool,
) -> (ChainState, StepOutcome) {
    let p0 = signed_momentum(noise, negate);
    let h0 = state.potential + kinetic(p0.view());
    let traj = match leapfrog_cached(target, &state.as_evaluated(), p0.view(), cfg) {
        Ok(t) => t,
        Err(Error::Divergence { .. }) => {
            // Divergent trajectories count as rejections.
            return rejected(state, cfg.steps, 0, true, f64::NEG_INFINITY);
        }
        Err(_) => unreachable!("leapfrog only fails with divergence"),
    };
    let h1 = traj.end.potential + kinetic(traj.end_momentum.view());
    let log_ratio = h0 - h1;
    if mh_accepts(log_ratio, noise.accept_uniform) {
        (
            ChainState {
                position: traj.end.position.clone(),
                potential: traj.end.potential,
                grad: Some(traj.end.grad),
            },
            StepOutcome {
                next: traj.end.position,
                accepted: true,
                divergent: false,
                log_accept_ratio: log_ratio,
                grad_evals: traj.grad_evals,
                potential_evals: traj.potential_evals,
            },
        )
    } else {
        rejected(
            state,
            traj.grad_evals,
            traj.potential_evals,
            false,
            log_ratio,
        )
    }
}

fn mala_transition(
    target: &dyn TargetDensity,
    state: &ChainState,
    noise: &StepNoise,
    step_size: f64,
    negate: bool,
) -> (ChainState, StepOutcome) {
    let xi = signed_momentum(noise, negate);
    let grad = state.grad.as_ref().expect("MALA keeps a cached gradient");
    let half_eps_sq = 0.5 * step_size * step_size;
    // forward proposal x' = x − (ε²/2)∇U(x) + ε·ξ
    let mut proposal = state.position.clone();
    proposal.scaled_add(-half_eps_sq, grad);
    proposal.scaled_add(step_size, &xi);

    if proposal.iter().any(|v| !v.is_finite()) {
        return rejected(state, 0, 0, true, f64::NEG_INFINITY);
    }
    let prop_potential = target.potential(proposal.view());
    let prop_grad = target.grad_potential(proposal.view());
    if !prop_potential.is_finite() || prop_grad.iter().any(|v| !v.is_finite()) {
        return rejected(state, 1, 1, true, f64::NEG_INFINITY);
    }
    // log q(x'|x) with the shared Gaussian normalizers dropped
    let log_q_fwd = -0.5 * xi.dot(&xi);
    let mut rev_mean = proposal.clone();
    rev_mean.scaled_add(-half_eps_sq, &prop_grad);
    let rev_diff = &state.position - &rev_mean;
    let log_q_rev = -rev_diff.dot(&rev_diff) / (2.0 * step_size * step_size);
    let log_ratio = state.potential - prop_potential + log_q_rev - log_q_fwd;

    if mh_accepts(log_ratio, noise.accept_uniform) {
        (
            ChainState {
                position: proposal.clone(),
                potential: prop_potential,
                grad: Some(prop_grad),
            },
            StepOutcome {
                next: proposal,
                accepted: true,
                divergent: false,
                log_accept_ratio: log_ratio,
                grad_evals: 1,
                potential_evals: 1,
            },
        )
    } else {
        rejected(state, 1, 1, false, log_ratio)
    }
}

fn rwm_transition(
    target: &dyn TargetDensity,
    state: &ChainState,
    noise: &StepNoise,
    step_size: f64,
    negate: bool,
) -> (ChainState, StepOutcome) {
    let xi = signed_momentum(noise, negate);
    let mut proposal = state.position.clone();
    proposal.scaled_add(step_size, &xi);
    let prop_potential = target.potential(proposal.view());
    if !prop_potential.is_finite() {
        return rejected(state, 0, 1, true, f64::NEG_INFINITY);
    }
    let log_ratio = state.potential - prop_potential;
    if mh_accepts(log_ratio, noise.accept_uniform) {
        (
            ChainState {
                position: proposal.clone(),
                potential: prop_potential,
                grad: None,
            },
            StepOutcome {
                next: proposal,
                accepted: true,
                divergent: false,
                log_accept_ratio: log_ratio,
                grad_evals: 0,
                potential_evals: 1,
            },
        )
    } else {
        rejected(state, 0, 1, false, log_ratio)
    }
}

/// One Metropolis-adjusted HMC transition from `x` using the given noise.
pub fn hmc_step(
    target: &dyn TargetDensity,
    x: ArrayView1<f64>,
    noise: &StepNoise,
    cfg: &LeapfrogConfig,
) -> Result<StepOutcome> {
    single_step(target, x, noise, &KernelKind::Hmc(*cfg))
}

/// One MALA transition from `x`.
pub fn mala_step(
    target: &dyn TargetDensity,
    x: ArrayView1<f64>,
    noise: &StepNoise,
    step_size: f64,
) -> Result<StepOutcome> {
    single_step(target, x, noise, &KernelKind::Mala { step_size })
}

/// One random-walk Metropolis transition from `x`.
pub fn rwm_step(
    target: &dyn TargetDensity,
    x: ArrayView1<f64>,
    noise: &StepNoise,
    step_size: f64,
) -> Result<StepOutcome> {
    single_step(target, x, noise, &KernelKind::Rwm { step_size })
}

fn single_step(
    target: &dyn TargetDensity,
    x: ArrayView1<f64>,
    noise: &StepNoise,
    kind: &KernelKind,
) -> Result<StepOutcome> {
    let (state, init_grads, init_pots) = ChainState::init(target, x, kind)?;
    let (_, mut outcome) = transition(target, &state, noise, kind, false);
    outcome.grad_evals += init_grads;
    outcome.potential_evals += init_pots;
    Ok(outcome)
}

struct ChainRun {
    state: ChainState,
    trace: ChainTrace,
}

impl ChainRun {
    fn start(target: &dyn TargetDensity, x0: ArrayView1<f64>, cfg: &KernelConfig) -> Result<Self> {
        let (state, grads, pots) = ChainState::init(target, x0, &cfg.kernel)?;
        let mut trace = ChainTrace::with_capacity(cfg.steps, target.dim());
        trace.grad_evals += grads;
        trace.potential_evals += pots;
        Ok(ChainRun { state, trace })
    }

    fn advance(
        &mut self,
        target: &dyn TargetDensity,
        noise: &StepNoise,
        kind: &KernelKind,
        negate: bool,
        step: usize,
    ) {
        let (next_state, outcome) = transition(target, &self.state, noise, kind, negate);
        self.state = next_state;
        self.trace.samples.row_mut(step).assign(&outcome.next);
        self.trace.accepts.push(outcome.accepted);
        self.trace.log_accept_ratios.push(outcome.log_accept_ratio);
        self.trace.grad_evals += outcome.grad_evals;
        self.trace.potential_evals += outcome.potential_evals;
        if outcome.divergent {
            self.trace.divergences += 1;
        }
    }
}

/// Runs a solo chain. `negate_noise` replays the stream with flipped
/// momenta, matching the partner chain of an antithetic pair exactly.
pub fn run_chain(
    target: &dyn TargetDensity,
    x0: ArrayView1<f64>,
    cfg: &KernelConfig,
    seed: u64,
    negate_noise: bool,
) -> Result<ChainTrace> {
    let stream = NoiseStream::new(seed, target.dim());
    let mut run = ChainRun::start(target, x0, cfg)?;
    for step in 0..cfg.steps {
        let noise = stream.step_noise(step as u64);
        run.advance(target, &noise, &cfg.kernel, negate_noise, step);
    }
    Ok(run.trace)
}

/// Runs a coupled pair. Both chains consume the same [`StepNoise`] per
/// index; in `Antithetic` mode the partner sees negated momenta. The
/// partner lands in the `antithetic` slot when it targets the same
/// density with flipped noise, otherwise in the `control` slot.
pub fn run_coupled(
    target_x: &dyn TargetDensity,
    target_y: &dyn TargetDensity,
    x0: ArrayView1<f64>,
    y0: ArrayView1<f64>,
    mode: CouplingMode,
    cfg: &KernelConfig,
    seed: u64,
) -> Result<CoupledTraces> {
    if target_x.dim() != target_y.dim() {
        return Err(Error::DimensionMismatch {
            expected: target_x.dim(),
            got: target_y.dim(),
        });
    }
    let dim = target_x.dim();
    let stream = NoiseStream::new(seed, dim);
    let mut x_run = ChainRun::start(target_x, x0, cfg)?;
    let mut y_run = ChainRun::start(target_y, y0, cfg)?;
    let negate_partner = mode == CouplingMode::Antithetic;
    for step in 0..cfg.steps {
        let noise = stream.step_noise(step as u64);
        x_run.advance(target_x, &noise, &cfg.kernel, false, step);
        y_run.advance(target_y, &noise, &cfg.kernel, negate_partner, step);
    }
    let (antithetic, control) = match mode {
        CouplingMode::Antithetic => (Some(y_run.trace), None),
        CouplingMode::Shared => (None, Some(y_run.trace)),
    };
    Ok(CoupledTraces {
        primary: x_run.trace,
        antithetic,
        control,
        reflected_control: None,
        seed,
        center: target_y.known_mean().unwrap_or_else(|| Array1::zeros(dim)),
    })
}

/// Runs the four-chain combined scheme: X⁺ and X⁻ target the model with
/// momenta p and −p, Y⁺ targets the surrogate with p, and Y⁻ is the exact
/// reflection 2μ − Y⁺ about the surrogate mean. All four share the accept
/// uniforms.
pub fn run_cva(
    target: &dyn TargetDensity,
    surrogate: &Gaussian,
    x0_plus: ArrayView1<f64>,
    x0_minus: ArrayView1<f64>,
    y0_plus: ArrayView1<f64>,
    cfg: &KernelConfig,
    seed: u64,
) -> Result<CoupledTraces> {
    if target.dim() != surrogate.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: surrogate.dim(),
        });
    }
    let center = surrogate
        .known_mean()
        .ok_or_else(|| Error::Config("CVA surrogate must have a known mean".into()))?;
    let dim = target.dim();
    let stream = NoiseStream::new(seed, dim);
    let mut xp = ChainRun::start(target, x0_plus, cfg)?;
    let mut xm = ChainRun::start(target, x0_minus, cfg)?;
    let mut yp = ChainRun::start(surrogate, y0_plus, cfg)?;
    for step in 0..cfg.steps {
        let noise = stream.step_noise(step as u64);
        xp.advance(target, &noise, &cfg.kernel, false, step);
        xm.advance(target, &noise, &cfg.kernel, true, step);
        yp.advance(surrogate, &noise, &cfg.kernel, false, step);
    }
    // Y⁻ mirrors Y⁺; it costs no density evaluations of its own.
    let mut ym_samples = Array2::<f64>::zeros((cfg.steps, dim));
    for step in 0..cfg.steps {
        for d in 0..dim {
            ym_samples[[step, d]] = 2.0 * center[d] - yp.trace.samples[[step, d]];
        }
    }
    let ym = ChainTrace {
        samples: ym_samples,
        accepts: yp.trace.accepts.clone(),
        log_accept_ratios: yp.trace.log_accept_ratios.clone(),
        grad_evals: 0,
        potential_evals: 0,
        divergences: yp.trace.divergences,
    };
    Ok(CoupledTraces {
        primary: xp.trace,
        antithetic: Some(xm.trace),
        control: Some(yp.trace),
        reflected_control: Some(ym),
        seed,
        center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Draws;
    use crate::targets::Gaussian;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn hmc_cfg(eps: f64, steps: usize, n: usize) -> KernelConfig {
        KernelConfig::new(
            KernelKind::Hmc(LeapfrogConfig::new(eps, steps).unwrap()),
            n,
            0,
        )
        .unwrap()
    }

    #[test]
    fn mh_adjust_threshold_cases() {
        let q0 = array![0.0];
        let q1 = array![1.0];
        // b = 0 accepts regardless of energies
        let (state, acc) = mh_adjust(q0.view(), q1.view(), 0.0, 100.0, 0.0);
        assert!(acc && state == q1);
        // equal energies accept for every b < 1
        let (_, acc) = mh_adjust(q0.view(), q1.view(), 2.0, 2.0, 0.999_999);
        assert!(acc);
        // h0=1, h1=2, b=0.5: threshold e^{-1} ≈ 0.3679 < 0.5 → reject
        let (state, acc) = mh_adjust(q0.view(), q1.view(), 1.0, 2.0, 0.5);
        assert!(!acc && state == q0);
        // divergent proposal always rejects
        let (_, acc) = mh_adjust(q0.view(), q1.view(), 1.0, f64::NAN, 0.0);
        assert!(!acc);
        let (_, acc) = mh_adjust(q0.view(), q1.view(), 1.0, f64::INFINITY, 0.0);
        assert!(!acc);
    }

    struct Flat(usize);
    impl TargetDensity for Flat {
        fn dim(&self) -> usize {
            self.0
        }
        fn potential(&self, _x: ArrayView1<f64>) -> f64 {
            0.0
        }
        fn grad_potential(&self, x: ArrayView1<f64>) -> Array1<f64> {
            Array1::zeros(x.len())
        }
    }

    #[test]
    fn flat_potential_hmc_always_accepts_and_translates() {
        let target = Flat(2);
        let cfg = LeapfrogConfig::new(0.5, 4).unwrap();
        let stream = NoiseStream::new(3, 2);
        let noise = stream.step_noise(0);
        let x = array![1.0, -1.0];
        let out = hmc_step(&target, x.view(), &noise, &cfg).unwrap();
        assert!(out.accepted);
        assert_eq!(out.log_accept_ratio, 0.0);
        let t = cfg.trajectory_length();
        for d in 0..2 {
            assert_abs_diff_eq!(out.next[d], x[d] + t * noise.momentum[d], epsilon = 1e-12);
        }
    }

    #[test]
    fn hmc_step_is_bit_deterministic() {
        let target = Gaussian::standard(3);
        let cfg = LeapfrogConfig::new(0.3, 5).unwrap();
        let noise = NoiseStream::new(11, 3).step_noise(4);
        let x = array![0.5, -0.5, 1.5];
        let a = hmc_step(&target, x.view(), &noise, &cfg).unwrap();
        let b = hmc_step(&target, x.view(), &noise, &cfg).unwrap();
        assert_eq!(a.next, b.next);
        assert_eq!(a.accepted, b.accepted);
        assert_eq!(a.log_accept_ratio.to_bits(), b.log_accept_ratio.to_bits());
    }

    #[test]
    fn hmc_long_run_mean_near_zero() {
        let target = Gaussian::standard(2);
        let cfg = hmc_cfg(0.6, 4, 20_000);
        let trace = run_chain(&target, array![2.0, -2.0].view(), &cfg, 42, false).unwrap();
        let post = trace.post_burn_in(1000);
        for d in 0..2 {
            let mean = post.column(d).mean().unwrap();
            // generous 3-sigma band given autocorrelation
            assert!(mean.abs() < 0.1, "component {d} mean {mean}");
        }
    }

    #[test]
    fn hmc_acceptance_decreases_with_step_size() {
        let target = Gaussian::standard(25);
        let t_total = 1.2f64;
        let mut rates = Vec::new();
        for eps in [0.05f64, 0.4, 1.2] {
            let steps = (t_total / eps).round().max(1.0) as usize;
            let cfg = hmc_cfg(eps, steps, 2000);
            let x0 = Array1::zeros(25);
            let trace = run_chain(&target, x0.view(), &cfg, 5, false).unwrap();
            rates.push(trace.acceptance_rate());
        }
        assert!(
            rates[0] > rates[1] && rates[1] > rates[2],
            "acceptance not monotone: {rates:?}"
        );
    }

    #[test]
    fn mala_small_step_accepts_nearly_always() {
        let target = Gaussian::standard(2);
        let cfg = KernelConfig::new(KernelKind::Mala { step_size: 1e-3 }, 2000, 0).unwrap();
        let trace = run_chain(&target, array![0.3, 0.3].view(), &cfg, 9, false).unwrap();
        assert!(
            trace.acceptance_rate() >= 0.999,
            "rate {}",
            trace.acceptance_rate()
        );
    }

    #[test]
    fn mala_recovers_shifted_mean() {
        let target = Gaussian::from_mean_cov(array![3.0], array![[1.0]].view()).unwrap();
        let cfg = KernelConfig::new(KernelKind::Mala { step_size: 0.9 }, 40_000, 0).unwrap();
        let trace = run_chain(&target, array![0.0].view(), &cfg, 21, false).unwrap();
        let mean = trace.post_burn_in(2000).column(0).mean().unwrap();
        assert!((mean - 3.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn mala_zero_noise_zero_grad_is_identity_accept() {
        let target = Flat(2);
        let noise = StepNoise {
            momentum: Array1::zeros(2),
            accept_uniform: 0.7,
        };
        let x = array![1.0, 2.0];
        let out = mala_step(&target, x.view(), &noise, 0.5).unwrap();
        assert!(out.accepted);
        assert_eq!(out.next, x);
    }

    #[test]
    fn rwm_downhill_proposals_always_accept() {
        let target = Gaussian::standard(1);
        // noise pointing toward the mode from x = 2
        let noise = StepNoise {
            momentum: array![-1.0],
            accept_uniform: 0.999_999,
        };
        let out = rwm_step(&target, array![2.0].view(), &noise, 0.5).unwrap();
        assert!(out.accepted, "downhill move must accept");
    }

    #[test]
    fn rwm_zero_step_size_is_constant_chain() {
        let target = Gaussian::standard(2);
        let cfg = KernelConfig::new(KernelKind::Rwm { step_size: 0.0 }, 50, 0).unwrap();
        let trace = run_chain(&target, array![1.0, 1.0].view(), &cfg, 2, false).unwrap();
        assert!(trace.accepts.iter().all(|&a| a));
        for i in 0..trace.len() {
            assert_eq!(trace.samples[[i, 0]], 1.0);
            assert_eq!(trace.samples[[i, 1]], 1.0);
        }
    }

    #[test]
    fn rwm_long_run_variance_matches_target() {
        let target = Gaussian::from_mean_cov(array![0.0], array![[4.0]].view()).unwrap();
        let cfg = KernelConfig::new(KernelKind::Rwm { step_size: 2.0 }, 60_000, 0).unwrap();
        let trace = run_chain(&target, array![0.0].view(), &cfg, 13, false).unwrap();
        let post = trace.post_burn_in(5000);
        let mean = post.column(0).mean().unwrap();
        let var = post.column(0).mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!((var - 4.0).abs() / 4.0 < 0.1, "variance {var}");
    }

    #[test]
    fn coupled_primary_matches_solo_bitwise() {
        let target = Gaussian::standard(3);
        let surrogate =
            Gaussian::from_mean_cov(array![0.2, 0.0, -0.1], (Array2::eye(3) * 1.1).view()).unwrap();
        let cfg = hmc_cfg(0.4, 5, 200);
        let x0 = array![1.0, 0.0, -1.0];
        let y0 = array![0.0, 0.0, 0.0];
        for mode in [CouplingMode::Shared, CouplingMode::Antithetic] {
            let coupled =
                run_coupled(&target, &surrogate, x0.view(), y0.view(), mode, &cfg, 77).unwrap();
            let solo = run_chain(&target, x0.view(), &cfg, 77, false).unwrap();
            assert_eq!(coupled.primary.samples, solo.samples);
            assert_eq!(coupled.primary.accepts, solo.accepts);
            // the partner equals a solo run with the same seed and the
            // mode's noise sign
            let negate = mode == CouplingMode::Antithetic;
            let solo_partner = run_chain(&surrogate, y0.view(), &cfg, 77, negate).unwrap();
            let partner = match mode {
                CouplingMode::Shared => coupled.control.as_ref().unwrap(),
                CouplingMode::Antithetic => coupled.antithetic.as_ref().unwrap(),
            };
            assert_eq!(partner.samples, solo_partner.samples);
        }
    }

    #[test]
    fn shared_coupling_contracts_on_gaussian() {
        let target = Gaussian::standard(4);
        let cfg = hmc_cfg(0.35, 4, 150);
        let x0 = array![4.0, -4.0, 4.0, -4.0];
        let y0 = array![-4.0, 4.0, -4.0, 4.0];
        let coupled = run_coupled(
            &target,
            &target,
            x0.view(),
            y0.view(),
            CouplingMode::Shared,
            &cfg,
            19,
        )
        .unwrap();
        let y = coupled.control.as_ref().unwrap();
        let d0: f64 = (0..4)
            .map(|d| (coupled.primary.samples[[0, d]] - y.samples[[0, d]]).powi(2))
            .sum::<f64>()
            .sqrt();
        let dn: f64 = (0..4)
            .map(|d| (coupled.primary.samples[[149, d]] - y.samples[[149, d]]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dn < 1e-8 * d0, "distance failed to contract: {d0} → {dn}");
    }

    #[test]
    fn antithetic_pair_sums_vanish_on_symmetric_gaussian() {
        let target = Gaussian::standard(3);
        let cfg = hmc_cfg(0.45, 4, 250);
        let x0 = array![2.0, 1.0, -1.5];
        let y0 = array![1.0, -2.0, 0.5];
        let coupled = run_coupled(
            &target,
            &target,
            x0.view(),
            y0.view(),
            CouplingMode::Antithetic,
            &cfg,
            23,
        )
        .unwrap();
        let xm = coupled.antithetic.as_ref().unwrap();
        let last = cfg.steps - 1;
        let sum_norm: f64 = (0..3)
            .map(|d| (coupled.primary.samples[[last, d]] + xm.samples[[last, d]]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(sum_norm < 1e-6, "‖X_n + Y_n‖ = {sum_norm}");
    }

    #[test]
    fn cva_reflection_is_exact_and_costs_nothing() {
        let target = Gaussian::standard(2);
        let surrogate = Gaussian::standard(2);
        let cfg = hmc_cfg(0.4, 3, 50);
        let mut draws = Draws::new(1, 2);
        let x0p = draws.standard_normal_vec(2);
        let x0m = draws.standard_normal_vec(2);
        let y0p = draws.standard_normal_vec(2);
        let out = run_cva(
            &target,
            &surrogate,
            x0p.view(),
            x0m.view(),
            y0p.view(),
            &cfg,
            31,
        )
        .unwrap();
        let yp = out.control.as_ref().unwrap();
        let ym = out.reflected_control.as_ref().unwrap();
        for i in 0..cfg.steps {
            for d in 0..2 {
                // center is zero, so the sum must vanish exactly
                assert_eq!(yp.samples[[i, d]] + ym.samples[[i, d]], 0.0);
            }
        }
        assert_eq!(ym.grad_evals, 0);
        assert_eq!(ym.potential_evals, 0);
    }

    #[test]
    fn cva_perfect_surrogate_couples_bit_for_bit() {
        let target = Gaussian::standard(2);
        let surrogate = Gaussian::standard(2);
        let cfg = hmc_cfg(0.5, 4, 80);
        let x0 = array![0.7, -0.3];
        let out = run_cva(
            &target,
            &surrogate,
            x0.view(),
            x0.view(),
            x0.view(),
            &cfg,
            8,
        )
        .unwrap();
        let yp = out.control.as_ref().unwrap();
        assert_eq!(out.primary.samples, yp.samples);
        assert_eq!(out.primary.accepts, yp.accepts);
    }

    #[test]
    fn cva_gradient_accounting_splits_by_hamiltonian() {
        let target = Gaussian::standard(2);
        let surrogate = Gaussian::standard(2);
        let leapfrog_steps = 6;
        let n = 40;
        let cfg = hmc_cfg(0.3, leapfrog_steps, n);
        let x0 = array![1.0, 1.0];
        let out = run_cva(
            &target,
            &surrogate,
            x0.view(),
            x0.view(),
            x0.view(),
            &cfg,
            4,
        )
        .unwrap();
        // steady state: L fresh gradients per step per chain, plus the one
        // boundary evaluation at initialization
        let expected = n * leapfrog_steps + 1;
        assert_eq!(out.primary.grad_evals, expected);
        assert_eq!(out.antithetic.as_ref().unwrap().grad_evals, expected);
        assert_eq!(out.control.as_ref().unwrap().grad_evals, expected);
        let per_step_target =
            (out.primary.grad_evals - 1 + out.antithetic.as_ref().unwrap().grad_evals - 1) / n;
        let per_step_surrogate = (out.control.as_ref().unwrap().grad_evals - 1) / n;
        assert_eq!(per_step_target, 2 * leapfrog_steps);
        assert_eq!(per_step_surrogate, leapfrog_steps);
    }

    #[test]
    fn decoupling_only_at_disagreeing_accepts() {
        // once the chains have coupled, distance can only reappear at a
        // step whose accept flags disagree
        let target = Gaussian::standard(2);
        let surrogate =
            Gaussian::from_mean_cov(array![0.5, -0.5], (Array2::eye(2) * 1.2).view()).unwrap();
        let cfg = hmc_cfg(0.9, 2, 3000);
        let out = run_coupled(
            &target,
            &surrogate,
            array![0.0, 0.0].view(),
            array![0.5, -0.5].view(),
            CouplingMode::Shared,
            &cfg,
            3,
        )
        .unwrap();
        let y = out.control.as_ref().unwrap();
        for i in 0..cfg.steps - 1 {
            let both_reject = !out.primary.accepts[i + 1] && !y.accepts[i + 1];
            if both_reject {
                for d in 0..2 {
                    let dx = out.primary.samples[[i + 1, d]] - out.primary.samples[[i, d]];
                    let dy = y.samples[[i + 1, d]] - y.samples[[i, d]];
                    assert_eq!(dx, 0.0);
                    assert_eq!(dy, 0.0);
                }
            }
        }
        // sanity: some disagreements happened in this configuration
        let disagreements = (0..cfg.steps)
            .filter(|&i| out.primary.accepts[i] != y.accepts[i])
            .count();
        assert!(
            disagreements > 0,
            "test configuration produced no decoupling events"
        );
    }

    #[test]
    fn shared_uniforms_correlate_rejections() {
        let target = Gaussian::standard(2);
        let cfg = hmc_cfg(1.35, 1, 6000);
        let out = run_coupled(
            &target,
            &target,
            array![1.5, 0.0].view(),
            array![-1.5, 0.5].view(),
            CouplingMode::Shared,
            &cfg,
            17,
        )
        .unwrap();
        let y = out.control.as_ref().unwrap();
        let n = cfg.steps as f64;
        let rx = out.primary.accepts.iter().filter(|&&a| !a).count() as f64 / n;
        let ry = y.accepts.iter().filter(|&&a| !a).count() as f64 / n;
        let joint = (0..cfg.steps)
            .filter(|&i| !out.primary.accepts[i] && !y.accepts[i])
            .count() as f64
            / n;
        assert!(rx > 0.05 && rx < 0.95, "rejection rate {rx} degenerate");
        assert!(
            joint > rx * ry,
            "joint rejection {joint} not above product {}",
            rx * ry
        );
    }

    #[test]
    fn burn_in_must_be_smaller_than_steps() {
        assert!(KernelConfig::new(KernelKind::Rwm { step_size: 1.0 }, 10, 10).is_err());
        assert!(KernelConfig::new(KernelKind::Rwm { step_size: 1.0 }, 10, 9).is_ok());
    }

    #[test]
    fn trace_serialization_round_trips_the_layout() {
        let target = Gaussian::standard(2);
        let surrogate = Gaussian::standard(2);
        let cfg = hmc_cfg(0.4, 3, 5);
        let x0 = array![0.5, -0.5];
        let out = run_cva(
            &target,
            &surrogate,
            x0.view(),
            x0.view(),
            x0.view(),
            &cfg,
            77,
        )
        .unwrap();

        let csv = out.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,chain,x0,x1,accept");
        // 4 chains × 5 steps of rows
        assert_eq!(csv.lines().count(), 1 + 4 * 5);
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,x+,"));
        assert!(first.ends_with(",0") || first.ends_with(",1"));

        let bin = out.to_binary_summary();
        assert_eq!(&bin[0..4], b"MCVR");
        let chain_count = u32::from_le_bytes(bin[16..20].try_into().unwrap());
        let dim = u32::from_le_bytes(bin[20..24].try_into().unwrap());
        let steps = u32::from_le_bytes(bin[24..28].try_into().unwrap());
        assert_eq!((chain_count, dim, steps), (4, 2, 5));
        // header 28 bytes + per chain: 2 id + 8 accept + 16 counts + dim·16 moments
        assert_eq!(bin.len(), 28 + 4 * (2 + 8 + 16 + 2 * 16));
    }
}
