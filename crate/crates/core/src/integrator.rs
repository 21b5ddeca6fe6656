//! Leapfrog integration of Hamiltonian dynamics with the identity mass
//! matrix, H(q, p) = ½‖p‖² + U(q).

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::targets::TargetDensity;

/// Position/momentum pair.
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub position: Array1<f64>,
    pub momentum: Array1<f64>,
}

impl PhaseState {
    pub fn new(position: Array1<f64>, momentum: Array1<f64>) -> Self {
        assert_eq!(
            position.len(),
            momentum.len(),
            "position and momentum must have equal lengths"
        );
        PhaseState { position, momentum }
    }
}

/// Step size and step count; the trajectory length T = ε·L is what the
/// tuning studies hold constant.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LeapfrogConfig {
    pub step_size: f64,
    pub steps: usize,
}

impl LeapfrogConfig {
    pub fn new(step_size: f64, steps: usize) -> Result<Self> {
        if step_size <= 0.0 || !step_size.is_finite() {
            return Err(Error::Config(format!(
                "step size must be positive, got {step_size}"
            )));
        }
        if steps == 0 {
            return Err(Error::Config(
                "leapfrog step count must be at least 1".into(),
            ));
        }
        Ok(LeapfrogConfig { step_size, steps })
    }

    pub fn trajectory_length(&self) -> f64 {
        self.step_size * self.steps as f64
    }
}

/// A position with its cached potential and gradient, letting callers
/// reuse the boundary evaluation across Metropolis transitions.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub position: Array1<f64>,
    pub potential: f64,
    pub grad: Array1<f64>,
}

impl Evaluated {
    pub fn at(target: &dyn TargetDensity, position: Array1<f64>) -> Self {
        let potential = target.potential(position.view());
        let grad = target.grad_potential(position.view());
        Evaluated {
            position,
            potential,
            grad,
        }
    }
}

/// Result of one trajectory: the evaluated endpoint, the final momentum,
/// and how many fresh gradient evaluations were made.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub end: Evaluated,
    pub end_momentum: Array1<f64>,
    pub grad_evals: usize,
    pub potential_evals: usize,
}

/// L kick-drift-kick leapfrog steps of size ε, reusing the caller's
/// gradient at the start point. Interior half-kicks are fused, so the
/// trajectory performs exactly L fresh gradient evaluations (L+1 counting
/// the boundary one the caller supplied).
///
/// Any non-finite position, momentum, or endpoint potential aborts with
/// [`Error::Divergence`]; callers treat that as a rejection.
pub fn leapfrog_cached(
    target: &dyn TargetDensity,
    start: &Evaluated,
    momentum: ArrayView1<f64>,
    cfg: &LeapfrogConfig,
) -> Result<Trajectory> {
    let eps = cfg.step_size;
    let mut q = start.position.clone();
    let mut p = momentum.to_owned();
    let mut grad = start.grad.clone();
    let mut grad_evals = 0;

    // first half-kick
    p.scaled_add(-0.5 * eps, &grad);
    for step in 0..cfg.steps {
        q.scaled_add(eps, &p);
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        grad = target.grad_potential(q.view());
        grad_evals += 1;
        let kick = if step + 1 == cfg.steps {
            0.5 * eps
        } else {
            eps
        };
        p.scaled_add(-kick, &grad);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
    }
    let potential = target.potential(q.view());
    if !potential.is_finite() {
        return Err(Error::Divergence { step: cfg.steps });
    }
    Ok(Trajectory {
        end: Evaluated {
            position: q,
            potential,
            grad,
        },
        end_momentum: p,
        grad_evals,
        potential_evals: 1,
    })
}

/// Standalone leapfrog over L steps; evaluates the boundary gradient
/// itself, for a total of L+1 gradient evaluations.
pub fn leapfrog(
    target: &dyn TargetDensity,
    state: &PhaseState,
    cfg: &LeapfrogConfig,
) -> Result<(PhaseState, usize)> {
    let start = Evaluated::at(target, state.position.clone());
    let traj = leapfrog_cached(target, &start, state.momentum.view(), cfg)?;
    Ok((
        PhaseState::new(traj.end.position, traj.end_momentum),
        traj.grad_evals + 1,
    ))
}

/// H(q, p) = ½‖p‖² + U(q).
pub fn hamiltonian(target: &dyn TargetDensity, state: &PhaseState) -> f64 {
    kinetic(state.momentum.view()) + target.potential(state.position.view())
}

pub(crate) fn kinetic(p: ArrayView1<f64>) -> f64 {
    0.5 * p.dot(&p)
}
