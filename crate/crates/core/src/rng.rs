//! Deterministic, replayable randomness.
//!
//! Coupled chains must consume bit-identical noise at every transition
//! regardless of evaluation order, so all randomness is counter-based:
//! a [`NoiseStream`] is keyed on a 64-bit seed, the transition index
//! selects a ChaCha8 stream, and draws within a transition consume
//! consecutive words of that stream. Noise for step `i` is therefore
//! computable without generating steps `0..i-1`.
//!
//! Conventions, fixed across releases:
//! - raw uniforms map a `u64` to `[0, 1)` via `(x >> 11) * 2^-53`;
//! - standard normals use Box-Muller on consecutive uniform pairs
//!   `(u1, u2)`: `r = sqrt(-2 ln(1 - u1))`, `theta = 2 pi u2`,
//!   producing `r cos(theta)` then `r sin(theta)`;
//! - a momentum vector of dimension D consumes `ceil(D/2)` pairs, the
//!   spare normal of an odd-D pair is discarded;
//! - the accept uniform is the next word after the momentum draws.

use ndarray::Array1;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derives an independent sub-seed for a named purpose (chain groups,
/// VI fitting, data synthesis, ...). SplitMix64 finalizer.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn uniform_from_bits(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A deterministic scalar draw sequence for one (seed, stream) pair.
///
/// Each `standard_normal` call consumes one Box-Muller pair (two words)
/// and discards the second normal, so draw positions depend only on the
/// call sequence, never on cached state.
pub struct Draws {
    rng: ChaCha8Rng,
}

impl Draws {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Draws { rng }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        uniform_from_bits(self.rng.next_u64())
    }

    /// Single standard normal (consumes two words).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        box_muller(u1, u2).0
    }

    /// Standard normal vector of length `d`, consuming `ceil(d/2)` pairs.
    pub fn standard_normal_vec(&mut self, d: usize) -> Array1<f64> {
        let mut out = Array1::<f64>::zeros(d);
        let mut i = 0;
        while i < d {
            let (z0, z1) = box_muller(self.uniform(), self.uniform());
            out[i] = z0;
            if i + 1 < d {
                out[i + 1] = z1;
            }
            i += 2;
        }
        out
    }

    /// Uniform integer in [0, n) by rejection-free modular scaling on 64 bits.
    /// Bias is at most n / 2^64, negligible for the index ranges used here.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.rng.next_u64() % n as u64) as usize
    }
}

fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    // 1 - u1 is in (0, 1], so the log is finite.
    let r = (-2.0 * (1.0 - u1).ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Per-transition noise: the momentum (or proposal) vector and the
/// Metropolis accept uniform. Both coupled chains at index `i` read the
/// same value.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub momentum: Array1<f64>,
    pub accept_uniform: f64,
}

/// Counter-based noise source for one chain group.
///
/// Immutable after construction; `step_noise` is a pure function of
/// `(seed, index, dim)` and may be called from any thread in any order.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    dim: usize,
}

impl NoiseStream {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 1, "noise stream dimension must be positive");
        NoiseStream { seed, dim }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The i-th (momentum, uniform) pair. Replaying a stream yields
    /// bit-identical values.
    pub fn step_noise(&self, index: u64) -> StepNoise {
        let mut draws = Draws::new(self.seed, index);
        let momentum = draws.standard_normal_vec(self.dim);
        let accept_uniform = draws.uniform();
        StepNoise {
            momentum,
            accept_uniform,
        }
    }
}
