//! Learning binary Markov random fields from Glauber dynamics.
//!
//! A Markov random field on `{-1, 1}^n` is described by a multilinear
//! Hamiltonian `psi`, with `mu(x) ∝ exp(psi(x))`. This crate provides:
//!
//! - [`poly`]: sparse multilinear polynomials, derivatives, and model validation
//!   against the `(k, d, alpha, lambda)` bounds.
//! - [`gibbs`]: an exact Gibbs oracle for small `n`, local-test laws, and
//!   numerical checks used to cross-validate the learners.
//! - [`dynamics`]: continuous- and discrete-time Glauber simulators and the
//!   [`Trajectory`](dynamics::Trajectory) type with its text and binary formats.
//! - [`structure`]: the stopping-time statistic and dependency-graph recovery,
//!   in both the theory-parameterised and the block-heuristic forms.
//! - [`params`]: node-wise `l1`-constrained logistic regression for recovering
//!   coefficients once the graph is known.
//! - [`sparsitron`]: the i.i.d. multiplicative-weights baseline.
//! - [`harness`]: instance generation, benchmarks and the verification battery.

pub mod dynamics;
pub mod gibbs;
pub mod harness;
pub mod params;
pub mod poly;
pub mod rng;
pub mod sparsitron;
pub mod stats;
pub mod structure;

pub use dynamics::{Mode, Trajectory, UpdateEvent};
pub use poly::{ModelBounds, MrfModel, MultilinearPolynomial, Spin};

/// Logistic sigmoid `1 / (1 + exp(-z))`, evaluated without overflow for large `|z|`.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
