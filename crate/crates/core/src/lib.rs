//! Numerical machinery for two-player absorbing positive recursive
//! stochastic games.
//!
//! The crate is organized around the Markov chain induced by a pair of
//! stationary strategies. On top of that chain it provides:
//!
//! - [`game`] — game definition, validation, and chain induction.
//! - [`chain`] — the taboo-probability calculus: escape probabilities,
//!   the strategy metric, absorption rates, part statistics, harmonic
//!   payoffs, and the one-stage-deviation bound for row replacements.
//! - [`transforms`] — chain surgeries: frequency removal, relative
//!   perturbations, block extension/contraction, exit statistics,
//!   single-row replacement, and polarization.
//! - [`zerosum`] — matrix games, discounted values by value iteration,
//!   and the jump functions/correspondences they induce.
//! - [`aux_eval`] — the state-specific discounted evaluation of Player
//!   Two: thresholded absorption rates, ordering weights, and the xi
//!   values in closed form with a Monte-Carlo cross-check.
//! - [`fixed_point`] — best-reply correspondences and a damped search
//!   for approximate fixed points, with diagnostics.
//! - [`verifier`] — equilibrium certification: exact best-response
//!   values, certificate checks, test-and-punish simulation, and the
//!   two-layer martingale bound.
//! - [`cli`] — file formats and command dispatch for the `absorb-eq`
//!   binary.

pub mod aux_eval;
pub mod chain;
pub mod cli;
pub mod error;
pub mod fixed_point;
pub mod fixtures;
pub mod game;
pub mod transforms;
pub mod verifier;
pub mod zerosum;

pub use chain::{Chain, ChainAnalysis, Part, PartLabel};
pub use error::Error;
pub use game::{GameSpec, StrategyProfile, ValidationReport};

/// Tolerance accepted for a probability row sum before renormalization.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Tolerance used by the analytic identity checks.
pub const IDENTITY_TOL: f64 = 1e-9;

/// Tie tolerance for argmax sets.
pub const TIE_TOL: f64 = 1e-9;

/// The smallest positive factor bound by which two non-negative
/// quantities `a` and `b` differ: `a >= b(1-f)` and `b >= a(1-f)`.
///
/// Returns 0 when both are zero and 1 when exactly one is zero.
pub fn factor_diff(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    if a <= 0.0 || b <= 0.0 {
        return 1.0;
    }
    (1.0 - a / b).max(1.0 - b / a).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::factor_diff;

    #[test]
    fn factor_diff_edges() {
        assert_eq!(factor_diff(0.0, 0.0), 0.0);
        assert_eq!(factor_diff(0.0, 0.3), 1.0);
        assert_eq!(factor_diff(2.0, 2.0), 0.0);
        let f = factor_diff(1.0, 0.8);
        assert!((f - 0.2).abs() < 1e-12, "f = {f}");
        assert_eq!(factor_diff(0.8, 1.0), f);
    }
}
