//! Two-player absorbing positive recursive stochastic games.
//!
//! A game has a finite ordered state space split into absorbing and
//! non-absorbing states. Payoffs accrue only at absorption: Player One
//! receives `r1` in `[-1/2, 1/2]` and Player Two receives `r2` in
//! `[omega, 1]` with `omega > 0`. Each non-absorbing state carries
//! finite action sets for both players and a transition kernel indexed
//! by action pairs; absorbing states self-loop under a single pair.

use crate::chain::{Chain, Part, PartLabel};
use crate::error::{Error, Result};
use crate::ROW_SUM_TOL;

/// Payoffs attached to an absorbing state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsorbingPayoff {
    /// Player One's payoff, in `[-1/2, 1/2]`.
    pub r1: f64,
    /// Player Two's payoff, in `[omega, 1]`.
    pub r2: f64,
}

/// A single state of the game.
#[derive(Debug, Clone, PartialEq)]
pub enum StateKind {
    /// Terminal state with its payoff pair.
    Absorbing(AbsorbingPayoff),
    /// Interior state with named action lists for both players.
    NonAbsorbing {
        p1_actions: Vec<String>,
        p2_actions: Vec<String>,
    },
}

/// A state together with its display name.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub name: String,
    pub kind: StateKind,
}

impl State {
    pub fn is_absorbing(&self) -> bool {
        matches!(self.kind, StateKind::Absorbing(_))
    }
}

/// A two-player absorbing positive recursive stochastic game.
///
/// Transition rows accepted within [`ROW_SUM_TOL`] of stochastic are
/// renormalized exactly on construction so that file-format round
/// trips do not accumulate drift; rows further from stochastic are
/// kept as-is and reported by [`validate_game`].
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    states: Vec<State>,
    /// `transition[s][a][b][t]`, with a single `[1][1]` table at
    /// absorbing states.
    transition: Vec<Vec<Vec<Vec<f64>>>>,
    omega: f64,
    /// Minimal non-zero transition probability (cached).
    rho: f64,
    /// Maximal per-player action count over non-absorbing states
    /// (cached).
    m: usize,
}

impl GameSpec {
    /// Builds a game, checking shapes and caching `rho` and `m`.
    ///
    /// Semantic invariants (stochastic rows, payoff ranges, self-loops)
    /// are checked by [`validate_game`], not here.
    pub fn new(
        states: Vec<State>,
        mut transition: Vec<Vec<Vec<Vec<f64>>>>,
        omega: f64,
    ) -> Result<Self> {
        let n = states.len();
        if transition.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} states but {} transition tables",
                n,
                transition.len()
            )));
        }
        for (s, st) in states.iter().enumerate() {
            let (na, nb) = match &st.kind {
                StateKind::Absorbing(_) => (1, 1),
                StateKind::NonAbsorbing {
                    p1_actions,
                    p2_actions,
                } => {
                    if p1_actions.is_empty() || p2_actions.is_empty() {
                        return Err(Error::DimensionMismatch(format!(
                            "state {} has an empty action set",
                            st.name
                        )));
                    }
                    (p1_actions.len(), p2_actions.len())
                }
            };
            if transition[s].len() != na {
                return Err(Error::DimensionMismatch(format!(
                    "state {}: expected {} rows of action tables, got {}",
                    st.name,
                    na,
                    transition[s].len()
                )));
            }
            for table in &transition[s] {
                if table.len() != nb {
                    return Err(Error::DimensionMismatch(format!(
                        "state {}: expected {} columns of action tables",
                        st.name, nb
                    )));
                }
                for row in table {
                    if row.len() != n {
                        return Err(Error::DimensionMismatch(format!(
                            "state {}: transition row of length {} (want {})",
                            st.name,
                            row.len(),
                            n
                        )));
                    }
                }
            }
        }
        // Renormalize rows that are within tolerance of stochastic.
        for tables in &mut transition {
            for table in tables {
                for row in table {
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() <= ROW_SUM_TOL && sum > 0.0 {
                        for p in row.iter_mut() {
                            *p /= sum;
                        }
                    }
                }
            }
        }
        let mut rho = f64::INFINITY;
        for tables in &transition {
            for table in tables {
                for row in table {
                    for &p in row {
                        if p > 0.0 && p < rho {
                            rho = p;
                        }
                    }
                }
            }
        }
        if !rho.is_finite() {
            rho = 1.0;
        }
        let m = states
            .iter()
            .filter_map(|st| match &st.kind {
                StateKind::NonAbsorbing {
                    p1_actions,
                    p2_actions,
                } => Some(p1_actions.len().max(p2_actions.len())),
                StateKind::Absorbing(_) => None,
            })
            .max()
            .unwrap_or(1);
        Ok(GameSpec {
            states,
            transition,
            omega,
            rho,
            m,
        })
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn state(&self, s: usize) -> &State {
        &self.states[s]
    }

    pub fn is_absorbing(&self, s: usize) -> bool {
        self.states[s].is_absorbing()
    }

    /// Indices of the non-absorbing states, in order.
    pub fn non_absorbing(&self) -> Vec<usize> {
        (0..self.states.len())
            .filter(|&s| !self.is_absorbing(s))
            .collect()
    }

    /// Indices of the absorbing states, in order.
    pub fn absorbing(&self) -> Vec<usize> {
        (0..self.states.len())
            .filter(|&s| self.is_absorbing(s))
            .collect()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Minimal non-zero transition probability.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Maximal per-player action count over non-absorbing states.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Action counts `(|A1^s|, |A2^s|)` at state `s`.
    pub fn action_counts(&self, s: usize) -> (usize, usize) {
        match &self.states[s].kind {
            StateKind::Absorbing(_) => (1, 1),
            StateKind::NonAbsorbing {
                p1_actions,
                p2_actions,
            } => (p1_actions.len(), p2_actions.len()),
        }
    }

    /// The absorbing payoff of player `k` (1 or 2) at state `s`, or 0
    /// for non-absorbing states.
    pub fn payoff(&self, k: usize, s: usize) -> f64 {
        match &self.states[s].kind {
            StateKind::Absorbing(p) => {
                if k == 1 {
                    p.r1
                } else {
                    p.r2
                }
            }
            StateKind::NonAbsorbing { .. } => 0.0,
        }
    }

    /// Boundary vector of player `k` payoffs, indexed by state.
    pub fn boundary(&self, k: usize) -> Vec<f64> {
        (0..self.num_states()).map(|s| self.payoff(k, s)).collect()
    }

    /// Transition row `p(. | s; a, b)`.
    pub fn row(&self, s: usize, a: usize, b: usize) -> &[f64] {
        &self.transition[s][a][b]
    }

    /// Row against a mixed Player Two action: `p(. | s; a, y^s)`.
    pub fn row_vs_y(&self, s: usize, a: usize, y_s: &[f64]) -> Vec<f64> {
        let n = self.num_states();
        let mut out = vec![0.0; n];
        for (b, &yb) in y_s.iter().enumerate() {
            if yb == 0.0 {
                continue;
            }
            for (t, &p) in self.transition[s][a][b].iter().enumerate() {
                out[t] += yb * p;
            }
        }
        out
    }

    /// Row against a mixed Player One action: `p(. | s; x^s, b)`.
    pub fn row_vs_x(&self, s: usize, x_s: &[f64], b: usize) -> Vec<f64> {
        let n = self.num_states();
        let mut out = vec![0.0; n];
        for (a, &xa) in x_s.iter().enumerate() {
            if xa == 0.0 {
                continue;
            }
            for (t, &p) in self.transition[s][a][b].iter().enumerate() {
                out[t] += xa * p;
            }
        }
        out
    }
}

/// A pair of stationary mixed strategies, one distribution per player
/// per state. Absorbing states carry the trivial `[1.0]` distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyProfile {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl StrategyProfile {
    /// Checks shape against a game and distribution validity.
    pub fn validate(&self, spec: &GameSpec) -> Result<()> {
        if self.x.len() != spec.num_states() || self.y.len() != spec.num_states() {
            return Err(Error::DimensionMismatch(format!(
                "profile covers {} / {} states, game has {}",
                self.x.len(),
                self.y.len(),
                spec.num_states()
            )));
        }
        for s in 0..spec.num_states() {
            let (na, nb) = spec.action_counts(s);
            if self.x[s].len() != na || self.y[s].len() != nb {
                return Err(Error::DimensionMismatch(format!(
                    "profile at state {} has {}x{} actions, game has {}x{}",
                    spec.state(s).name,
                    self.x[s].len(),
                    self.y[s].len(),
                    na,
                    nb
                )));
            }
            for dist in [&self.x[s], &self.y[s]] {
                let sum: f64 = dist.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "distribution at state {} sums to {}",
                        spec.state(s).name,
                        sum
                    )));
                }
                if dist.iter().any(|&p| !(0.0..=1.0 + ROW_SUM_TOL).contains(&p)) {
                    return Err(Error::InvalidParameter(format!(
                        "distribution entry out of [0,1] at state {}",
                        spec.state(s).name
                    )));
                }
            }
        }
        Ok(())
    }

    /// The uniform profile of a game.
    pub fn uniform(spec: &GameSpec) -> Self {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for s in 0..spec.num_states() {
            let (na, nb) = spec.action_counts(s);
            x.push(vec![1.0 / na as f64; na]);
            y.push(vec![1.0 / nb as f64; nb]);
        }
        StrategyProfile { x, y }
    }
}

/// One reported validation problem: where, and what.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationIssue {
    pub location: String,
    pub message: String,
}

/// Result of [`validate_game`]. `ok` holds exactly when `issues` is
/// empty; the forcibility flag is informational and never fails
/// validation.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<ValidationIssue>,
    /// Whether Player Two can force absorption against every Player One
    /// stationary strategy, judged on the support graph.
    pub is_absorbing_forcible_p2: bool,
}

/// Checks every model invariant and reports all violations.
///
/// - transition rows sum to 1 within tolerance, entries non-negative;
/// - absorbing states self-loop with probability 1;
/// - `r2 >= omega > 0` on absorbing states and `r1` within `[-1/2, 1/2]`;
/// - the cached `rho` and `m` match their definitions.
pub fn validate_game(spec: &GameSpec) -> ValidationReport {
    let mut issues = Vec::new();
    let n = spec.num_states();
    if spec.omega() <= 0.0 {
        issues.push(ValidationIssue {
            location: "omega".to_string(),
            message: format!("omega must be positive, got {}", spec.omega()),
        });
    }
    for s in 0..n {
        let name = &spec.state(s).name;
        let (na, nb) = spec.action_counts(s);
        for a in 0..na {
            for b in 0..nb {
                let row = spec.row(s, a, b);
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    issues.push(ValidationIssue {
                        location: format!("transition[{name}][{a}][{b}]"),
                        message: format!("row not stochastic: sums to {sum}"),
                    });
                }
                if row.iter().any(|&p| p < 0.0) {
                    issues.push(ValidationIssue {
                        location: format!("transition[{name}][{a}][{b}]"),
                        message: "negative transition probability".to_string(),
                    });
                }
            }
        }
        match &spec.state(s).kind {
            StateKind::Absorbing(p) => {
                let row = spec.row(s, 0, 0);
                if (row[s] - 1.0).abs() > ROW_SUM_TOL {
                    issues.push(ValidationIssue {
                        location: format!("state[{name}]"),
                        message: "absorbing state does not self-loop with probability 1"
                            .to_string(),
                    });
                }
                if p.r2 < spec.omega() {
                    issues.push(ValidationIssue {
                        location: format!("state[{name}].r2"),
                        message: format!("payoff2 below omega: {} < {}", p.r2, spec.omega()),
                    });
                }
                if p.r2 > 1.0 {
                    issues.push(ValidationIssue {
                        location: format!("state[{name}].r2"),
                        message: format!("payoff2 above 1: {}", p.r2),
                    });
                }
                if !(-0.5..=0.5).contains(&p.r1) {
                    issues.push(ValidationIssue {
                        location: format!("state[{name}].r1"),
                        message: format!("payoff1 outside [-1/2, 1/2]: {}", p.r1),
                    });
                }
            }
            StateKind::NonAbsorbing { .. } => {}
        }
    }
    // Recompute the cached quantities from scratch.
    let mut rho = f64::INFINITY;
    for s in 0..n {
        let (na, nb) = spec.action_counts(s);
        for a in 0..na {
            for b in 0..nb {
                for &p in spec.row(s, a, b) {
                    if p > 0.0 && p < rho {
                        rho = p;
                    }
                }
            }
        }
    }
    if rho.is_finite() && (rho - spec.rho()).abs() > 1e-15 {
        issues.push(ValidationIssue {
            location: "rho".to_string(),
            message: format!("cached rho {} != derived {}", spec.rho(), rho),
        });
    }
    let m = (0..n)
        .filter(|&s| !spec.is_absorbing(s))
        .map(|s| {
            let (na, nb) = spec.action_counts(s);
            na.max(nb)
        })
        .max()
        .unwrap_or(1);
    if m != spec.m() {
        issues.push(ValidationIssue {
            location: "m".to_string(),
            message: format!("cached m {} != derived {}", spec.m(), m),
        });
    }
    ValidationReport {
        ok: issues.is_empty(),
        issues,
        is_absorbing_forcible_p2: absorbing_forcible_p2(spec),
    }
}

/// Whether Player Two can force absorption against every stationary
/// Player One strategy, judged by support reachability.
///
/// Player One traps the play iff there is a non-empty set `S'` of
/// non-absorbing states and a pure choice `a(s)` per state such that
/// every Player Two reply keeps all mass inside `S'`. The greatest such
/// set is the limit of removing states where every Player One action
/// leaks out of the candidate set.
fn absorbing_forcible_p2(spec: &GameSpec) -> bool {
    let mut trap: Vec<usize> = spec.non_absorbing();
    loop {
        let keep: Vec<usize> = trap
            .iter()
            .copied()
            .filter(|&s| {
                let (na, nb) = spec.action_counts(s);
                (0..na).any(|a| {
                    (0..nb).all(|b| {
                        spec.row(s, a, b)
                            .iter()
                            .enumerate()
                            .all(|(t, &p)| p == 0.0 || trap.contains(&t))
                    })
                })
            })
            .collect();
        if keep.len() == trap.len() {
            return trap.is_empty();
        }
        trap = keep;
    }
}

/// Induces the time-homogeneous Markov chain of a stationary profile.
///
/// The chain row at `s` is `q(t|s) = sum_ab x^s_a y^s_b p(t|s;a,b)`;
/// every action pair is recorded as a labeled part (including pairs
/// with zero weight, whose conditional rows stay meaningful).
pub fn induce_chain(spec: &GameSpec, profile: &StrategyProfile) -> Result<Chain> {
    profile.validate(spec)?;
    let n = spec.num_states();
    let mut rows = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    for s in 0..n {
        let (na, nb) = spec.action_counts(s);
        let mut row = vec![0.0; n];
        let mut state_parts = Vec::with_capacity(na * nb);
        for a in 0..na {
            for b in 0..nb {
                let w = profile.x[s][a] * profile.y[s][b];
                let cond = spec.row(s, a, b).to_vec();
                for (t, &p) in cond.iter().enumerate() {
                    row[t] += w * p;
                }
                state_parts.push(Part {
                    label: PartLabel::ActionPair { a, b },
                    weight: w,
                    row: cond,
                });
            }
        }
        rows.push(row);
        parts.push(state_parts);
    }
    let names = spec.states().iter().map(|st| st.name.clone()).collect();
    let absorbing = (0..n).map(|s| spec.is_absorbing(s)).collect();
    Chain::with_parts(names, absorbing, rows, parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn g1_validates() {
        let g1 = fixtures::g1();
        let report = validate_game(&g1);
        assert!(report.ok, "issues: {:?}", report.issues);
        assert!(report.is_absorbing_forcible_p2);
        assert_eq!(g1.m(), 2);
        assert_eq!(g1.rho(), 1.0);
    }

    #[test]
    fn g1_payoff_below_omega_flagged() {
        let mut states = fixtures::g1().states().to_vec();
        if let StateKind::Absorbing(p) = &mut states[1].kind {
            p.r2 = 0.0;
        }
        let spec = GameSpec::new(states, fixtures::g1_transitions(), 1.0).unwrap();
        let report = validate_game(&spec);
        assert!(!report.ok);
        assert!(report
            .issues
            .iter()
            .any(|i| i.message.contains("payoff2 below omega")));
    }

    #[test]
    fn g1_non_stochastic_row_flagged() {
        let mut trans = fixtures::g1_transitions();
        trans[0][0][0] = vec![0.0, 0.9];
        let spec = GameSpec::new(fixtures::g1().states().to_vec(), trans, 1.0).unwrap();
        let report = validate_game(&spec);
        assert!(!report.ok);
        assert!(report
            .issues
            .iter()
            .any(|i| i.message.contains("row not stochastic")));
    }

    #[test]
    fn induce_g1_half_half() {
        let g1 = fixtures::g1();
        let profile = fixtures::g1_profile(0.5);
        let chain = induce_chain(&g1, &profile).unwrap();
        assert!((chain.row(0)[1] - 0.5).abs() < 1e-15);
        assert!((chain.row(0)[0] - 0.5).abs() < 1e-15);
        assert!(chain.is_absorbing_state(1));
    }

    #[test]
    fn induce_g1_pure_stay_not_absorbing() {
        let g1 = fixtures::g1();
        let profile = fixtures::g1_profile(0.0);
        let chain = induce_chain(&g1, &profile).unwrap();
        assert!((chain.row(0)[0] - 1.0).abs() < 1e-15);
        let analysis = crate::chain::ChainAnalysis::new(&chain);
        assert!(!analysis.is_absorbing_chain);
    }

    #[test]
    fn induce_g2_identity_encoding() {
        let (spec, profile) = fixtures::g2_as_game();
        let chain = induce_chain(&spec, &profile).unwrap();
        let direct = fixtures::g2();
        for s in 0..chain.num_states() {
            for t in 0..chain.num_states() {
                assert!((chain.row(s)[t] - direct.row(s)[t]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn profile_dimension_mismatch_rejected() {
        let g1 = fixtures::g1();
        let mut profile = fixtures::g1_profile(0.5);
        profile.y[0] = vec![1.0];
        assert!(matches!(
            induce_chain(&g1, &profile),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn forcibility_detects_trap() {
        // Player One's second action keeps the play at s regardless of
        // Player Two's reply, so Player Two cannot force absorption.
        let states = vec![
            State {
                name: "s".into(),
                kind: StateKind::NonAbsorbing {
                    p1_actions: vec!["a1".into(), "a2".into()],
                    p2_actions: vec!["b1".into()],
                },
            },
            State {
                name: "win".into(),
                kind: StateKind::Absorbing(AbsorbingPayoff { r1: 0.0, r2: 1.0 }),
            },
        ];
        let transition = vec![
            vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
            vec![vec![vec![0.0, 1.0]]],
        ];
        let spec = GameSpec::new(states, transition, 1.0).unwrap();
        let report = validate_game(&spec);
        assert!(report.ok);
        assert!(!report.is_absorbing_forcible_p2);
    }
}
