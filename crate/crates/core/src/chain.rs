//! Taboo-probability calculus for finite time-homogeneous Markov
//! chains.
//!
//! Conventions: a taboo probability `P^A(s, B)` measures the event of
//! reaching `B` before `A` where both hitting times are counted from
//! stage 1 on; the initial stage never counts. Escape probabilities,
//! return probabilities, and absorption rates all inherit this
//! stage-at-least-one counting.
//!
//! All quantities are computed by exact dense linear solves on
//! substochastic restrictions (never by simulation). States that
//! cannot reach the target inside the restricted graph are pinned to
//! zero before solving, which keeps every system nonsingular.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::{factor_diff, ROW_SUM_TOL};

/// Identifies where a part of a transition row came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartLabel {
    /// The whole row as a single part.
    Whole,
    /// A game action pair `(a, b)` at the host state.
    ActionPair { a: usize, b: usize },
    /// A named sub-row.
    Named(String),
}

impl std::fmt::Display for PartLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartLabel::Whole => write!(f, "whole"),
            PartLabel::ActionPair { a, b } => write!(f, "({a},{b})"),
            PartLabel::Named(name) => write!(f, "{name}"),
        }
    }
}

/// A part of (or an alternative to) the transition at a state: a
/// frequency together with the conditional distribution over next
/// states given that the part is used.
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub label: PartLabel,
    /// Frequency `f_p` with which the part is used, in `[0, 1]`.
    pub weight: f64,
    /// Conditional next-state distribution; sums to 1.
    pub row: Vec<f64>,
}

impl Part {
    /// A part that uses `row` with certainty (an alternative
    /// transition rather than a fraction of the existing one).
    pub fn replacement(row: Vec<f64>) -> Self {
        Part {
            label: PartLabel::Whole,
            weight: 1.0,
            row,
        }
    }

    /// The sub-row mass vector `f_p * row`.
    pub fn mass(&self) -> Vec<f64> {
        self.row.iter().map(|&p| p * self.weight).collect()
    }
}

/// A finite time-homogeneous Markov chain with designated absorbing
/// states and a per-state decomposition of each row into labeled
/// parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    names: Vec<String>,
    absorbing: Vec<bool>,
    rows: Vec<Vec<f64>>,
    parts: Vec<Vec<Part>>,
}

impl Chain {
    /// Builds a chain whose every row is a single whole part.
    pub fn from_rows(
        names: Vec<String>,
        absorbing: Vec<bool>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let parts = rows
            .iter()
            .map(|row| {
                vec![Part {
                    label: PartLabel::Whole,
                    weight: 1.0,
                    row: row.clone(),
                }]
            })
            .collect();
        Chain::with_parts(names, absorbing, rows, parts)
    }

    /// Builds a chain with an explicit part decomposition per state.
    ///
    /// Checks that rows are stochastic within [`ROW_SUM_TOL`] (then
    /// renormalizes them exactly), that absorbing states self-loop,
    /// that part weights at each state sum to 1, and that the weighted
    /// part rows reassemble the state row.
    pub fn with_parts(
        names: Vec<String>,
        absorbing: Vec<bool>,
        mut rows: Vec<Vec<f64>>,
        mut parts: Vec<Vec<Part>>,
    ) -> Result<Self> {
        let n = names.len();
        if absorbing.len() != n || rows.len() != n || parts.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "chain shape mismatch: {} names, {} flags, {} rows, {} part lists",
                n,
                absorbing.len(),
                rows.len(),
                parts.len()
            )));
        }
        for (s, row) in rows.iter_mut().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "row {s} has length {} (want {n})",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "row {s} not stochastic: sums to {sum}"
                )));
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
            if absorbing[s] && (row[s] - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "absorbing state {s} does not self-loop"
                )));
            }
        }
        for (s, state_parts) in parts.iter_mut().enumerate() {
            let total: f64 = state_parts.iter().map(|p| p.weight).sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidPart {
                    state: s,
                    reason: format!("part weights sum to {total}"),
                });
            }
            let mut recombined = vec![0.0; n];
            for part in state_parts.iter_mut() {
                if part.row.len() != n {
                    return Err(Error::InvalidPart {
                        state: s,
                        reason: "part row has wrong length".to_string(),
                    });
                }
                if !(0.0..=1.0 + ROW_SUM_TOL).contains(&part.weight) {
                    return Err(Error::InvalidPart {
                        state: s,
                        reason: format!("part weight {} outside [0,1]", part.weight),
                    });
                }
                if part.weight > 0.0 {
                    let rsum: f64 = part.row.iter().sum();
                    if (rsum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::InvalidPart {
                            state: s,
                            reason: format!("conditional part row sums to {rsum}"),
                        });
                    }
                    for p in part.row.iter_mut() {
                        *p /= rsum;
                    }
                }
                for (t, &p) in part.row.iter().enumerate() {
                    recombined[t] += part.weight * p;
                }
            }
            for t in 0..n {
                if (recombined[t] - rows[s][t]).abs() > 1e-7 {
                    return Err(Error::InvalidPart {
                        state: s,
                        reason: format!(
                            "parts recombine to {} at target {t}, row has {}",
                            recombined[t], rows[s][t]
                        ),
                    });
                }
            }
        }
        Ok(Chain {
            names,
            absorbing,
            rows,
            parts,
        })
    }

    pub fn num_states(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, s: usize) -> &str {
        &self.names[s]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_absorbing_state(&self, s: usize) -> bool {
        self.absorbing[s]
    }

    pub fn absorbing_states(&self) -> Vec<usize> {
        (0..self.num_states())
            .filter(|&s| self.absorbing[s])
            .collect()
    }

    pub fn non_absorbing_states(&self) -> Vec<usize> {
        (0..self.num_states())
            .filter(|&s| !self.absorbing[s])
            .collect()
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.rows[s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn parts(&self, s: usize) -> &[Part] {
        &self.parts[s]
    }

    /// Finds the part with the given label at `s`.
    pub fn part(&self, s: usize, label: &PartLabel) -> Option<&Part> {
        self.parts[s].iter().find(|p| &p.label == label)
    }

    /// Returns a copy with the row (and parts) at `s` replaced by the
    /// given part used with certainty.
    pub fn replace_row(&self, s: usize, row: Vec<f64>) -> Result<Chain> {
        let mut rows = self.rows.clone();
        let mut parts = self.parts.clone();
        rows[s] = row.clone();
        parts[s] = vec![Part {
            label: PartLabel::Whole,
            weight: 1.0,
            row,
        }];
        Chain::with_parts(self.names.clone(), self.absorbing.clone(), rows, parts)
    }
}

/// Solves `A x = b` by LU with partial pivoting, with one step of
/// iterative refinement when the residual exceeds `1e-10`.
pub(crate) fn solve_dense(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    let mut x = lu
        .solve(b)
        .ok_or_else(|| Error::InvalidParameter("singular linear system".to_string()))?;
    let residual = a * &x - b;
    if residual.amax() > 1e-10 {
        if let Some(correction) = lu.solve(&residual) {
            x -= correction;
        }
    }
    Ok(x)
}

/// States from which `targets` is reachable through the support graph,
/// moving only through states in `allowed` (targets themselves are
/// endpoints, not way stations).
fn can_reach_through(
    rows: &[Vec<f64>],
    allowed: &[bool],
    targets: &[bool],
) -> Vec<bool> {
    let n = rows.len();
    let mut reach = vec![false; n];
    let mut changed = true;
    while changed {
        changed = false;
        for s in 0..n {
            if reach[s] || !allowed[s] {
                continue;
            }
            let hit = rows[s]
                .iter()
                .enumerate()
                .any(|(t, &p)| p > 0.0 && (targets[t] || reach[t]));
            if hit {
                reach[s] = true;
                changed = true;
            }
        }
    }
    reach
}

/// Statistics of a part `p` at its host state: the no-return
/// probability `g`, the importance `nu`, and the evaluations `v` and
/// `w` against a harmonic function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartStats {
    pub g: f64,
    pub nu: f64,
    pub v: f64,
    pub w: f64,
}

/// Outcome of the one-stage-deviation bound for a full set of row
/// replacements.
#[derive(Debug, Clone)]
pub struct ReplacementBoundReport {
    /// Harmonic values of the replaced chain.
    pub new_values: Vec<f64>,
    /// Harmonic values of the original chain.
    pub old_values: Vec<f64>,
    /// The proved bound `sum_t delta_t / eps_t`.
    pub bound: f64,
    /// Largest observed `|r_*(s) - r(s)|`.
    pub max_deviation: f64,
    /// Whether the deviation respects the bound (with tolerance).
    pub holds: bool,
    /// Per replaced state: `(state, delta_t, eps_t, g(p_t), a_*(t))`.
    pub per_state: Vec<(usize, f64, f64, f64, f64)>,
}

/// One ratio comparison of a two-state bound: the realized factor
/// difference and the factor allowed.
#[derive(Debug, Clone, Copy)]
pub struct FactorCheck {
    pub observed: f64,
    pub allowed: f64,
    pub holds: bool,
}

fn factor_check(a: f64, b: f64, allowed: f64, tol: f64) -> FactorCheck {
    let observed = factor_diff(a, b);
    FactorCheck {
        observed,
        allowed,
        holds: observed <= allowed + tol,
    }
}

/// Close-state comparison bounds at a pair `(s, t)` with
/// `gamma = esc(t, s) < 1`: the product `P^t(t,s) mu(s,t)` tracks
/// `a(t)` within factor `2 gamma`, and the expected-visit ratio is
/// bounded below through the direct-passage probabilities.
#[derive(Debug, Clone)]
pub struct CloseStatesReport {
    pub gamma: f64,
    pub product_vs_rate: FactorCheck,
    /// `(start, visit ratio, lower bound, holds)` for starts `s`, `t`.
    pub visit_ratio: Vec<(usize, f64, f64, bool)>,
    pub holds: bool,
}

/// The derived calculus of one chain: escape probabilities, absorption
/// rates, visit counts, and solvers for taboo probabilities and
/// harmonic values. Construction runs the linear solves once; the
/// struct is an immutable snapshot afterwards.
#[derive(Debug, Clone)]
pub struct ChainAnalysis {
    pub chain: Chain,
    /// `esc[t][s]`: probability of never reaching `s` from `t`, with
    /// zero on the diagonal.
    pub esc: Vec<Vec<f64>>,
    /// Absorption rate `a(s)`: no-return probability after a visit.
    pub absorption_rate: Vec<f64>,
    /// Expected visit count `1 / a(s)`, infinite when `a(s) = 0`.
    pub expected_visits: Vec<f64>,
    /// Whether every state reaches the absorbing set with probability
    /// one.
    pub is_absorbing_chain: bool,
    /// A trapped recurrent class when the chain is not absorbing.
    pub trapped_class: Option<Vec<usize>>,
}

impl ChainAnalysis {
    pub fn new(chain: &Chain) -> Self {
        let n = chain.num_states();
        let mut esc = vec![vec![0.0; n]; n];
        for s in 0..n {
            let reach = reach_probabilities(chain, s);
            for t in 0..n {
                if t != s {
                    esc[t][s] = (1.0 - reach[t]).clamp(0.0, 1.0);
                }
            }
        }
        let mut absorption_rate = vec![0.0; n];
        for s in 0..n {
            absorption_rate[s] = chain.row(s)
                .iter()
                .enumerate()
                .map(|(t, &p)| p * esc[t][s])
                .sum::<f64>()
                .clamp(0.0, 1.0);
        }
        let expected_visits = absorption_rate
            .iter()
            .map(|&a| if a > 0.0 { 1.0 / a } else { f64::INFINITY })
            .collect();
        let absorbing_flags: Vec<bool> =
            (0..n).map(|s| chain.is_absorbing_state(s)).collect();
        let allowed: Vec<bool> = absorbing_flags.iter().map(|&a| !a).collect();
        let reach_abs = can_reach_through(chain.rows(), &allowed, &absorbing_flags);
        let is_absorbing_chain = (0..n)
            .all(|s| chain.is_absorbing_state(s) || reach_abs[s]);
        let trapped_class = if is_absorbing_chain {
            None
        } else {
            Some(find_trapped_class(chain, &reach_abs))
        };
        ChainAnalysis {
            chain: chain.clone(),
            esc,
            absorption_rate,
            expected_visits,
            is_absorbing_chain,
            trapped_class,
        }
    }

    /// Taboo probability `P^taboo(s, target)`: from `s`, the chance of
    /// reaching `target` before `taboo`, counting stages from 1.
    pub fn taboo_probability(
        &self,
        s: usize,
        taboo: &[usize],
        target: &[usize],
    ) -> Result<f64> {
        let n = self.chain.num_states();
        let mut is_taboo = vec![false; n];
        let mut is_target = vec![false; n];
        for &u in taboo {
            is_taboo[u] = true;
        }
        for &u in target {
            if is_taboo[u] {
                return Err(Error::OverlappingSets(u));
            }
            is_target[u] = true;
        }
        let h = self.hit_before(&is_taboo, &is_target);
        Ok(self.chain.row(s)
            .iter()
            .enumerate()
            .map(|(t, &p)| {
                if is_target[t] {
                    p
                } else if is_taboo[t] {
                    0.0
                } else {
                    p * h[t]
                }
            })
            .sum::<f64>()
            .clamp(0.0, 1.0))
    }

    /// For interior states: probability of hitting `target` before
    /// `taboo`, counted from stage 0 (used as the continuation value
    /// behind [`Self::taboo_probability`]).
    fn hit_before(&self, is_taboo: &[bool], is_target: &[bool]) -> Vec<f64> {
        let n = self.chain.num_states();
        let allowed: Vec<bool> = (0..n).map(|u| !is_taboo[u] && !is_target[u]).collect();
        let reach = can_reach_through(self.chain.rows(), &allowed, is_target);
        let live: Vec<usize> = (0..n).filter(|&u| allowed[u] && reach[u]).collect();
        let mut h = vec![0.0; n];
        if live.is_empty() {
            return h;
        }
        let k = live.len();
        let mut a = DMatrix::<f64>::identity(k, k);
        let mut b = DVector::<f64>::zeros(k);
        for (i, &u) in live.iter().enumerate() {
            for (j, &v) in live.iter().enumerate() {
                a[(i, j)] -= self.chain.row(u)[v];
            }
            b[i] = self.chain.row(u)
                .iter()
                .enumerate()
                .filter(|&(t, _)| is_target[t])
                .map(|(_, &p)| p)
                .sum();
        }
        let x = solve_dense(&a, &b).expect("substochastic restriction is nonsingular");
        for (i, &u) in live.iter().enumerate() {
            h[u] = x[i].clamp(0.0, 1.0);
        }
        h
    }

    /// Escape probability `esc(t, s)`: never reaching `s` from `t`.
    pub fn escape_probability(&self, t: usize, s: usize) -> Result<f64> {
        if t == s {
            return Err(Error::InvalidParameter(
                "escape probability requires distinct states".to_string(),
            ));
        }
        Ok(self.esc[t][s])
    }

    /// The strategy-induced metric `mu(s, t) = esc(s,t) + esc(t,s)`,
    /// zero on the diagonal.
    pub fn metric(&self, s: usize, t: usize) -> f64 {
        if s == t {
            0.0
        } else {
            self.esc[s][t] + self.esc[t][s]
        }
    }

    /// No-return probability `g(p)` of using `part` once at `state`.
    pub fn part_g(&self, state: usize, part: &Part) -> f64 {
        part.row
            .iter()
            .enumerate()
            .map(|(t, &p)| p * self.esc[t][state])
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    /// Expected boundary value from `t` on paths that avoid `avoid`
    /// (zero weight on paths that reach `avoid` or never absorb).
    pub fn absorption_values_avoiding(&self, avoid: usize, boundary: &[f64]) -> Vec<f64> {
        let n = self.chain.num_states();
        let is_absorbing: Vec<bool> =
            (0..n).map(|u| self.chain.is_absorbing_state(u)).collect();
        let allowed: Vec<bool> = (0..n)
            .map(|u| u != avoid && !is_absorbing[u])
            .collect();
        let reach = can_reach_through(self.chain.rows(), &allowed, &is_absorbing);
        let live: Vec<usize> = (0..n).filter(|&u| allowed[u] && reach[u]).collect();
        let mut phi = vec![0.0; n];
        for u in 0..n {
            if is_absorbing[u] && u != avoid {
                phi[u] = boundary[u];
            }
        }
        if live.is_empty() {
            return phi;
        }
        let k = live.len();
        let mut a = DMatrix::<f64>::identity(k, k);
        let mut b = DVector::<f64>::zeros(k);
        for (i, &u) in live.iter().enumerate() {
            for (j, &v) in live.iter().enumerate() {
                a[(i, j)] -= self.chain.row(u)[v];
            }
            b[i] = self.chain.row(u)
                .iter()
                .enumerate()
                .filter(|&(t, _)| is_absorbing[t] && t != avoid)
                .map(|(t, &p)| p * boundary[t])
                .sum();
        }
        let x = solve_dense(&a, &b).expect("substochastic restriction is nonsingular");
        for (i, &u) in live.iter().enumerate() {
            phi[u] = x[i];
        }
        phi
    }

    /// Full statistics of a part against the supplied absorbing
    /// boundary; solves the harmonic system internally.
    pub fn part_statistics(
        &self,
        state: usize,
        part: &Part,
        boundary: &[f64],
    ) -> Result<PartStats> {
        if self.chain.is_absorbing_state(state) {
            return Err(Error::InvalidParameter(
                "part statistics are defined at non-absorbing states".to_string(),
            ));
        }
        let r = self.harmonic_payoffs(boundary)?;
        let phi = self.absorption_values_avoiding(state, boundary);
        self.part_statistics_with(state, part, &r, &phi)
    }

    /// Statistics of a part using precomputed harmonic values and
    /// avoid-values for the host state.
    pub fn part_statistics_with(
        &self,
        state: usize,
        part: &Part,
        r: &[f64],
        phi_state: &[f64],
    ) -> Result<PartStats> {
        let g = self.part_g(state, part);
        let a = self.absorption_rate[state];
        let fg = part.weight * g;
        let nu = if a > 0.0 {
            (fg / a).clamp(0.0, 1.0)
        } else if fg == 0.0 {
            0.0
        } else {
            return Err(Error::Hypothesis(format!(
                "absorption rate 0 at state {state} with positive part flow {fg}"
            )));
        };
        let v = if g > 0.0 {
            part.row
                .iter()
                .enumerate()
                .map(|(t, &p)| p * phi_state[t])
                .sum::<f64>()
                / g
        } else {
            r[state]
        };
        let w = g * v + (1.0 - g) * r[state];
        Ok(PartStats { g, nu, v, w })
    }

    /// The unique harmonic extension of the boundary values: solves
    /// `r(s) = sum_t q(t|s) r(t)` with `r` fixed on absorbing states.
    ///
    /// Fails with the trapped recurrent class when the chain is not
    /// absorbing.
    pub fn harmonic_payoffs(&self, boundary: &[f64]) -> Result<Vec<f64>> {
        if boundary.len() != self.chain.num_states() {
            return Err(Error::DimensionMismatch(
                "boundary length does not match state count".to_string(),
            ));
        }
        if !self.is_absorbing_chain {
            return Err(Error::NotAbsorbing(
                self.trapped_class.clone().unwrap_or_default(),
            ));
        }
        Ok(self.recursive_values(boundary))
    }

    /// Expected boundary value at absorption with the recursive-game
    /// convention: paths that never absorb contribute zero. Defined for
    /// every chain; coincides with [`Self::harmonic_payoffs`] on
    /// absorbing chains.
    pub fn recursive_values(&self, boundary: &[f64]) -> Vec<f64> {
        let n = self.chain.num_states();
        let is_absorbing: Vec<bool> =
            (0..n).map(|u| self.chain.is_absorbing_state(u)).collect();
        let allowed: Vec<bool> = is_absorbing.iter().map(|&a| !a).collect();
        let reach = can_reach_through(self.chain.rows(), &allowed, &is_absorbing);
        let live: Vec<usize> = (0..n).filter(|&u| allowed[u] && reach[u]).collect();
        let mut r = vec![0.0; n];
        for u in 0..n {
            if is_absorbing[u] {
                r[u] = boundary[u];
            }
        }
        if live.is_empty() {
            return r;
        }
        let k = live.len();
        let mut a = DMatrix::<f64>::identity(k, k);
        let mut b = DVector::<f64>::zeros(k);
        for (i, &u) in live.iter().enumerate() {
            for (j, &v) in live.iter().enumerate() {
                a[(i, j)] -= self.chain.row(u)[v];
            }
            b[i] = self.chain.row(u)
                .iter()
                .enumerate()
                .filter(|&(t, _)| is_absorbing[t])
                .map(|(t, &p)| p * boundary[t])
                .sum();
        }
        let x = solve_dense(&a, &b).expect("substochastic restriction is nonsingular");
        for (i, &u) in live.iter().enumerate() {
            r[u] = x[i];
        }
        r
    }

    /// Fundamental-matrix visit counts `N[u][v]`: expected number of
    /// visits to `v` starting from `u`, counting the stage-0 visit.
    /// Requires an absorbing chain.
    pub fn visit_counts(&self) -> Result<Vec<Vec<f64>>> {
        if !self.is_absorbing_chain {
            return Err(Error::NotAbsorbing(
                self.trapped_class.clone().unwrap_or_default(),
            ));
        }
        let interior = self.chain.non_absorbing_states();
        let k = interior.len();
        let mut q = DMatrix::<f64>::zeros(k, k);
        for (i, &u) in interior.iter().enumerate() {
            for (j, &v) in interior.iter().enumerate() {
                q[(i, j)] = self.chain.row(u)[v];
            }
        }
        let fundamental = (DMatrix::<f64>::identity(k, k) - q)
            .try_inverse()
            .ok_or_else(|| Error::InvalidParameter("singular fundamental matrix".into()))?;
        let n = self.chain.num_states();
        let mut counts = vec![vec![0.0; n]; n];
        for (i, &u) in interior.iter().enumerate() {
            for (j, &v) in interior.iter().enumerate() {
                counts[u][v] = fundamental[(i, j)];
            }
        }
        counts
            .iter_mut()
            .enumerate()
            .for_each(|(u, row)| {
                if self.chain.is_absorbing_state(u) {
                    row[u] = f64::INFINITY;
                }
            });
        Ok(counts)
    }

    /// Verifies the one-stage-deviation bound for a full set of row
    /// replacements: with `|v^r(p_t) - r(t)| <= delta_t` and
    /// `a_*(t) >= eps_t g(p_t)`, the replaced chain stays absorbing and
    /// its harmonic values move by at most `sum_t delta_t / eps_t`.
    ///
    /// States absent from `replacements` keep their original rows (for
    /// which `g(p_t) = a(t)`). When `deltas`/`epsilons` are `None` the
    /// tightest admissible values are derived from the chains.
    pub fn replacement_bound(
        &self,
        replacements: &[(usize, Part)],
        boundary: &[f64],
        deltas: Option<&[f64]>,
        epsilons: Option<&[f64]>,
    ) -> Result<ReplacementBoundReport> {
        let old_values = self.harmonic_payoffs(boundary)?;
        let n = self.chain.num_states();
        let mut new_chain = self.chain.clone();
        let mut replaced: Vec<Option<Part>> = vec![None; n];
        for (s, part) in replacements {
            if self.chain.is_absorbing_state(*s) {
                return Err(Error::InvalidParameter(format!(
                    "cannot replace the row of absorbing state {s}"
                )));
            }
            replaced[*s] = Some(part.clone());
            new_chain = new_chain.replace_row(*s, part.row.clone())?;
        }
        // Precondition: every (implicit or explicit) replacement has a
        // positive no-return probability.
        for s in self.chain.non_absorbing_states() {
            let g = match &replaced[s] {
                Some(p) => self.part_g(s, p),
                None => self.absorption_rate[s],
            };
            if g <= 0.0 {
                return Err(Error::Hypothesis(format!(
                    "replacement at state {s} has no-return probability 0"
                )));
            }
        }
        let new_analysis = ChainAnalysis::new(&new_chain);
        let new_values = new_analysis.harmonic_payoffs(boundary)?;
        let mut bound = 0.0;
        let mut per_state = Vec::new();
        for s in self.chain.non_absorbing_states() {
            let (g, v) = match &replaced[s] {
                Some(p) => {
                    let phi = self.absorption_values_avoiding(s, boundary);
                    let stats = self.part_statistics_with(s, p, &old_values, &phi)?;
                    (stats.g, stats.v)
                }
                None => (self.absorption_rate[s], old_values[s]),
            };
            let delta_s = match deltas {
                Some(d) => d[s],
                None => (v - old_values[s]).abs(),
            };
            if (v - old_values[s]).abs() > delta_s + 1e-12 {
                return Err(Error::Hypothesis(format!(
                    "supplied delta at state {s} is below |v - r|"
                )));
            }
            let eps_s = match epsilons {
                Some(e) => e[s],
                None => (new_analysis.absorption_rate[s] / g).min(1.0),
            };
            if !(0.0..=1.0).contains(&eps_s) || eps_s == 0.0 {
                return Err(Error::Hypothesis(format!(
                    "eps at state {s} must lie in (0, 1], got {eps_s}"
                )));
            }
            if new_analysis.absorption_rate[s] + 1e-12 < eps_s * g {
                return Err(Error::Hypothesis(format!(
                    "a_*({s}) = {} below eps*g = {}",
                    new_analysis.absorption_rate[s],
                    eps_s * g
                )));
            }
            bound += delta_s / eps_s;
            per_state.push((s, delta_s, eps_s, g, new_analysis.absorption_rate[s]));
        }
        let max_deviation = (0..n)
            .map(|s| (new_values[s] - old_values[s]).abs())
            .fold(0.0, f64::max);
        Ok(ReplacementBoundReport {
            holds: max_deviation <= bound + 1e-9,
            new_values,
            old_values,
            bound,
            max_deviation,
            per_state,
        })
    }

    /// Checks the close-state bounds at distinct non-absorbing `s`,
    /// `t` with `gamma = esc(t, s)`, against direct linear-algebra
    /// recomputation. Requires an absorbing chain and `gamma < 1`.
    pub fn close_states_check(&self, s: usize, t: usize) -> Result<CloseStatesReport> {
        if s == t || self.chain.is_absorbing_state(s) || self.chain.is_absorbing_state(t) {
            return Err(Error::InvalidParameter(
                "close-state bounds need distinct non-absorbing states".to_string(),
            ));
        }
        let gamma = self.esc[t][s];
        if gamma >= 1.0 {
            return Err(Error::Hypothesis(format!(
                "esc(t,s) = {gamma} is not below 1"
            )));
        }
        let p_ts = self.taboo_probability(t, &[t], &[s])?;
        let p_st = self.taboo_probability(s, &[s], &[t])?;
        let mu = self.metric(s, t);
        let product_vs_rate = factor_check(
            p_ts * mu,
            self.absorption_rate[t],
            2.0 * gamma,
            1e-9,
        );
        let counts = self.visit_counts()?;
        let mut visit_ratio = Vec::new();
        let mut holds = product_vs_rate.holds;
        if p_st > 0.0 {
            let rhs = (1.0 - 4.0 * gamma) * p_ts / p_st;
            for start in [s, t] {
                let ratio = counts[start][s] / counts[start][t];
                let ok = ratio + 1e-9 >= rhs;
                holds &= ok;
                visit_ratio.push((start, ratio, rhs, ok));
            }
        }
        Ok(CloseStatesReport {
            gamma,
            product_vs_rate,
            visit_ratio,
            holds,
        })
    }
}

/// Probability of ever reaching `s` (from stage 1 on) from each state.
fn reach_probabilities(chain: &Chain, s: usize) -> Vec<f64> {
    let n = chain.num_states();
    let mut target = vec![false; n];
    target[s] = true;
    let allowed: Vec<bool> = (0..n).map(|u| u != s).collect();
    let reach = can_reach_through(chain.rows(), &allowed, &target);
    let live: Vec<usize> = (0..n).filter(|&u| u != s && reach[u]).collect();
    let mut h = vec![0.0; n];
    // h[u] for u != s: probability of hitting s from u.
    if !live.is_empty() {
        let k = live.len();
        let mut a = DMatrix::<f64>::identity(k, k);
        let mut b = DVector::<f64>::zeros(k);
        for (i, &u) in live.iter().enumerate() {
            for (j, &v) in live.iter().enumerate() {
                a[(i, j)] -= chain.row(u)[v];
            }
            b[i] = chain.row(u)[s];
        }
        let x = solve_dense(&a, &b).expect("substochastic restriction is nonsingular");
        for (i, &u) in live.iter().enumerate() {
            h[u] = x[i].clamp(0.0, 1.0);
        }
    }
    // Reaching s from s (at stage >= 1) steps away first.
    h[s] = chain.row(s)
        .iter()
        .enumerate()
        .map(|(t, &p)| if t == s { p } else { p * h[t] })
        .sum::<f64>()
        .clamp(0.0, 1.0);
    h
}

/// A bottom strongly-connected component among states that cannot
/// reach absorption.
fn find_trapped_class(chain: &Chain, reach_abs: &[bool]) -> Vec<usize> {
    let n = chain.num_states();
    let stuck: Vec<usize> = (0..n)
        .filter(|&u| !chain.is_absorbing_state(u) && !reach_abs[u])
        .collect();
    let reachable_from = |u: usize| -> Vec<usize> {
        let mut seen = vec![false; n];
        seen[u] = true;
        let mut stack = vec![u];
        while let Some(v) = stack.pop() {
            for (w, &p) in chain.row(v).iter().enumerate() {
                if p > 0.0 && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        (0..n).filter(|&w| seen[w]).collect()
    };
    let mut u = stuck[0];
    let mut closure = reachable_from(u);
    loop {
        let (v, smaller) = closure
            .iter()
            .copied()
            .map(|v| (v, reachable_from(v)))
            .min_by_key(|(_, r)| r.len())
            .unwrap();
        u = v;
        if smaller.len() == closure.len() {
            break;
        }
        closure = smaller;
    }
    let from_u = reachable_from(u);
    from_u
        .into_iter()
        .filter(|&v| reachable_from(v).contains(&u))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    const TOL: f64 = 1e-9;

    #[test]
    fn g2_taboo_probabilities() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        // Frozen from the horizon-64 enumeration oracle.
        assert!((an.taboo_probability(0, &[0], &[1]).unwrap() - 0.5).abs() < TOL);
        assert!((an.taboo_probability(0, &[0, 1], &[2, 3]).unwrap() - 0.5).abs() < TOL);
        assert!((an.taboo_probability(0, &[], &[2, 3]).unwrap() - 1.0).abs() < TOL);
    }

    #[test]
    fn absorbing_self_taboo_is_one() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        assert!((an.taboo_probability(2, &[], &[2]).unwrap() - 1.0).abs() < TOL);
    }

    #[test]
    fn overlapping_sets_rejected() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        assert!(matches!(
            an.taboo_probability(0, &[1], &[1, 2]),
            Err(Error::OverlappingSets(1))
        ));
    }

    #[test]
    fn g2_escape_metric_rate() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        assert!((an.escape_probability(1, 0).unwrap() - 0.5).abs() < TOL);
        assert!((an.metric(0, 1) - 1.0).abs() < TOL);
        assert_eq!(an.metric(0, 0), 0.0);
        assert!((an.absorption_rate[0] - 0.75).abs() < TOL);
        assert!((an.expected_visits[0] - 4.0 / 3.0).abs() < TOL);
    }

    #[test]
    fn escape_requires_distinct_states() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        assert!(an.escape_probability(0, 0).is_err());
    }

    #[test]
    fn disconnected_pair_escapes() {
        // Two separate one-state components, each absorbing on its own.
        let chain = Chain::from_rows(
            vec!["u".into(), "v".into(), "Au".into(), "Av".into()],
            vec![false, false, true, true],
            vec![
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
        )
        .unwrap();
        let an = ChainAnalysis::new(&chain);
        assert_eq!(an.escape_probability(0, 1).unwrap(), 1.0);
        assert_eq!(an.metric(0, 1), 2.0);
        assert_eq!(an.absorption_rate[0], 1.0);
    }

    #[test]
    fn certain_reach_escape_zero() {
        let chain = Chain::from_rows(
            vec!["t".into(), "s".into(), "A".into()],
            vec![false, false, true],
            vec![
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0],
            ],
        )
        .unwrap();
        let an = ChainAnalysis::new(&chain);
        assert_eq!(an.escape_probability(0, 1).unwrap(), 0.0);
    }

    #[test]
    fn self_loop_state_rate_zero() {
        let chain = Chain::from_rows(
            vec!["s".into(), "A".into()],
            vec![false, true],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let an = ChainAnalysis::new(&chain);
        assert_eq!(an.absorption_rate[0], 0.0);
        assert_eq!(an.expected_visits[0], f64::INFINITY);
        assert!(!an.is_absorbing_chain);
        assert_eq!(an.trapped_class, Some(vec![0]));
    }

    #[test]
    fn g1_part_statistics() {
        let g1 = fixtures::g1();
        let profile = fixtures::g1_profile(0.5);
        let chain = crate::game::induce_chain(&g1, &profile).unwrap();
        let an = ChainAnalysis::new(&chain);
        let boundary = g1.boundary(2);
        let part = chain
            .part(0, &PartLabel::ActionPair { a: 0, b: 0 })
            .unwrap()
            .clone();
        let stats = an.part_statistics(0, &part, &boundary).unwrap();
        assert!((stats.g - 1.0).abs() < TOL);
        assert!((part.weight - 0.5).abs() < TOL);
        assert!((an.absorption_rate[0] - 0.5).abs() < TOL);
        assert!((stats.nu - 1.0).abs() < TOL);
        assert!((stats.v - 1.0).abs() < TOL);
        assert!((stats.w - 1.0).abs() < TOL);
    }

    #[test]
    fn self_loop_part_keeps_values() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        let boundary = vec![0.0, 0.0, 0.25, 0.75];
        let part = Part {
            label: PartLabel::Named("stay".into()),
            weight: 0.5,
            row: vec![1.0, 0.0, 0.0, 0.0],
        };
        let r = an.harmonic_payoffs(&boundary).unwrap();
        let stats = an.part_statistics(0, &part, &boundary).unwrap();
        assert_eq!(stats.g, 0.0);
        assert!((stats.v - r[0]).abs() < TOL);
        assert!((stats.w - r[0]).abs() < TOL);
    }

    #[test]
    fn g2_whole_row_part() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        let boundary = vec![0.0, 0.0, 1.0, 1.0];
        let part = Part {
            label: PartLabel::Whole,
            weight: 1.0,
            row: chain.row(0).to_vec(),
        };
        let stats = an.part_statistics(0, &part, &boundary).unwrap();
        assert!((stats.g - 0.75).abs() < TOL);
        assert!((stats.nu - 1.0).abs() < TOL);
    }

    #[test]
    fn g2_split_boundary_harmonic() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        let boundary = vec![0.0, 0.0, 0.0, 1.0];
        let r = an.harmonic_payoffs(&boundary).unwrap();
        assert!((r[0] - 1.0 / 3.0).abs() < TOL);
        assert!((r[1] - 2.0 / 3.0).abs() < TOL);
    }

    #[test]
    fn constant_boundary_harmonic() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        let boundary = vec![0.0, 0.0, 0.4, 0.4];
        let r = an.harmonic_payoffs(&boundary).unwrap();
        for s in 0..chain.num_states() {
            assert!((r[s] - 0.4).abs() < TOL);
        }
    }

    #[test]
    fn non_absorbing_harmonic_fails_with_class() {
        let chain = Chain::from_rows(
            vec!["s".into(), "t".into(), "A".into()],
            vec![false, false, true],
            vec![
                vec![0.0, 1.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        )
        .unwrap();
        let an = ChainAnalysis::new(&chain);
        match an.harmonic_payoffs(&[0.0, 0.0, 1.0]) {
            Err(Error::NotAbsorbing(class)) => {
                let mut class = class;
                class.sort_unstable();
                assert_eq!(class, vec![0, 1]);
            }
            other => panic!("expected NotAbsorbing, got {other:?}"),
        }
    }

    #[test]
    fn replacement_bound_identity() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        let boundary = vec![0.0, 0.0, 0.0, 1.0];
        let report = an.replacement_bound(&[], &boundary, None, None).unwrap();
        assert!(report.holds);
        assert!(report.max_deviation < TOL);
        assert!(report.bound < TOL);
    }

    #[test]
    fn replacement_bound_absorb_at_value() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        let boundary = vec![0.0, 0.0, 0.0, 1.0];
        let r = an.harmonic_payoffs(&boundary).unwrap();
        // Replace s's row by "absorb at a state worth r(s)": encode by
        // splitting mass between the two absorbing values.
        let w_hi = r[0];
        let row = vec![0.0, 0.0, 1.0 - w_hi, w_hi];
        let report = an
            .replacement_bound(
                &[(0, Part::replacement(row))],
                &boundary,
                None,
                None,
            )
            .unwrap();
        assert!(report.holds);
        assert!((report.new_values[0] - r[0]).abs() < TOL);
    }

    #[test]
    fn visit_counts_g2() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        let counts = an.visit_counts().unwrap();
        assert!((counts[0][0] - 4.0 / 3.0).abs() < TOL);
        assert!((counts[0][1] - 2.0 / 3.0).abs() < TOL);
    }

    #[test]
    fn close_states_g2() {
        let chain = fixtures::g2();
        let an = ChainAnalysis::new(&chain);
        let report = an.close_states_check(0, 1).unwrap();
        assert!((report.gamma - 0.5).abs() < TOL);
        assert!(report.holds, "report: {report:?}");
    }
}
