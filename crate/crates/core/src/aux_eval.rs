//! State-specific discounted evaluation for Player Two.
//!
//! A move with no-return probability at least `eps_bar` is evaluated
//! in an undiscounted way; a rarer move's rate is inflated by
//! `1/eps_bar`. Per-state discounting is then driven by the ordering
//! weights `w~`, which compare auxiliary absorption rates across
//! states with a multiplicative cutoff `K = (Q1 Q2)^{|N|}`.
//!
//! The evaluation `xi` is computed from its closed-form recursion (the
//! per-state balance below), never from the path-expectation series;
//! the series is sampled by [`xi_monte_carlo`] as an independent
//! validation route.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::chain::ChainAnalysis;
use crate::error::{Error, Result};
use crate::game::{GameSpec, StrategyProfile};
use crate::{PartLabel, IDENTITY_TOL};

/// Parameters of the auxiliary evaluation. `K = (Q1 Q2)^{|N|}` is kept
/// in log space because it overflows quickly.
#[derive(Debug, Clone, Copy)]
pub struct AuxParams {
    /// Threshold below which no-return probabilities are inflated.
    pub eps_bar: f64,
    /// Per-return discount increment.
    pub delta: f64,
    pub q1: f64,
    pub q2: f64,
}

impl AuxParams {
    pub fn new(eps_bar: f64, delta: f64, q1: f64, q2: f64) -> Result<Self> {
        if !(0.0 < eps_bar && eps_bar < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "eps_bar must lie in (0,1), got {eps_bar}"
            )));
        }
        if delta < 0.0 || delta >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "delta must lie in [0,1), got {delta}"
            )));
        }
        if q1 <= 1.0 || q2 <= 1.0 {
            return Err(Error::InvalidParameter(
                "Q1 and Q2 must exceed 1".to_string(),
            ));
        }
        Ok(AuxParams {
            eps_bar,
            delta,
            q1,
            q2,
        })
    }

    /// `ln L = ln(Q1 Q2)`.
    pub fn log_l(&self) -> f64 {
        self.q1.ln() + self.q2.ln()
    }

    /// `ln K` for a game with `n_interior` non-absorbing states.
    pub fn log_k(&self, n_interior: usize) -> f64 {
        n_interior as f64 * self.log_l()
    }

    /// `K` itself; may overflow to infinity, which is why the cutoff
    /// is applied in log space.
    pub fn k(&self, n_interior: usize) -> f64 {
        self.log_k(n_interior).exp()
    }
}

/// Per-move auxiliary quantities of a Player Two move.
#[derive(Debug, Clone, Copy)]
pub struct MoveAux {
    pub b: usize,
    /// `y^s_b`.
    pub weight: f64,
    /// No-return probability `g^b`.
    pub g: f64,
    /// Continuation value `v^2(b)` given no return.
    pub v2: f64,
    /// Thresholded rate: 1 if `g >= eps_bar`, else `g / eps_bar`.
    pub g_tilde: f64,
    /// Blended value: `(1 - g/g~) r2(s) + (g/g~) v2(b)`.
    pub v2_tilde: f64,
    /// Complement rate solving `(1 - g~) = (1 - g_bar)(1 - g)`.
    pub g_bar: f64,
}

/// Per-state auxiliary quantities.
#[derive(Debug, Clone)]
pub struct StateAux {
    pub state: usize,
    /// True absorption rate `a(s)`.
    pub a: f64,
    /// Auxiliary absorption rate `a~(s) = sum_b y_b g~^b`.
    pub a_tilde: f64,
    /// Harmonic Player Two value at the state.
    pub r2: f64,
    pub moves: Vec<MoveAux>,
}

/// The thresholded per-move and per-state rates of a profile.
#[derive(Debug, Clone)]
pub struct AuxQuantities {
    /// Indexed by state; `None` at absorbing states.
    pub states: Vec<Option<StateAux>>,
}

/// The full evaluation: quantities, ordering weights, and xi values.
#[derive(Debug, Clone)]
pub struct AuxEvaluation {
    pub params: AuxParams,
    pub quantities: AuxQuantities,
    /// `ln w~(s)`; `None` at absorbing states.
    pub log_w_tilde: Vec<Option<f64>>,
    /// `xi(s)`; `None` at absorbing states.
    pub xi: Vec<Option<f64>>,
    /// `xi^b` per state, aligned with the move lists.
    pub xi_moves: Vec<Vec<f64>>,
    /// `max_b xi^b` per state.
    pub xi_bar: Vec<Option<f64>>,
    /// Largest `|sum_b y_b xi^b - xi(s)|` over states.
    pub consistency_residual: f64,
}

impl AuxEvaluation {
    pub fn state(&self, s: usize) -> Option<&StateAux> {
        self.quantities.states[s].as_ref()
    }

    /// `w~(s)` as a plain float (may saturate to infinity).
    pub fn w_tilde(&self, s: usize) -> Option<f64> {
        self.log_w_tilde[s].map(f64::exp)
    }
}

/// Computes `g^b`, `v^2(b)`, the thresholded move quantities, and the
/// per-state auxiliary rates, for the chain induced by a profile.
///
/// The analysis must come from a game-induced chain: each part is
/// keyed by an action pair and move marginals are recovered from the
/// part weights.
pub fn aux_quantities(
    analysis: &ChainAnalysis,
    boundary_r2: &[f64],
    params: &AuxParams,
) -> Result<AuxQuantities> {
    let r2 = analysis.harmonic_payoffs(boundary_r2)?;
    let n = analysis.chain.num_states();
    let mut states = vec![None; n];
    for s in 0..n {
        if analysis.chain.is_absorbing_state(s) {
            continue;
        }
        let parts = analysis.chain.parts(s);
        let (mut na, mut nb) = (0usize, 0usize);
        for part in parts {
            match part.label {
                PartLabel::ActionPair { a, b } => {
                    na = na.max(a + 1);
                    nb = nb.max(b + 1);
                }
                _ => {
                    return Err(Error::InvalidPart {
                        state: s,
                        reason: "auxiliary quantities need action-pair parts".to_string(),
                    })
                }
            }
        }
        // Marginals: x_a = sum_b weight(a,b), y_b = sum_a weight(a,b).
        let mut x = vec![0.0; na];
        let mut y = vec![0.0; nb];
        for part in parts {
            if let PartLabel::ActionPair { a, b } = part.label {
                x[a] += part.weight;
                y[b] += part.weight;
            }
        }
        let phi = analysis.absorption_values_avoiding(s, boundary_r2);
        let mut moves = Vec::with_capacity(nb);
        let mut a_tilde = 0.0;
        for b in 0..nb {
            // g^b = sum_a x_a g(a,b); v2(b) is the g-weighted blend of
            // the pair values.
            let mut g_b = 0.0;
            let mut gv = 0.0;
            for part in parts {
                if let PartLabel::ActionPair { a, b: pb } = part.label {
                    if pb != b {
                        continue;
                    }
                    let stats = analysis.part_statistics_with(s, part, &r2, &phi)?;
                    g_b += x[a] * stats.g;
                    gv += x[a] * stats.g * stats.v;
                }
            }
            let v2 = if g_b > 0.0 { gv / g_b } else { r2[s] };
            let g_tilde = if g_b >= params.eps_bar {
                1.0
            } else {
                g_b / params.eps_bar
            };
            let v2_tilde = if g_tilde == 0.0 {
                r2[s]
            } else {
                let ratio = g_b / g_tilde;
                (1.0 - ratio) * r2[s] + ratio * v2
            };
            let g_bar = if g_tilde >= 1.0 {
                1.0
            } else {
                1.0 - (1.0 - g_tilde) / (1.0 - g_b)
            };
            a_tilde += y[b] * g_tilde;
            moves.push(MoveAux {
                b,
                weight: y[b],
                g: g_b,
                v2,
                g_tilde,
                v2_tilde,
                g_bar,
            });
        }
        states[s] = Some(StateAux {
            state: s,
            a: analysis.absorption_rate[s],
            a_tilde,
            r2: r2[s],
            moves,
        });
    }
    Ok(AuxQuantities { states })
}

/// Ordering weights over positional entries: sorts by rate ascending
/// (ties by index), then `w~(k)` is the product of cutoff ratios from
/// `k` up to the maximal-rate entry. Returned in log space, aligned
/// with the input.
pub fn ordering_weights(a_tilde: &[f64], log_k: f64) -> Result<Vec<f64>> {
    for (i, &a) in a_tilde.iter().enumerate() {
        if a <= 0.0 {
            return Err(Error::ZeroAuxRate(i));
        }
    }
    let mut order: Vec<usize> = (0..a_tilde.len()).collect();
    order.sort_by(|&i, &j| {
        a_tilde[i]
            .partial_cmp(&a_tilde[j])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut log_w = vec![0.0; a_tilde.len()];
    // Walk down from the largest rate, accumulating cutoff ratios.
    let mut acc = 0.0;
    for pair in order.windows(2).rev() {
        let (lo, hi) = (pair[0], pair[1]);
        let log_ratio = a_tilde[hi].ln() - a_tilde[lo].ln();
        acc += log_ratio.min(log_k).max(0.0);
        log_w[lo] = acc;
    }
    if let Some(&last) = order.last() {
        log_w[last] = 0.0;
    }
    Ok(log_w)
}

/// Closed-form `xi` from the per-state balance:
/// `xi = r2 * w~ a~ / (w~ a~ + delta (1 - a~))`.
pub fn xi_closed_form(r2: f64, a_tilde: f64, log_w_tilde: f64, delta: f64) -> f64 {
    if delta == 0.0 || a_tilde >= 1.0 {
        return r2;
    }
    // ratio = delta (1 - a~) / (w~ a~), computed in logs for large w~.
    let log_ratio = delta.ln() + (1.0 - a_tilde).ln() - log_w_tilde - a_tilde.ln();
    r2 / (1.0 + log_ratio.exp())
}

/// `xi^b` from the one-move recursion:
/// `xi^b = g~ v~2(b) + (1 - delta/w~)(1 - g~) xi(s)`.
pub fn xi_move(mv: &MoveAux, xi_state: f64, log_w_tilde: f64, delta: f64) -> f64 {
    let discount = if delta == 0.0 {
        1.0
    } else {
        1.0 - (delta.ln() - log_w_tilde).exp()
    };
    mv.g_tilde * mv.v2_tilde + discount * (1.0 - mv.g_tilde) * xi_state
}

/// Builds the full auxiliary evaluation of a profile-induced chain.
/// Requires `a~(s) > 0` at every non-absorbing state.
pub fn xi_values(
    analysis: &ChainAnalysis,
    boundary_r2: &[f64],
    params: &AuxParams,
) -> Result<AuxEvaluation> {
    let quantities = aux_quantities(analysis, boundary_r2, params)?;
    let n = quantities.states.len();
    let interior: Vec<usize> = (0..n)
        .filter(|&s| quantities.states[s].is_some())
        .collect();
    let rates: Vec<f64> = interior
        .iter()
        .map(|&s| quantities.states[s].as_ref().unwrap().a_tilde)
        .collect();
    for (pos, &rate) in rates.iter().enumerate() {
        if rate <= 0.0 {
            return Err(Error::ZeroAuxRate(interior[pos]));
        }
    }
    let log_k = params.log_k(interior.len());
    let log_w_packed = ordering_weights(&rates, log_k)?;
    let mut log_w_tilde = vec![None; n];
    let mut xi = vec![None; n];
    let mut xi_moves = vec![Vec::new(); n];
    let mut xi_bar = vec![None; n];
    let mut consistency_residual: f64 = 0.0;
    for (pos, &s) in interior.iter().enumerate() {
        let aux = quantities.states[s].as_ref().unwrap();
        let lw = log_w_packed[pos];
        let xs = xi_closed_form(aux.r2, aux.a_tilde, lw, params.delta);
        let per_move: Vec<f64> = aux
            .moves
            .iter()
            .map(|mv| xi_move(mv, xs, lw, params.delta))
            .collect();
        let mix: f64 = aux
            .moves
            .iter()
            .zip(per_move.iter())
            .map(|(mv, &xb)| mv.weight * xb)
            .sum();
        consistency_residual = consistency_residual.max((mix - xs).abs());
        let bar = per_move.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        log_w_tilde[s] = Some(lw);
        xi[s] = Some(xs);
        xi_moves[s] = per_move;
        xi_bar[s] = Some(bar);
    }
    let eval = AuxEvaluation {
        params: *params,
        quantities,
        log_w_tilde,
        xi,
        xi_moves,
        xi_bar,
        consistency_residual,
    };
    if eval.consistency_residual > IDENTITY_TOL {
        return Err(Error::Hypothesis(format!(
            "xi mixture residual {} above tolerance",
            eval.consistency_residual
        )));
    }
    Ok(eval)
}

/// A sampled play: the visited `(state, a, b)` sequence, per-state
/// visit stages, and the realized Player Two payoff (zero when the
/// horizon was hit first).
#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub steps: Vec<(usize, usize, usize)>,
    pub visit_stages: Vec<Vec<usize>>,
    pub payoff2: f64,
    pub absorbed: bool,
}

pub(crate) fn sample_index(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let mut u: f64 = rng.gen();
    for (i, &p) in dist.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    dist.len() - 1
}

/// Samples one play of `(x, y)` from `start`, with Player Two forced
/// to `forced_b` on the first stage when given.
pub fn sample_trace(
    spec: &GameSpec,
    profile: &StrategyProfile,
    start: usize,
    forced_b: Option<usize>,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> SimulationTrace {
    let mut steps = Vec::new();
    let mut visit_stages = vec![Vec::new(); spec.num_states()];
    let mut s = start;
    let mut absorbed = false;
    for stage in 0..horizon {
        if spec.is_absorbing(s) {
            absorbed = true;
            break;
        }
        visit_stages[s].push(stage);
        let a = sample_index(rng, &profile.x[s]);
        let b = match (stage, forced_b) {
            (0, Some(fb)) => fb,
            _ => sample_index(rng, &profile.y[s]),
        };
        steps.push((s, a, b));
        s = sample_index(rng, spec.row(s, a, b));
    }
    if spec.is_absorbing(s) {
        absorbed = true;
    }
    SimulationTrace {
        steps,
        visit_stages,
        payoff2: if absorbed { spec.payoff(2, s) } else { 0.0 },
        absorbed,
    }
}

/// Smallest horizon at which the worst-case non-absorption mass drops
/// below `tail`, found by iterating the substochastic interior block.
pub fn certified_horizon(analysis: &ChainAnalysis, tail: f64) -> Result<usize> {
    if !analysis.is_absorbing_chain {
        return Err(Error::NotAbsorbing(
            analysis.trapped_class.clone().unwrap_or_default(),
        ));
    }
    let interior = analysis.chain.non_absorbing_states();
    if interior.is_empty() {
        return Ok(1);
    }
    let mut mass = vec![1.0; interior.len()];
    let mut horizon = 0usize;
    let cap = 10_000_000usize;
    while mass.iter().cloned().fold(0.0, f64::max) > tail {
        let mut next = vec![0.0; interior.len()];
        for (i, &u) in interior.iter().enumerate() {
            next[i] = interior
                .iter()
                .enumerate()
                .map(|(j, &v)| analysis.chain.row(u)[v] * mass[j])
                .sum();
        }
        mass = next;
        horizon += 1;
        if horizon > cap {
            return Err(Error::NonConvergence(
                "horizon search exceeded its budget".to_string(),
            ));
        }
    }
    Ok(horizon.max(1))
}

/// Monte-Carlo estimate of the path-expectation form of `xi^b`.
#[derive(Debug, Clone, Copy)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    /// 99% confidence halfwidth, including the certified truncation
    /// tail.
    pub halfwidth: f64,
    pub tail_bound: f64,
    pub runs: usize,
    pub horizon: usize,
}

/// Samples the discounted path evaluation of move `b` at state `s`:
/// each run weights the realized payoff by the visit-indexed product
/// of complement rates and per-return discounts.
pub fn xi_monte_carlo(
    spec: &GameSpec,
    profile: &StrategyProfile,
    s: usize,
    b: usize,
    params: &AuxParams,
    runs: usize,
    horizon: Option<usize>,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    let chain = crate::game::induce_chain(spec, profile)?;
    let analysis = ChainAnalysis::new(&chain);
    let eval = xi_values(&analysis, &spec.boundary(2), params)?;
    let aux = eval
        .state(s)
        .ok_or_else(|| Error::InvalidParameter("xi of an absorbing state".to_string()))?;
    let g_bar: Vec<f64> = aux.moves.iter().map(|mv| mv.g_bar).collect();
    let log_w = eval.log_w_tilde[s].unwrap();
    let d = if params.delta == 0.0 {
        0.0
    } else {
        (params.delta.ln() - log_w).exp()
    };
    let tail_bound = 1e-4;
    let horizon = match horizon {
        Some(h) => h,
        None => certified_horizon(&analysis, tail_bound)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..runs {
        let trace = sample_trace(spec, profile, s, Some(b), horizon, &mut rng);
        // Bracket over the visits to s: each return discounts by
        // (1 - d)(1 - g_bar of the move used).
        let mut bracket_sum = 0.0;
        let mut prefix = 1.0;
        let visits = &trace.visit_stages[s];
        for (i, &stage) in visits.iter().enumerate() {
            let (_, _, bv) = trace.steps[stage];
            if i + 1 < visits.len() {
                bracket_sum += g_bar[bv] * prefix;
                prefix *= (1.0 - d) * (1.0 - g_bar[bv]);
            }
        }
        bracket_sum += prefix;
        let value = trace.payoff2 * bracket_sum;
        sum += value;
        sum_sq += value * value;
    }
    let mean = sum / runs as f64;
    let var = (sum_sq / runs as f64 - mean * mean).max(0.0);
    let halfwidth = 2.576 * (var / runs as f64).sqrt() + tail_bound;
    Ok(MonteCarloEstimate {
        estimate: mean,
        halfwidth,
        tail_bound,
        runs,
        horizon,
    })
}

/// One ordering-implication violation.
#[derive(Debug, Clone, Copy)]
pub struct MonotonicityViolation {
    pub s: usize,
    pub t: usize,
    /// Which implication failed: 0 for the weight ordering, 1 for the
    /// xi comparison.
    pub which: usize,
    pub lhs: f64,
    pub rhs: f64,
}

/// Report of the two ordering implications across all state pairs.
#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub pairs_checked: usize,
    pub violations: Vec<MonotonicityViolation>,
    pub holds: bool,
}

/// Checks both implications on every ordered pair of interior states:
/// rates within the cutoff keep the weighted-rate order, and a
/// weighted-rate comparison transfers to `xi` up to `gamma + delta`.
pub fn xi_monotonicity_check(eval: &AuxEvaluation, gamma: f64) -> MonotonicityReport {
    let n = eval.xi.len();
    let interior: Vec<usize> = (0..n).filter(|&s| eval.xi[s].is_some()).collect();
    let log_k = eval.params.log_k(interior.len());
    let mut violations = Vec::new();
    let mut pairs_checked = 0;
    for &s in &interior {
        for &t in &interior {
            if s == t {
                continue;
            }
            pairs_checked += 1;
            let (a_s, a_t) = (
                eval.state(s).unwrap().a_tilde,
                eval.state(t).unwrap().a_tilde,
            );
            let (lw_s, lw_t) = (eval.log_w_tilde[s].unwrap(), eval.log_w_tilde[t].unwrap());
            let wa_s = lw_s + a_s.ln();
            let wa_t = lw_t + a_t.ln();
            if a_t.ln() <= log_k + a_s.ln() + 1e-12 && wa_t > wa_s + 1e-9 {
                violations.push(MonotonicityViolation {
                    s,
                    t,
                    which: 0,
                    lhs: wa_t,
                    rhs: wa_s,
                });
            }
            let (r2_s, r2_t) = (eval.state(s).unwrap().r2, eval.state(t).unwrap().r2);
            let (xi_s, xi_t) = (eval.xi[s].unwrap(), eval.xi[t].unwrap());
            if wa_s <= wa_t + 1e-12
                && r2_s <= r2_t + gamma
                && xi_s > xi_t + gamma + eval.params.delta + 1e-9
            {
                violations.push(MonotonicityViolation {
                    s,
                    t,
                    which: 1,
                    lhs: xi_s,
                    rhs: xi_t + gamma + eval.params.delta,
                });
            }
        }
    }
    MonotonicityReport {
        pairs_checked,
        holds: violations.is_empty(),
        violations,
    }
}

/// The parameter cascade of the full construction, derived in log
/// space. Desk-scale studies run with far looser values; this struct
/// records what the stated bounds would demand and whether they are
/// numerically representable.
#[derive(Debug, Clone, Copy)]
pub struct PaperRegime {
    pub eps: f64,
    pub alpha: f64,
    /// Upper bound for `eps_bar`: `eps^3 / (50 |N|)`, also capped by
    /// `omega alpha / 4`.
    pub eps_bar_max: f64,
    /// `ln` of the upper bound for `eps_hat`.
    pub log_eps_hat_max: f64,
    /// `ln` of the upper bound for `eps_tilde`.
    pub log_eps_tilde_max: f64,
    /// `ln beta`.
    pub log_beta: f64,
    /// `ln` of the lower bounds for `Q1` and `Q2`.
    pub log_q1_min: f64,
    pub log_q2_min: f64,
    /// Jump-regime constants: minimal `L` and maximal `delta`.
    pub l_star: f64,
    pub delta_star: f64,
    /// Certificate budget `eps^3 / (n M)` with `M = 1`.
    pub certificate_delta_max: f64,
    /// Whether the `Q1` lower bound fits in an `f64` exponent.
    pub desk_feasible: bool,
}

impl PaperRegime {
    /// Derives every constant from the game dimensions and the chosen
    /// `eps`, `alpha`.
    pub fn derive(spec: &GameSpec, eps: f64, alpha: f64) -> PaperRegime {
        let n_int = spec.non_absorbing().len().max(1) as f64;
        let n_all = spec.num_states() as f64;
        let m = spec.m() as f64;
        let rho = spec.rho();
        let omega = spec.omega();
        let eps_bar_max = (eps.powi(3) / (50.0 * n_int)).min(omega * alpha / 4.0);
        let log_eb = eps_bar_max.ln();
        // eps_hat below eps_bar^(3|N|+1) / (5 (3|N|)^{|N|} |N|).
        let log_eps_hat_max = (3.0 * n_int + 1.0) * log_eb
            - (5.0f64.ln() + n_int * (3.0 * n_int).ln() + n_int.ln());
        // eps_tilde below eps_bar eps_hat / (40 |N|).
        let log_eps_tilde_max = log_eb + log_eps_hat_max - (40.0 * n_int).ln();
        // beta = eps_tilde eps_hat^{|N|} / (2 3^{|N|} |N|).
        let log_beta = log_eps_tilde_max + n_int * log_eps_hat_max
            - (2.0f64.ln() + n_int * 3.0f64.ln() + n_int.ln());
        let log_q1_min = (80.0 * n_int.powi(3) * m * m).ln()
            - (rho.ln()
                + 2.0 * log_eb
                + 2.0 * log_eps_hat_max
                + 2.0 * log_eps_tilde_max
                + 2.0 * log_beta);
        let log_q2_min =
            (80.0 * m * n_int).ln() - (rho.ln() + log_eb + log_eps_hat_max + log_eps_tilde_max);
        let l_star = 100.0 * n_int / (omega * omega * alpha * alpha * eps_bar_max);
        let delta_star = eps_bar_max * alpha.powi(3) * omega.powi(3) / (300.0 * n_int);
        PaperRegime {
            eps,
            alpha,
            eps_bar_max,
            log_eps_hat_max,
            log_eps_tilde_max,
            log_beta,
            log_q1_min,
            log_q2_min,
            l_star,
            delta_star,
            certificate_delta_max: eps.powi(3) / n_all,
            desk_feasible: log_q1_min < 700.0,
        }
    }
}
