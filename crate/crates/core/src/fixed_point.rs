//! Best-reply correspondences and the search for their fixed points.
//!
//! Player One best-replies by maximizing her undiscounted payoff;
//! Player Two maximizes the state-specific discounted evaluation while
//! it stays above his discounted jump level, and falls back to the
//! jump correspondence when it drops below. A fixed point of the
//! combined correspondence is searched for by damped iteration with
//! random restarts, with an exhaustive grid fallback on very small
//! games.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::aux_eval::{xi_values, AuxEvaluation, AuxParams, PaperRegime};
use crate::chain::ChainAnalysis;
use crate::error::Result;
use crate::game::{induce_chain, GameSpec, StrategyProfile};
use crate::zerosum::{jump_function, JumpTables, ZeroSumTables};

/// Which branch of the Player Two correspondence applied at a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyCase {
    /// The evaluation clears the jump level: maximize it.
    EvalAbove,
    /// Within the equality band: union of both sets.
    Boundary,
    /// Evaluation below the jump level: jump correspondence only.
    JumpOnly,
}

/// Best-reply sets of both players at a profile.
#[derive(Debug, Clone)]
pub struct BestReplySets {
    /// Player One argmax sets of the one-stage undiscounted value.
    pub p1: Vec<Vec<usize>>,
    /// Player Two sets per the three-branch rule.
    pub p2: Vec<Vec<usize>>,
    /// Branch taken per state (`None` at absorbing states).
    pub p2_case: Vec<Option<ReplyCase>>,
    /// One-stage values behind the Player One argmax.
    pub w1: Vec<Vec<f64>>,
    /// The xi evaluation when the profile was absorbing.
    pub eval: Option<AuxEvaluation>,
    pub jumps: JumpTables,
    pub profile_absorbing: bool,
    /// Trapped recurrent class when the profile is not absorbing.
    pub trapped: Option<Vec<usize>>,
}

/// Tolerances of the correspondence.
#[derive(Debug, Clone, Copy)]
pub struct ReplyTolerances {
    /// Argmax tie tolerance.
    pub tie: f64,
    /// Equality band between the evaluation and the jump level.
    pub band: f64,
}

impl Default for ReplyTolerances {
    fn default() -> Self {
        ReplyTolerances {
            tie: crate::TIE_TOL,
            band: 1e-7,
        }
    }
}

fn argmax_set(values: &[f64], tie: f64) -> Vec<usize> {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= best - tie)
        .map(|(i, _)| i)
        .collect()
}

/// Computes both players' best-reply sets at a profile.
///
/// For a non-absorbing profile the Player Two side degrades to the
/// jump correspondence alone and the trapped class is flagged; Player
/// One's values then use the recursive (zero-on-non-absorption)
/// evaluation.
pub fn best_reply(
    spec: &GameSpec,
    profile: &StrategyProfile,
    tables: &ZeroSumTables,
    params: &AuxParams,
    tol: &ReplyTolerances,
) -> Result<BestReplySets> {
    profile.validate(spec)?;
    let chain = induce_chain(spec, profile)?;
    let analysis = ChainAnalysis::new(&chain);
    let jumps = jump_function(spec, profile, tables)?;
    let r1 = analysis.recursive_values(&spec.boundary(1));
    let n = spec.num_states();
    let mut p1 = vec![Vec::new(); n];
    let mut w1 = vec![Vec::new(); n];
    for s in 0..n {
        if spec.is_absorbing(s) {
            p1[s] = vec![0];
            w1[s] = vec![spec.payoff(1, s)];
            continue;
        }
        let (na, _) = spec.action_counts(s);
        let values: Vec<f64> = (0..na)
            .map(|a| {
                spec.row_vs_y(s, a, &profile.y[s])
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| p * r1[t])
                    .sum()
            })
            .collect();
        p1[s] = argmax_set(&values, tol.tie);
        w1[s] = values;
    }
    let eval = if analysis.is_absorbing_chain {
        Some(xi_values(&analysis, &spec.boundary(2), params)?)
    } else {
        None
    };
    let mut p2 = vec![Vec::new(); n];
    let mut p2_case = vec![None; n];
    for s in 0..n {
        if spec.is_absorbing(s) {
            p2[s] = vec![0];
            continue;
        }
        match &eval {
            None => {
                p2[s] = jumps.jump_set[s].clone();
                p2_case[s] = Some(ReplyCase::JumpOnly);
            }
            Some(eval) => {
                let xi = eval.xi[s].unwrap();
                let j = jumps.j_alpha[s];
                let maximizers = argmax_set(&eval.xi_moves[s], tol.tie);
                if xi > j + tol.band {
                    p2[s] = maximizers;
                    p2_case[s] = Some(ReplyCase::EvalAbove);
                } else if xi >= j - tol.band {
                    let mut set = jumps.jump_set[s].clone();
                    for b in maximizers {
                        if !set.contains(&b) {
                            set.push(b);
                        }
                    }
                    set.sort_unstable();
                    p2[s] = set;
                    p2_case[s] = Some(ReplyCase::Boundary);
                } else {
                    p2[s] = jumps.jump_set[s].clone();
                    p2_case[s] = Some(ReplyCase::JumpOnly);
                }
            }
        }
    }
    Ok(BestReplySets {
        p1,
        p2,
        p2_case,
        w1,
        eval,
        jumps,
        profile_absorbing: analysis.is_absorbing_chain,
        trapped: analysis.trapped_class.clone(),
    })
}

/// Mass the profile places outside the tolerance-inflated best-reply
/// sets, maximized over players and states.
pub fn reply_residual(
    spec: &GameSpec,
    profile: &StrategyProfile,
    replies: &BestReplySets,
    inflate: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..spec.num_states() {
        if spec.is_absorbing(s) {
            continue;
        }
        let inflated1 = argmax_set(&replies.w1[s], inflate);
        let outside1: f64 = profile.x[s]
            .iter()
            .enumerate()
            .filter(|(a, _)| !inflated1.contains(a))
            .map(|(_, &p)| p)
            .sum();
        worst = worst.max(outside1);
        let inflated2: Vec<usize> = match (&replies.eval, replies.p2_case[s]) {
            (Some(eval), Some(ReplyCase::EvalAbove)) => {
                argmax_set(&eval.xi_moves[s], inflate)
            }
            (Some(eval), Some(ReplyCase::Boundary)) => {
                let mut set = replies.jumps.jump_set[s].clone();
                for b in argmax_set(&eval.xi_moves[s], inflate) {
                    if !set.contains(&b) {
                        set.push(b);
                    }
                }
                set
            }
            _ => replies.jumps.jump_set[s].clone(),
        };
        let outside2: f64 = profile.y[s]
            .iter()
            .enumerate()
            .filter(|(b, _)| !inflated2.contains(b))
            .map(|(_, &p)| p)
            .sum();
        worst = worst.max(outside2);
    }
    worst
}

/// Solver configuration for the fixed-point search.
#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub damping_init: f64,
    pub restarts: usize,
    pub max_iters: usize,
    /// Residual at which a candidate is accepted.
    pub tol: f64,
    /// Inflation tolerance defining the residual.
    pub inflate: f64,
    /// Mass below which an action is snapped to zero.
    pub snap: f64,
    pub seed: u64,
    /// Exhaustive simplex-grid fallback on very small games.
    pub grid_fallback: bool,
    pub grid_resolution: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            damping_init: 0.5,
            restarts: 16,
            max_iters: 400,
            tol: 1e-6,
            inflate: 1e-7,
            snap: 1e-9,
            seed: 0,
            grid_fallback: true,
            grid_resolution: 64,
        }
    }
}

/// A located (approximate) fixed point.
#[derive(Debug, Clone)]
pub struct FixedPointCandidate {
    pub profile: StrategyProfile,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub restarts_used: usize,
    pub used_grid: bool,
}

fn damped_step(dist: &mut [f64], target_set: &[usize], eta: f64) {
    if target_set.is_empty() {
        return;
    }
    let share = eta / target_set.len() as f64;
    for p in dist.iter_mut() {
        *p *= 1.0 - eta;
    }
    for &i in target_set {
        dist[i] += share;
    }
}

/// Moves all mass onto the reply sets (dropping outside mass
/// entirely) wherever the profile already has some mass there.
fn snap_to_support(
    profile: &StrategyProfile,
    replies: &BestReplySets,
) -> StrategyProfile {
    let mut out = profile.clone();
    for s in 0..profile.x.len() {
        for (dist, set) in [
            (&mut out.x[s], &replies.p1[s]),
            (&mut out.y[s], &replies.p2[s]),
        ] {
            let inside: f64 = set.iter().map(|&i| dist[i]).sum();
            if inside > 0.0 {
                for (i, p) in dist.iter_mut().enumerate() {
                    *p = if set.contains(&i) { *p / inside } else { 0.0 };
                }
            }
        }
    }
    out
}

fn snap_profile(profile: &StrategyProfile, snap: f64) -> StrategyProfile {
    let mut out = profile.clone();
    for dists in [&mut out.x, &mut out.y] {
        for dist in dists.iter_mut() {
            for p in dist.iter_mut() {
                if *p < snap {
                    *p = 0.0;
                }
            }
            let sum: f64 = dist.iter().sum();
            if sum > 0.0 {
                for p in dist.iter_mut() {
                    *p /= sum;
                }
            }
        }
    }
    out
}

/// Searches for an approximate fixed point of the best-reply
/// correspondence by damped iteration with restarts; never silent on
/// non-convergence — the best candidate and its residual are always
/// returned.
pub fn find_fixed_point(
    spec: &GameSpec,
    tables: &ZeroSumTables,
    params: &AuxParams,
    settings: &SolverSettings,
) -> Result<FixedPointCandidate> {
    let tol = ReplyTolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut best: Option<FixedPointCandidate> = None;
    let consider = |candidate: FixedPointCandidate, best: &mut Option<FixedPointCandidate>| {
        let better = match best {
            None => true,
            Some(current) => candidate.residual < current.residual,
        };
        if better {
            *best = Some(candidate);
        }
    };
    for restart in 0..settings.restarts.max(1) {
        let mut profile = if restart == 0 {
            StrategyProfile::uniform(spec)
        } else {
            crate::fixtures::random_profile(&mut rng, spec)
        };
        let mut eta = settings.damping_init;
        for iter in 0..settings.max_iters {
            let replies = best_reply(spec, &profile, tables, params, &tol)?;
            let residual = reply_residual(spec, &profile, &replies, settings.inflate);
            let mut cand_profile = profile.clone();
            let mut cand_residual = residual;
            // Candidate variants: small-mass snap, and (near
            // convergence) a full snap onto the reply support.
            let mut variants = Vec::new();
            let snapped = snap_profile(&profile, settings.snap);
            if snapped != profile {
                variants.push(snapped);
            }
            if residual <= 0.01 {
                let supported = snap_to_support(&profile, &replies);
                if supported != profile {
                    variants.push(supported);
                }
            }
            for variant in variants {
                let variant_replies = best_reply(spec, &variant, tables, params, &tol)?;
                let variant_residual =
                    reply_residual(spec, &variant, &variant_replies, settings.inflate);
                if variant_residual < cand_residual {
                    cand_profile = variant;
                    cand_residual = variant_residual;
                }
            }
            let converged = cand_residual <= settings.tol;
            consider(
                FixedPointCandidate {
                    profile: cand_profile,
                    residual: cand_residual,
                    converged,
                    iterations: iter,
                    restarts_used: restart + 1,
                    used_grid: false,
                },
                &mut best,
            );
            if converged {
                return Ok(best.unwrap());
            }
            for s in 0..spec.num_states() {
                if spec.is_absorbing(s) {
                    continue;
                }
                damped_step(&mut profile.x[s], &replies.p1[s], eta);
                damped_step(&mut profile.y[s], &replies.p2[s], eta);
            }
            eta = (eta * 0.99).max(0.05);
        }
    }
    if settings.grid_fallback {
        if let Some(candidate) = grid_search(spec, tables, params, settings)? {
            let better = best
                .as_ref()
                .map(|b| candidate.residual < b.residual)
                .unwrap_or(true);
            if better {
                best = Some(candidate);
            }
        }
    }
    Ok(best.expect("at least one candidate is always produced"))
}

/// Simplex grid over `k` entries with denominator `d`.
fn simplex_grid(k: usize, d: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, d: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            let mut full = prefix.clone();
            full.push(d);
            out.push(full);
            return;
        }
        for i in 0..=d {
            prefix.push(i);
            rec(k - 1, d - i, prefix, out);
            prefix.pop();
        }
    }
    let mut raw = Vec::new();
    rec(k, d, &mut Vec::new(), &mut raw);
    raw.into_iter()
        .map(|counts| counts.iter().map(|&c| c as f64 / d as f64).collect())
        .collect()
}

/// Exhaustive profile-grid search for very small games (at most two
/// non-absorbing states, at most three actions per side).
fn grid_search(
    spec: &GameSpec,
    tables: &ZeroSumTables,
    params: &AuxParams,
    settings: &SolverSettings,
) -> Result<Option<FixedPointCandidate>> {
    let interior = spec.non_absorbing();
    if interior.len() > 2 {
        return Ok(None);
    }
    let tol = ReplyTolerances::default();
    let mut axes: Vec<(usize, usize, Vec<Vec<f64>>)> = Vec::new(); // (player, state, grid)
    let mut total: f64 = 1.0;
    for &s in &interior {
        let (na, nb) = spec.action_counts(s);
        if na > 3 || nb > 3 {
            return Ok(None);
        }
        let gx = simplex_grid(na, settings.grid_resolution);
        let gy = simplex_grid(nb, settings.grid_resolution);
        total *= gx.len() as f64 * gy.len() as f64;
        axes.push((1, s, gx));
        axes.push((2, s, gy));
    }
    if total > 3e5 {
        return Ok(None);
    }
    let mut profile = StrategyProfile::uniform(spec);
    let mut best: Option<(f64, StrategyProfile)> = None;
    let mut index = vec![0usize; axes.len()];
    loop {
        for (pos, (player, s, grid)) in axes.iter().enumerate() {
            let dist = grid[index[pos]].clone();
            if *player == 1 {
                profile.x[*s] = dist;
            } else {
                profile.y[*s] = dist;
            }
        }
        let replies = best_reply(spec, &profile, tables, params, &tol)?;
        let residual = reply_residual(spec, &profile, &replies, settings.inflate);
        let better = best.as_ref().map(|(r, _)| residual < *r).unwrap_or(true);
        if better {
            best = Some((residual, profile.clone()));
        }
        // Advance the product index.
        let mut pos = 0;
        loop {
            if pos == axes.len() {
                let (residual, profile) = best.unwrap();
                return Ok(Some(FixedPointCandidate {
                    converged: residual <= settings.tol,
                    profile,
                    residual,
                    iterations: 0,
                    restarts_used: 0,
                    used_grid: true,
                }));
            }
            index[pos] += 1;
            if index[pos] < axes[pos].2.len() {
                break;
            }
            index[pos] = 0;
            pos += 1;
        }
    }
}

/// One margin line of the candidate diagnosis.
#[derive(Debug, Clone)]
pub struct DiagnosisEntry {
    pub name: String,
    pub state: usize,
    pub margin: f64,
    pub holds: bool,
}

/// Diagnosis of a fixed-point candidate against the fixed-point
/// structure results: absorption, jump-level domination, limited jump
/// usage, and the small-rate bounds.
#[derive(Debug, Clone)]
pub struct DiagnosisReport {
    pub absorbing: bool,
    /// `r2(s) >= j_alpha(s) - tol` per state.
    pub value_dominates_jump: Vec<DiagnosisEntry>,
    /// `xi(s) >= j_alpha(s) - tol` per state.
    pub eval_dominates_jump: Vec<DiagnosisEntry>,
    /// Where jump moves carry mass: `xi <= r2 - 3 eps_bar` and
    /// `g^b < eps_bar`.
    pub jump_usage: Vec<DiagnosisEntry>,
    /// Per-state jump mass against `omega alpha / 20`.
    pub jump_mass: Vec<DiagnosisEntry>,
    /// Small-rate bounds where `xi <= r2 - 2 eps_bar` and
    /// `g^b <= eps_bar`.
    pub small_rate: Vec<DiagnosisEntry>,
    /// Minimal `L` and maximal `delta` of the stated regime, and
    /// whether the supplied parameters satisfy them.
    pub l_star: f64,
    pub delta_star: f64,
    pub paper_regime: bool,
    pub all_hold: bool,
}

/// Runs all candidate checks with slack `tol`, reporting margins.
pub fn diagnose_candidate(
    spec: &GameSpec,
    candidate: &FixedPointCandidate,
    tables: &ZeroSumTables,
    params: &AuxParams,
    tol: f64,
) -> Result<DiagnosisReport> {
    let profile = &candidate.profile;
    let replies = best_reply(spec, profile, tables, params, &ReplyTolerances::default())?;
    let chain = induce_chain(spec, profile)?;
    let analysis = ChainAnalysis::new(&chain);
    let absorbing = analysis.is_absorbing_chain;
    let mut all_hold = absorbing;
    let mut value_dominates_jump = Vec::new();
    let mut eval_dominates_jump = Vec::new();
    let mut jump_usage = Vec::new();
    let mut jump_mass = Vec::new();
    let mut small_rate = Vec::new();
    let omega_alpha = spec.omega() * tables.alpha;
    if absorbing {
        let r2 = analysis.harmonic_payoffs(&spec.boundary(2))?;
        let eval = replies.eval.as_ref().expect("absorbing profile has an evaluation");
        for s in spec.non_absorbing() {
            let j = replies.jumps.j_alpha[s];
            let margin = r2[s] - (j - tol);
            all_hold &= margin >= 0.0;
            value_dominates_jump.push(DiagnosisEntry {
                name: "r2 >= j - tol".into(),
                state: s,
                margin,
                holds: margin >= 0.0,
            });
            let xi = eval.xi[s].unwrap();
            let margin = xi - (j - tol);
            all_hold &= margin >= 0.0;
            eval_dominates_jump.push(DiagnosisEntry {
                name: "xi >= j - tol".into(),
                state: s,
                margin,
                holds: margin >= 0.0,
            });
            let aux = eval.state(s).unwrap();
            let mass: f64 = replies.jumps.jump_set[s]
                .iter()
                .map(|&b| profile.y[s][b])
                .sum();
            let jump_active = replies.p2_case[s] != Some(ReplyCase::EvalAbove) && mass > 0.0;
            if jump_active {
                let margin = (r2[s] - 3.0 * params.eps_bar + tol) - xi;
                jump_usage.push(DiagnosisEntry {
                    name: "xi <= r2 - 3 eps_bar".into(),
                    state: s,
                    margin,
                    holds: margin >= 0.0,
                });
                for &b in &replies.jumps.jump_set[s] {
                    if profile.y[s][b] > 0.0 {
                        let margin = params.eps_bar - aux.moves[b].g;
                        jump_usage.push(DiagnosisEntry {
                            name: format!("g^b < eps_bar (b={b})"),
                            state: s,
                            margin,
                            holds: margin > 0.0,
                        });
                    }
                }
                let margin = omega_alpha / 20.0 + tol - mass;
                jump_mass.push(DiagnosisEntry {
                    name: "jump mass <= omega alpha / 20".into(),
                    state: s,
                    margin,
                    holds: margin >= 0.0,
                });
            }
            if xi <= r2[s] - 2.0 * params.eps_bar {
                let w_tilde = eval.w_tilde(s).unwrap();
                for mv in &aux.moves {
                    if mv.weight > 0.0 && mv.g <= params.eps_bar {
                        let bound1 = 1.1 * params.delta * xi / w_tilde;
                        small_rate.push(DiagnosisEntry {
                            name: format!("g^b <= 1.1 delta xi / w~ (b={})", mv.b),
                            state: s,
                            margin: bound1 + tol - mv.g,
                            holds: mv.g <= bound1 + tol,
                        });
                        let bound2 = 2.3 * params.eps_bar * aux.a_tilde;
                        small_rate.push(DiagnosisEntry {
                            name: format!("g^b <= 2.3 eps_bar a~ (b={})", mv.b),
                            state: s,
                            margin: bound2 + tol - mv.g,
                            holds: mv.g <= bound2 + tol,
                        });
                    }
                }
            }
        }
    }
    let regime = PaperRegime::derive(spec, 0.1, tables.alpha);
    let l = params.q1 * params.q2;
    let l_star = regime.l_star;
    let delta_star = regime.delta_star;
    let paper_regime = l >= l_star && params.delta <= delta_star && params.delta > 0.0;
    for entry in jump_usage.iter().chain(&jump_mass).chain(&small_rate) {
        all_hold &= entry.holds;
    }
    Ok(DiagnosisReport {
        absorbing,
        value_dominates_jump,
        eval_dominates_jump,
        jump_usage,
        jump_mass,
        small_rate,
        l_star,
        delta_star,
        paper_regime,
        all_hold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::zerosum::discounted_values;

    fn default_params() -> AuxParams {
        AuxParams::new(0.05, 1e-4, 40.0, 40.0).unwrap()
    }

    #[test]
    fn g1_best_reply_picks_absorb() {
        let g1 = fixtures::g1();
        let tables = discounted_values(&g1, 0.1, 1e-10).unwrap();
        let params = default_params();
        let replies = best_reply(
            &g1,
            &fixtures::g1_profile(0.5),
            &tables,
            &params,
            &ReplyTolerances::default(),
        )
        .unwrap();
        assert!(replies.profile_absorbing);
        assert_eq!(replies.p2[0], vec![0]);
        assert_eq!(replies.p2_case[0], Some(ReplyCase::EvalAbove));
        assert_eq!(replies.p1[0], vec![0]);
    }

    #[test]
    fn single_action_states_reply_trivially() {
        let (spec, profile) = fixtures::g2_as_game();
        let tables = discounted_values(&spec, 0.1, 1e-10).unwrap();
        let replies = best_reply(
            &spec,
            &profile,
            &tables,
            &default_params(),
            &ReplyTolerances::default(),
        )
        .unwrap();
        for s in spec.non_absorbing() {
            assert_eq!(replies.p1[s], vec![0]);
            assert_eq!(replies.p2[s], vec![0]);
        }
    }

    #[test]
    fn non_absorbing_profile_degrades_to_jump() {
        let g1 = fixtures::g1();
        let tables = discounted_values(&g1, 0.1, 1e-10).unwrap();
        let replies = best_reply(
            &g1,
            &fixtures::g1_profile(0.0),
            &tables,
            &default_params(),
            &ReplyTolerances::default(),
        )
        .unwrap();
        assert!(!replies.profile_absorbing);
        assert_eq!(replies.trapped, Some(vec![0]));
        assert_eq!(replies.p2_case[0], Some(ReplyCase::JumpOnly));
        assert_eq!(replies.p2[0], vec![0]);
    }

    #[test]
    fn g1_fixed_point_is_pure_absorb() {
        let g1 = fixtures::g1();
        let tables = discounted_values(&g1, 0.1, 1e-10).unwrap();
        let settings = SolverSettings {
            restarts: 2,
            ..Default::default()
        };
        let candidate =
            find_fixed_point(&g1, &tables, &default_params(), &settings).unwrap();
        assert!(candidate.converged);
        assert_eq!(candidate.residual, 0.0);
        assert_eq!(candidate.profile.y[0], vec![1.0, 0.0]);
    }

    #[test]
    fn flat_game_accepts_initial_profile() {
        let spec = fixtures::flat_game(0.2, 0.7);
        let tables = discounted_values(&spec, 0.1, 1e-10).unwrap();
        let settings = SolverSettings::default();
        let candidate =
            find_fixed_point(&spec, &tables, &default_params(), &settings).unwrap();
        assert!(candidate.converged);
        assert_eq!(candidate.iterations, 0);
        // Uniform start is already a fixed point.
        assert_eq!(candidate.profile.x[0], vec![0.5, 0.5]);
    }

    #[test]
    fn two_state_game_converges() {
        let spec = fixtures::g2_choice_game();
        let tables = discounted_values(&spec, 0.1, 1e-10).unwrap();
        let candidate = find_fixed_point(
            &spec,
            &tables,
            &default_params(),
            &SolverSettings::default(),
        )
        .unwrap();
        assert!(candidate.converged, "residual {}", candidate.residual);
        assert!(candidate.residual <= 1e-6);
        // Travel at s (toward the richer absorption), absorb at t.
        assert!(candidate.profile.y[0][1] > 0.99);
        assert!(candidate.profile.y[1][0] > 0.99);
    }

    #[test]
    fn scale_shift_keeps_p1_argmax() {
        let mut rng = fixtures::rng(71);
        let spec = fixtures::random_game(&mut rng, 3, 2, 3);
        let profile = fixtures::random_profile(&mut rng, &spec);
        let tables = discounted_values(&spec, 0.2, 1e-10).unwrap();
        let replies = best_reply(
            &spec,
            &profile,
            &tables,
            &default_params(),
            &ReplyTolerances::default(),
        )
        .unwrap();
        // Shift every absorbing r1 by a constant via a shifted game.
        let shift = 0.2;
        let mut states = spec.states().to_vec();
        for st in states.iter_mut() {
            if let crate::game::StateKind::Absorbing(p) = &mut st.kind {
                p.r1 += shift;
            }
        }
        let mut transition = Vec::new();
        for s in 0..spec.num_states() {
            let (na, nb) = spec.action_counts(s);
            let mut tables_s = Vec::new();
            for a in 0..na {
                let mut cols = Vec::new();
                for b in 0..nb {
                    cols.push(spec.row(s, a, b).to_vec());
                }
                tables_s.push(cols);
            }
            transition.push(tables_s);
        }
        let shifted = GameSpec::new(states, transition, spec.omega()).unwrap();
        let replies_shifted = best_reply(
            &shifted,
            &profile,
            &tables,
            &default_params(),
            &ReplyTolerances::default(),
        )
        .unwrap();
        for s in spec.non_absorbing() {
            assert_eq!(replies.p1[s], replies_shifted.p1[s], "state {s}");
        }
    }

    #[test]
    fn diagnose_g1_candidate_passes() {
        let g1 = fixtures::g1();
        let tables = discounted_values(&g1, 0.1, 1e-10).unwrap();
        let params = default_params();
        let candidate =
            find_fixed_point(&g1, &tables, &params, &SolverSettings::default()).unwrap();
        let report = diagnose_candidate(&g1, &candidate, &tables, &params, 1e-7).unwrap();
        assert!(report.absorbing);
        assert!(report.all_hold, "{report:?}");
        assert!(report.jump_usage.is_empty());
        assert!(!report.paper_regime);
    }

    #[test]
    fn diagnose_flags_non_absorbing() {
        let g1 = fixtures::g1();
        let tables = discounted_values(&g1, 0.1, 1e-10).unwrap();
        let params = default_params();
        let candidate = FixedPointCandidate {
            profile: fixtures::g1_profile(0.0),
            residual: 1.0,
            converged: false,
            iterations: 0,
            restarts_used: 0,
            used_grid: false,
        };
        let report = diagnose_candidate(&g1, &candidate, &tables, &params, 1e-7).unwrap();
        assert!(!report.absorbing);
        assert!(!report.all_hold);
    }

    #[test]
    fn matching_pennies_uniform_is_fixed() {
        let spec = fixtures::matching_pennies_game();
        let tables = discounted_values(&spec, 0.1, 1e-10).unwrap();
        let settings = SolverSettings {
            restarts: 1,
            max_iters: 40,
            ..Default::default()
        };
        let candidate =
            find_fixed_point(&spec, &tables, &default_params(), &settings).unwrap();
        assert!(candidate.converged, "residual {}", candidate.residual);
        assert!((candidate.profile.x[0][0] - 0.5).abs() < 1e-9);
        assert!((candidate.profile.y[0][0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn grid_fallback_finds_off_uniform_mixture() {
        let spec = fixtures::biased_pennies_game();
        let tables = discounted_values(&spec, 0.1, 1e-10).unwrap();
        let settings = SolverSettings {
            restarts: 2,
            max_iters: 60,
            ..Default::default()
        };
        let candidate =
            find_fixed_point(&spec, &tables, &default_params(), &settings).unwrap();
        assert!(candidate.converged, "residual {}", candidate.residual);
        assert!(candidate.used_grid);
        assert!((candidate.profile.x[0][0] - 0.25).abs() < 1e-9);
        assert!((candidate.profile.y[0][0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn no_grid_reports_nonconvergence() {
        let spec = fixtures::biased_pennies_game();
        let tables = discounted_values(&spec, 0.1, 1e-10).unwrap();
        let settings = SolverSettings {
            restarts: 1,
            max_iters: 10,
            grid_fallback: false,
            ..Default::default()
        };
        let candidate =
            find_fixed_point(&spec, &tables, &default_params(), &settings).unwrap();
        assert!(!candidate.converged);
        assert!(candidate.residual > 1e-6);
    }
}
