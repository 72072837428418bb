//! Equilibrium certification.
//!
//! The certificate route checks the two stationary-profile conditions
//! (values dominate the jump levels up to `eps`; one-stage move values
//! stay within the `eps^3/(n M)` budget of the state values) and, when
//! they hold, the profile generates a `4 eps`-equilibrium backed by a
//! test-and-punish construction. The simulation and dynamic-program
//! routes probe that construction directly: honest play is punished
//! rarely, and no deviation strategy beats the profile by more than
//! `4 eps` plus statistical slack.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::aux_eval::{certified_horizon, sample_index};
use crate::chain::{Chain, ChainAnalysis};
use crate::error::{Error, Result};
use crate::game::{induce_chain, GameSpec, StrategyProfile};
use crate::zerosum::{undiscounted_value, ZeroSumSide};

/// How a frozen-opponent best response is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum BrMode {
    /// `(1-alpha)`-discounted value iteration.
    Discounted { alpha: f64, tol: f64 },
    /// Expected absorbing payoff with the zero-on-non-absorption
    /// convention.
    Undiscounted,
}

/// A frozen-opponent best response: per-state values and a stationary
/// deterministic policy attaining them.
#[derive(Debug, Clone)]
pub struct BestResponse {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    /// Whether the returned policy absorbs from every state.
    pub absorbing_policy: bool,
    /// "enumeration" or "alpha-schedule".
    pub method: String,
}

/// The one-player transition row of player `k` choosing `c` against
/// the frozen opponent mixture.
fn frozen_row(
    spec: &GameSpec,
    opponent: &[Vec<f64>],
    player: usize,
    s: usize,
    c: usize,
) -> Vec<f64> {
    if player == 1 {
        spec.row_vs_y(s, c, &opponent[s])
    } else {
        spec.row_vs_x(s, &opponent[s], c)
    }
}

fn policy_chain(
    spec: &GameSpec,
    opponent: &[Vec<f64>],
    player: usize,
    policy: &[usize],
) -> Result<Chain> {
    let n = spec.num_states();
    let mut rows = Vec::with_capacity(n);
    for s in 0..n {
        rows.push(frozen_row(spec, opponent, player, s, policy[s]));
    }
    Chain::from_rows(
        spec.states().iter().map(|st| st.name.clone()).collect(),
        (0..n).map(|s| spec.is_absorbing(s)).collect(),
        rows,
    )
}

/// Exact best-response value of `player` against the frozen opponent.
///
/// In undiscounted mode the deterministic stationary policies are
/// enumerated and evaluated exactly when their number is at desk scale,
/// otherwise a vanishing-discount schedule extracts the limiting policy
/// and evaluates it exactly.
pub fn best_response_value(
    spec: &GameSpec,
    opponent: &[Vec<f64>],
    player: usize,
    mode: BrMode,
) -> Result<BestResponse> {
    if player != 1 && player != 2 {
        return Err(Error::InvalidParameter("player must be 1 or 2".into()));
    }
    let n = spec.num_states();
    let boundary = spec.boundary(player);
    match mode {
        BrMode::Discounted { alpha, tol } => {
            if !(0.0 < alpha && alpha < 1.0) {
                return Err(Error::InvalidParameter("alpha outside (0,1)".into()));
            }
            let mut values = boundary.clone();
            let stop = (tol * alpha / (1.0 - alpha)).max(1e-14);
            for _ in 0..10_000_000u64 {
                let mut next = values.clone();
                for s in 0..n {
                    if spec.is_absorbing(s) {
                        continue;
                    }
                    let (na, nb) = spec.action_counts(s);
                    let count = if player == 1 { na } else { nb };
                    next[s] = (0..count)
                        .map(|c| {
                            (1.0 - alpha)
                                * frozen_row(spec, opponent, player, s, c)
                                    .iter()
                                    .enumerate()
                                    .map(|(t, &p)| p * values[t])
                                    .sum::<f64>()
                        })
                        .fold(f64::NEG_INFINITY, f64::max);
                }
                let residual = next
                    .iter()
                    .zip(values.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                values = next;
                if residual <= stop {
                    break;
                }
            }
            let policy = greedy_policy(spec, opponent, player, &values, 1.0 - alpha);
            let chain = policy_chain(spec, opponent, player, &policy)?;
            let absorbing_policy = ChainAnalysis::new(&chain).is_absorbing_chain;
            Ok(BestResponse {
                values,
                policy,
                absorbing_policy,
                method: "discounted".to_string(),
            })
        }
        BrMode::Undiscounted => {
            let interior = spec.non_absorbing();
            let mut policy_count: f64 = 1.0;
            for &s in &interior {
                let (na, nb) = spec.action_counts(s);
                policy_count *= if player == 1 { na as f64 } else { nb as f64 };
            }
            if policy_count <= 1e5 {
                best_response_by_enumeration(spec, opponent, player, &boundary)
            } else {
                best_response_by_schedule(spec, opponent, player)
            }
        }
    }
}

fn greedy_policy(
    spec: &GameSpec,
    opponent: &[Vec<f64>],
    player: usize,
    values: &[f64],
    discount: f64,
) -> Vec<usize> {
    let n = spec.num_states();
    let mut policy = vec![0usize; n];
    for s in 0..n {
        if spec.is_absorbing(s) {
            continue;
        }
        let (na, nb) = spec.action_counts(s);
        let count = if player == 1 { na } else { nb };
        let mut best = f64::NEG_INFINITY;
        for c in 0..count {
            let value = discount
                * frozen_row(spec, opponent, player, s, c)
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| p * values[t])
                    .sum::<f64>();
            if value > best + 1e-12 {
                best = value;
                policy[s] = c;
            }
        }
    }
    policy
}

fn best_response_by_enumeration(
    spec: &GameSpec,
    opponent: &[Vec<f64>],
    player: usize,
    boundary: &[f64],
) -> Result<BestResponse> {
    let n = spec.num_states();
    let interior = spec.non_absorbing();
    let mut best_values = vec![f64::NEG_INFINITY; n];
    for s in 0..n {
        if spec.is_absorbing(s) {
            best_values[s] = boundary[s];
        }
    }
    let mut best_policy = vec![0usize; n];
    let mut best_total = f64::NEG_INFINITY;
    let mut policy = vec![0usize; n];
    loop {
        let chain = policy_chain(spec, opponent, player, &policy)?;
        let analysis = ChainAnalysis::new(&chain);
        let values = analysis.recursive_values(boundary);
        let total: f64 = interior.iter().map(|&s| values[s]).sum();
        if total > best_total {
            best_total = total;
            best_policy = policy.clone();
        }
        for &s in &interior {
            if values[s] > best_values[s] {
                best_values[s] = values[s];
            }
        }
        // Advance the policy odometer.
        let mut pos = 0;
        loop {
            if pos == interior.len() {
                let chain = policy_chain(spec, opponent, player, &best_policy)?;
                let absorbing_policy = ChainAnalysis::new(&chain).is_absorbing_chain;
                return Ok(BestResponse {
                    values: best_values,
                    policy: best_policy,
                    absorbing_policy,
                    method: "enumeration".to_string(),
                });
            }
            let s = interior[pos];
            let (na, nb) = spec.action_counts(s);
            let count = if player == 1 { na } else { nb };
            policy[s] += 1;
            if policy[s] < count {
                break;
            }
            policy[s] = 0;
            pos += 1;
        }
    }
}

fn best_response_by_schedule(
    spec: &GameSpec,
    opponent: &[Vec<f64>],
    player: usize,
) -> Result<BestResponse> {
    let mut alpha = 0.25;
    let mut prev: Option<Vec<f64>> = None;
    for _ in 0..20 {
        let br = best_response_value(
            spec,
            opponent,
            player,
            BrMode::Discounted { alpha, tol: 1e-10 },
        )?;
        if let Some(p) = prev {
            let diff = br
                .values
                .iter()
                .zip(p.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if diff < 1e-7 {
                // Evaluate the limiting policy exactly.
                let chain = policy_chain(spec, opponent, player, &br.policy)?;
                let analysis = ChainAnalysis::new(&chain);
                let values = analysis.recursive_values(&spec.boundary(player));
                return Ok(BestResponse {
                    absorbing_policy: analysis.is_absorbing_chain,
                    values,
                    policy: br.policy,
                    method: "alpha-schedule".to_string(),
                });
            }
        }
        prev = Some(br.values);
        alpha /= 4.0;
    }
    Err(Error::NonConvergence(
        "discount schedule did not stabilize".to_string(),
    ))
}

/// The equilibrium certificate of a stationary profile.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub eps: f64,
    /// Evaluation-space size entering the budget.
    pub n: usize,
    /// Payoff-difference bound (fixed to 1).
    pub m_bound: f64,
    /// Largest observed one-stage deviation over used moves.
    pub delta_used: f64,
    /// Budget `eps^3 / (n M)`.
    pub delta_budget: f64,
    /// `(player, state, margin)` for `r^k >= j^k - eps`.
    pub cond1_margins: Vec<(usize, usize, f64)>,
    /// `(player, state, move, margin)` for the budget condition.
    pub cond2_margins: Vec<(usize, usize, usize, f64)>,
    pub certified: bool,
    pub witnesses: Vec<String>,
}

/// Checks the two certificate conditions of a profile at accuracy
/// `eps`, with `n` the number of states of the evaluation space.
pub fn check_certificate(
    spec: &GameSpec,
    profile: &StrategyProfile,
    eps: f64,
    n_eval: usize,
) -> Result<Certificate> {
    let chain = induce_chain(spec, profile)?;
    let analysis = ChainAnalysis::new(&chain);
    if !analysis.is_absorbing_chain {
        return Err(Error::NotAbsorbing(
            analysis.trapped_class.clone().unwrap_or_default(),
        ));
    }
    let r = [
        analysis.harmonic_payoffs(&spec.boundary(1))?,
        analysis.harmonic_payoffs(&spec.boundary(2))?,
    ];
    let c1 = undiscounted_value(spec, ZeroSumSide::PlayerOne, eps / 10.0)?;
    let c2 = undiscounted_value(spec, ZeroSumSide::PlayerTwo, eps / 10.0)?;
    let mut cond1_margins = Vec::new();
    let mut cond2_margins = Vec::new();
    let mut witnesses = Vec::new();
    let mut delta_used: f64 = 0.0;
    let m_bound = 1.0;
    let delta_budget = eps.powi(3) / (n_eval as f64 * m_bound);
    for s in spec.non_absorbing() {
        let (na, nb) = spec.action_counts(s);
        // Jump levels against the frozen halves of the profile.
        let j2: f64 = (0..nb)
            .map(|b| {
                spec.row_vs_x(s, &profile.x[s], b)
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| p * c2[t])
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let j1: f64 = (0..na)
            .map(|a| {
                spec.row_vs_y(s, a, &profile.y[s])
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| p * c1[t])
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        for (player, jump) in [(1usize, j1), (2usize, j2)] {
            let margin = r[player - 1][s] - (jump - eps);
            if margin < 0.0 {
                witnesses.push(format!(
                    "player {player} value at state {s} falls {margin} below its jump level"
                ));
            }
            cond1_margins.push((player, s, margin));
        }
        for (player, dists) in [(1usize, &profile.x), (2usize, &profile.y)] {
            for (c, &mass) in dists[s].iter().enumerate() {
                if mass <= 0.0 {
                    continue;
                }
                let w: f64 = frozen_row(
                    spec,
                    if player == 1 { &profile.y } else { &profile.x },
                    player,
                    s,
                    c,
                )
                .iter()
                .enumerate()
                .map(|(t, &p)| p * r[player - 1][t])
                .sum();
                let dev = (w - r[player - 1][s]).abs();
                delta_used = delta_used.max(dev);
                let margin = delta_budget - dev;
                if margin < 0.0 {
                    witnesses.push(format!(
                        "player {player} move {c} at state {s} deviates by {dev}"
                    ));
                }
                cond2_margins.push((player, s, c, margin));
            }
        }
    }
    let certified = cond1_margins.iter().all(|&(_, _, m)| m >= 0.0)
        && delta_used <= delta_budget;
    Ok(Certificate {
        eps,
        n: n_eval,
        m_bound,
        delta_used,
        delta_budget,
        cond1_margins,
        cond2_margins,
        certified,
        witnesses,
    })
}

/// The certificate over an expanded evaluation space: the game is
/// played on situations mapped onto base states by `base_of`; jump
/// levels come from the base game's punishment values while the
/// one-stage margins are measured on the situation game itself. The
/// budget uses the situation count.
pub fn check_certificate_on_situations(
    situations: &GameSpec,
    base: &GameSpec,
    base_of: &[usize],
    profile: &StrategyProfile,
    eps: f64,
) -> Result<Certificate> {
    if base_of.len() != situations.num_states() {
        return Err(Error::DimensionMismatch(
            "one base state per situation required".to_string(),
        ));
    }
    for (hat_s, &b) in base_of.iter().enumerate() {
        if situations.is_absorbing(hat_s) != base.is_absorbing(b) {
            return Err(Error::InvalidParameter(format!(
                "situation {hat_s} and base state {b} disagree on absorption"
            )));
        }
        if situations.action_counts(hat_s) != base.action_counts(b) {
            return Err(Error::DimensionMismatch(format!(
                "situation {hat_s} and base state {b} have different action sets"
            )));
        }
    }
    let chain = induce_chain(situations, profile)?;
    let analysis = ChainAnalysis::new(&chain);
    if !analysis.is_absorbing_chain {
        return Err(Error::NotAbsorbing(
            analysis.trapped_class.clone().unwrap_or_default(),
        ));
    }
    let r = [
        analysis.harmonic_payoffs(&situations.boundary(1))?,
        analysis.harmonic_payoffs(&situations.boundary(2))?,
    ];
    let c1 = undiscounted_value(base, ZeroSumSide::PlayerOne, eps / 10.0)?;
    let c2 = undiscounted_value(base, ZeroSumSide::PlayerTwo, eps / 10.0)?;
    let n_eval = situations.num_states();
    let m_bound = 1.0;
    let delta_budget = eps.powi(3) / (n_eval as f64 * m_bound);
    let mut cond1_margins = Vec::new();
    let mut cond2_margins = Vec::new();
    let mut witnesses = Vec::new();
    let mut delta_used: f64 = 0.0;
    for hat_s in situations.non_absorbing() {
        let b_state = base_of[hat_s];
        let (na, nb) = situations.action_counts(hat_s);
        let j2: f64 = (0..nb)
            .map(|b| {
                base.row_vs_x(b_state, &profile.x[hat_s], b)
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| p * c2[t])
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let j1: f64 = (0..na)
            .map(|a| {
                base.row_vs_y(b_state, a, &profile.y[hat_s])
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| p * c1[t])
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        for (player, jump) in [(1usize, j1), (2usize, j2)] {
            let margin = r[player - 1][hat_s] - (jump - eps);
            if margin < 0.0 {
                witnesses.push(format!(
                    "player {player} value at situation {hat_s} falls below its jump level"
                ));
            }
            cond1_margins.push((player, hat_s, margin));
        }
        for (player, dists) in [(1usize, &profile.x), (2usize, &profile.y)] {
            for (c, &mass) in dists[hat_s].iter().enumerate() {
                if mass <= 0.0 {
                    continue;
                }
                let w: f64 = frozen_row(
                    situations,
                    if player == 1 { &profile.y } else { &profile.x },
                    player,
                    hat_s,
                    c,
                )
                .iter()
                .enumerate()
                .map(|(t, &p)| p * r[player - 1][t])
                .sum();
                let dev = (w - r[player - 1][hat_s]).abs();
                delta_used = delta_used.max(dev);
                let margin = delta_budget - dev;
                if margin < 0.0 {
                    witnesses.push(format!(
                        "player {player} move {c} at situation {hat_s} deviates by {dev}"
                    ));
                }
                cond2_margins.push((player, hat_s, c, margin));
            }
        }
    }
    let certified =
        cond1_margins.iter().all(|&(_, _, m)| m >= 0.0) && delta_used <= delta_budget;
    Ok(Certificate {
        eps,
        n: n_eval,
        m_bound,
        delta_used,
        delta_budget,
        cond1_margins,
        cond2_margins,
        certified,
        witnesses,
    })
}

/// 99% Wilson score upper bound for a binomial proportion.
fn wilson_upper(successes: usize, trials: usize) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    let z = 2.576;
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = p + z * z / (2.0 * n);
    let spread = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
    ((center + spread) / denom).min(1.0)
}

/// Outcome counts of honest test-and-punish play.
#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub runs: usize,
    /// Stage budget: smallest horizon with non-absorption mass below
    /// `eps / 10` from the start state.
    pub horizon: usize,
    pub punished: usize,
    pub absorbed_clean: usize,
    pub horizon_expired: usize,
    pub punishment_frequency: f64,
    /// 99% upper confidence bound for the punishment frequency.
    pub punishment_upper99: f64,
    pub absorption_frequency: f64,
    pub mean_absorption_stage: f64,
    /// Largest trajectory maximum of either player's statistic.
    pub max_statistic: f64,
}

/// Simulates both players following the profile while monitoring the
/// cumulative one-stage-deviation statistics; a run is `punished` when
/// either statistic exceeds `eps` before absorption.
pub fn simulate_test_and_punish(
    spec: &GameSpec,
    profile: &StrategyProfile,
    start: usize,
    eps: f64,
    runs: usize,
    seed: u64,
) -> Result<SimulationReport> {
    let chain = induce_chain(spec, profile)?;
    let analysis = ChainAnalysis::new(&chain);
    if !analysis.is_absorbing_chain {
        return Err(Error::NotAbsorbing(
            analysis.trapped_class.clone().unwrap_or_default(),
        ));
    }
    let r = [
        analysis.harmonic_payoffs(&spec.boundary(1))?,
        analysis.harmonic_payoffs(&spec.boundary(2))?,
    ];
    // Horizon: non-absorption probability from the start below eps/10.
    let horizon = horizon_for_start(&analysis, start, eps / 10.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut punished = 0usize;
    let mut absorbed_clean = 0usize;
    let mut horizon_expired = 0usize;
    let mut absorption_stages = 0usize;
    let mut absorbed_total = 0usize;
    let mut max_statistic: f64 = 0.0;
    for _ in 0..runs {
        let mut s = start;
        let mut stats = [0.0f64; 2];
        let mut outcome = 2; // 0 punished, 1 absorbed, 2 horizon
        for stage in 0..horizon {
            if spec.is_absorbing(s) {
                outcome = 1;
                absorbed_total += 1;
                absorption_stages += stage;
                break;
            }
            let a = sample_index(&mut rng, &profile.x[s]);
            let b = sample_index(&mut rng, &profile.y[s]);
            let w1: f64 = spec.row_vs_y(s, a, &profile.y[s])
                .iter()
                .enumerate()
                .map(|(t, &p)| p * r[0][t])
                .sum();
            let w2: f64 = spec.row_vs_x(s, &profile.x[s], b)
                .iter()
                .enumerate()
                .map(|(t, &p)| p * r[1][t])
                .sum();
            stats[0] += w1 - r[0][s];
            stats[1] += w2 - r[1][s];
            max_statistic = max_statistic.max(stats[0]).max(stats[1]);
            if stats[0] > eps || stats[1] > eps {
                outcome = 0;
                break;
            }
            s = sample_index(&mut rng, spec.row(s, a, b));
        }
        if outcome == 2 && spec.is_absorbing(s) {
            outcome = 1;
            absorbed_total += 1;
            absorption_stages += horizon;
        }
        match outcome {
            0 => punished += 1,
            1 => absorbed_clean += 1,
            _ => horizon_expired += 1,
        }
    }
    Ok(SimulationReport {
        runs,
        horizon,
        punished,
        absorbed_clean,
        horizon_expired,
        punishment_frequency: punished as f64 / runs as f64,
        punishment_upper99: wilson_upper(punished, runs),
        absorption_frequency: absorbed_total as f64 / runs as f64,
        mean_absorption_stage: if absorbed_total > 0 {
            absorption_stages as f64 / absorbed_total as f64
        } else {
            f64::NAN
        },
        max_statistic,
    })
}

/// Smallest horizon with non-absorption mass below `tail` from
/// `start`.
fn horizon_for_start(analysis: &ChainAnalysis, start: usize, tail: f64) -> Result<usize> {
    if analysis.chain.is_absorbing_state(start) {
        return Ok(1);
    }
    let interior = analysis.chain.non_absorbing_states();
    let pos_of = |s: usize| interior.iter().position(|&u| u == s);
    let mut mass = vec![1.0f64; interior.len()];
    for horizon in 1..10_000_000usize {
        let mut next = vec![0.0; interior.len()];
        for (i, &u) in interior.iter().enumerate() {
            next[i] = interior
                .iter()
                .enumerate()
                .map(|(j, &v)| analysis.chain.row(u)[v] * mass[j])
                .sum();
        }
        mass = next;
        if mass[pos_of(start).unwrap()] < tail {
            return Ok(horizon);
        }
    }
    Err(Error::NonConvergence("horizon search exhausted".into()))
}

/// Empirical path-sum check of the visit-weighted deviation bound.
#[derive(Debug, Clone)]
pub struct PathSumReport {
    pub runs: usize,
    pub empirical_mean: f64,
    pub std_error: f64,
    /// The bound `M n` with `n` the number of states with positive
    /// one-stage deviation.
    pub bound: f64,
    pub n_active: usize,
    pub m_bound: f64,
    pub holds: bool,
}

/// Simulates paths of the chain and accumulates the per-visit
/// one-stage absolute deviations `w(s) = sum_t q(t|s) |r(t) - r(s)|`;
/// the expectation is bounded by `M n` (checked within three standard
/// errors).
pub fn path_sum_check(
    chain: &Chain,
    boundary: &[f64],
    start: usize,
    runs: usize,
    seed: u64,
) -> Result<PathSumReport> {
    let analysis = ChainAnalysis::new(chain);
    let r = analysis.harmonic_payoffs(boundary)?;
    let n_states = chain.num_states();
    let mut w = vec![0.0; n_states];
    for s in 0..n_states {
        w[s] = chain.row(s)
            .iter()
            .enumerate()
            .map(|(t, &p)| p * (r[t] - r[s]).abs())
            .sum();
    }
    let n_active = (0..n_states).filter(|&s| w[s] > 1e-15).count();
    let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let m_bound = hi - lo;
    let horizon = certified_horizon(&analysis, 1e-6)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..runs {
        let mut s = start;
        let mut path_sum = 0.0;
        for _ in 0..horizon {
            if chain.is_absorbing_state(s) {
                break;
            }
            path_sum += w[s];
            s = sample_index(&mut rng, chain.row(s));
        }
        sum += path_sum;
        sum_sq += path_sum * path_sum;
    }
    let mean = sum / runs as f64;
    let var = (sum_sq / runs as f64 - mean * mean).max(0.0);
    let std_error = (var / runs as f64).sqrt();
    let bound = m_bound * n_active as f64;
    Ok(PathSumReport {
        runs,
        empirical_mean: mean,
        std_error,
        bound,
        n_active,
        m_bound,
        holds: mean <= bound + 3.0 * std_error,
    })
}

/// A bipartite chain alternating between primary states and move
/// tokens, with a harmonic evaluation on both layers.
#[derive(Debug, Clone)]
pub struct TwoLayerChain {
    /// Per primary state: distribution over tokens.
    pub tokens_of: Vec<Vec<(f64, usize)>>,
    /// Per token: distribution over primary states.
    pub next_of: Vec<Vec<(f64, usize)>>,
    pub v_x: Vec<f64>,
    pub v_y: Vec<f64>,
    pub absorbing_x: Vec<bool>,
}

impl TwoLayerChain {
    /// Validates stochasticity and harmonicity (within 1e-9).
    pub fn validate(&self) -> Result<()> {
        for (x, dist) in self.tokens_of.iter().enumerate() {
            if self.absorbing_x[x] {
                continue;
            }
            let sum: f64 = dist.iter().map(|&(p, _)| p).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "token distribution at {x} sums to {sum}"
                )));
            }
            let mean: f64 = dist.iter().map(|&(p, y)| p * self.v_y[y]).sum();
            if (mean - self.v_x[x]).abs() > 1e-9 {
                return Err(Error::Hypothesis(format!(
                    "evaluation not harmonic at primary state {x}"
                )));
            }
        }
        for (y, dist) in self.next_of.iter().enumerate() {
            let sum: f64 = dist.iter().map(|&(p, _)| p).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "next distribution at token {y} sums to {sum}"
                )));
            }
            let mean: f64 = dist.iter().map(|&(p, x)| p * self.v_x[x]).sum();
            if (mean - self.v_y[y]).abs() > 1e-9 {
                return Err(Error::Hypothesis(format!(
                    "evaluation not harmonic at token {y}"
                )));
            }
        }
        Ok(())
    }

    /// The symmetric walk on `n + 1` positions with absorbing ends
    /// where each token reveals the walk's next position, so each
    /// stage moves the revealed evaluation by `1/n`.
    pub fn revealed_walk(n: usize) -> TwoLayerChain {
        let positions = n + 1;
        let mut tokens_of = vec![Vec::new(); positions];
        let mut next_of = Vec::new();
        let mut v_y = Vec::new();
        let mut v_x = vec![0.0; positions];
        let mut absorbing_x = vec![false; positions];
        for x in 0..positions {
            v_x[x] = x as f64 / n as f64;
        }
        absorbing_x[0] = true;
        absorbing_x[n] = true;
        for x in 1..n {
            for dir in [1usize, 0] {
                let target = if dir == 1 { x + 1 } else { x - 1 };
                let y = next_of.len();
                next_of.push(vec![(1.0, target)]);
                v_y.push(v_x[target]);
                tokens_of[x].push((0.5, y));
            }
        }
        TwoLayerChain {
            tokens_of,
            next_of,
            v_x,
            v_y,
            absorbing_x,
        }
    }

    /// The same walk with biased coin tokens: each token only tilts
    /// the next step by `theta`, so the revealed evaluation moves by
    /// `2 theta / n` per stage.
    pub fn token_walk(n: usize, theta: f64) -> TwoLayerChain {
        let positions = n + 1;
        let mut tokens_of = vec![Vec::new(); positions];
        let mut next_of = Vec::new();
        let mut v_y = Vec::new();
        let mut v_x = vec![0.0; positions];
        let mut absorbing_x = vec![false; positions];
        for x in 0..positions {
            v_x[x] = x as f64 / n as f64;
        }
        absorbing_x[0] = true;
        absorbing_x[n] = true;
        for x in 1..n {
            for sign in [1.0f64, -1.0] {
                let y = next_of.len();
                next_of.push(vec![(0.5 + sign * theta, x + 1), (0.5 - sign * theta, x - 1)]);
                v_y.push(v_x[x] + sign * 2.0 * theta / n as f64);
                tokens_of[x].push((0.5, y));
            }
        }
        TwoLayerChain {
            tokens_of,
            next_of,
            v_x,
            v_y,
            absorbing_x,
        }
    }
}

/// Monte-Carlo estimate of the threshold-crossing probability of the
/// two-layer statistic.
#[derive(Debug, Clone)]
pub struct ThresholdCrossingReport {
    pub runs: usize,
    pub crossings: usize,
    pub probability: f64,
    pub upper99: f64,
    /// Largest per-edge deviation `|v(y) - v(x)|` observed.
    pub max_edge_deviation: f64,
    pub delta: f64,
    pub eps: f64,
    /// Whether `delta <= eps^3 / (M n)` held (the admissible regime).
    pub budget_ok: bool,
    /// Conclusion `P(max partial sum >= eps) <= eps` at the 99% level.
    pub holds: bool,
    pub truncated_runs: usize,
}

/// Verifies (or refutes, for inadmissible inputs) the crossing bound:
/// when every revealed edge moves the evaluation by at most
/// `eps^3/(M n)`, the probability that the cumulative revealed gain
/// ever exceeds `eps` stays below `eps`.
pub fn threshold_crossing_check(
    chain: &TwoLayerChain,
    start: usize,
    delta: f64,
    eps: f64,
    runs: usize,
    seed: u64,
) -> Result<ThresholdCrossingReport> {
    chain.validate()?;
    let mut max_edge: f64 = 0.0;
    for (x, dist) in chain.tokens_of.iter().enumerate() {
        for &(p, y) in dist {
            if p > 0.0 {
                let dev = (chain.v_y[y] - chain.v_x[x]).abs();
                if dev > delta + 1e-12 {
                    return Err(Error::Hypothesis(format!(
                        "edge {x}->{y} deviates by {dev}, above delta {delta}"
                    )));
                }
                max_edge = max_edge.max(dev);
            }
        }
    }
    let n = chain.tokens_of.len();
    let hi = chain.v_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = chain.v_x.iter().cloned().fold(f64::INFINITY, f64::min);
    let m_bound = (hi - lo).max(1e-12);
    let budget_ok = delta <= eps.powi(3) / (m_bound * n as f64) + 1e-15;
    let stage_cap = 50 * n * n + 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut crossings = 0usize;
    let mut truncated_runs = 0usize;
    for _ in 0..runs {
        let mut x = start;
        let mut partial = 0.0f64;
        let mut crossed = false;
        for _ in 0..stage_cap {
            if chain.absorbing_x[x] {
                break;
            }
            let pick = {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = chain.tokens_of[x][0].1;
                for &(p, y) in &chain.tokens_of[x] {
                    acc += p;
                    if u < acc {
                        chosen = y;
                        break;
                    }
                }
                chosen
            };
            partial += chain.v_y[pick] - chain.v_x[x];
            if partial >= eps {
                crossed = true;
                break;
            }
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut next = chain.next_of[pick][0].1;
            for &(p, t) in &chain.next_of[pick] {
                acc += p;
                if u < acc {
                    next = t;
                    break;
                }
            }
            x = next;
        }
        if crossed {
            crossings += 1;
        } else if !chain.absorbing_x[x] {
            truncated_runs += 1;
        }
    }
    let probability = crossings as f64 / runs as f64;
    let upper99 = wilson_upper(crossings, runs);
    Ok(ThresholdCrossingReport {
        runs,
        crossings,
        probability,
        upper99,
        max_edge_deviation: max_edge,
        delta,
        eps,
        budget_ok,
        holds: upper99 <= eps,
        truncated_runs,
    })
}

/// Result of the augmented-state deviation program.
#[derive(Debug, Clone)]
pub struct DeviationGapReport {
    pub player: usize,
    pub start: usize,
    /// Best deviation value against the monitoring opponent.
    pub deviation_value: f64,
    /// Profile value at the start.
    pub baseline: f64,
    pub gap: f64,
    pub bound: f64,
    pub holds: bool,
    pub horizon: usize,
    pub buckets: usize,
}

/// Exact (up to statistic bucketing) best deviation value against the
/// test-and-punish opponent, by dynamic programming over
/// `(state, statistic bucket, stage)`.
///
/// The opponent follows the stationary profile, monitors the
/// deviator's cumulative one-stage statistic, and punishes at the
/// `c_k + eps` level on violation, support departure, or horizon
/// expiry. Bucket width is `eps / 20`; the statistic is clamped to
/// `[-1, eps]`. Desk scale only.
pub fn deviation_gap(
    spec: &GameSpec,
    profile: &StrategyProfile,
    player: usize,
    start: usize,
    eps: f64,
) -> Result<DeviationGapReport> {
    let n = spec.num_states();
    if spec.non_absorbing().len() > 4 {
        return Err(Error::TooLarge(
            "deviation program supports at most 4 non-absorbing states".to_string(),
        ));
    }
    let chain = induce_chain(spec, profile)?;
    let analysis = ChainAnalysis::new(&chain);
    if !analysis.is_absorbing_chain {
        return Err(Error::NotAbsorbing(
            analysis.trapped_class.clone().unwrap_or_default(),
        ));
    }
    let r_k = analysis.harmonic_payoffs(&spec.boundary(player))?;
    let horizon = horizon_for_start(&analysis, start, eps / 10.0)?;
    if horizon > 3_000 {
        return Err(Error::TooLarge(format!(
            "horizon {horizon} beyond desk scale"
        )));
    }
    let side = if player == 1 {
        ZeroSumSide::PlayerOne
    } else {
        ZeroSumSide::PlayerTwo
    };
    let c_k = undiscounted_value(spec, side, eps / 10.0)?;
    // Punished continuation: at most c_k + eps, and never above the
    // best achievable payoff (zero counts for never absorbing).
    let payoff_cap = spec
        .absorbing()
        .iter()
        .map(|&s| spec.payoff(player, s))
        .fold(0.0f64, f64::max);
    let punish: Vec<f64> = (0..n)
        .map(|s| {
            if spec.is_absorbing(s) {
                spec.payoff(player, s)
            } else {
                (c_k[s] + eps).min(payoff_cap)
            }
        })
        .collect();
    let width = eps / 20.0;
    let floor = -1.0f64;
    let buckets = (((eps - floor) / width).ceil() as usize) + 1;
    let bucket_of = |stat: f64| -> usize {
        let clamped = stat.clamp(floor, eps);
        (((clamped - floor) / width).round() as usize).min(buckets - 1)
    };
    let stat_of = |bucket: usize| -> f64 { floor + bucket as f64 * width };

    let opponent = if player == 1 { &profile.y } else { &profile.x };
    let own = if player == 1 { &profile.x } else { &profile.y };
    // Expected next-stage value of each own move (the monitored w).
    let mut w_move: Vec<Vec<f64>> = vec![Vec::new(); n];
    for s in spec.non_absorbing() {
        let (na, nb) = spec.action_counts(s);
        let count = if player == 1 { na } else { nb };
        w_move[s] = (0..count)
            .map(|c| {
                frozen_row(spec, opponent, player, s, c)
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| p * r_k[t])
                    .sum()
            })
            .collect();
    }
    // punished-next-stage continuation of a move.
    let punished_value = |s: usize, c: usize| -> f64 {
        frozen_row(spec, opponent, player, s, c)
            .iter()
            .enumerate()
            .map(|(t, &p)| {
                p * if spec.is_absorbing(t) {
                    spec.payoff(player, t)
                } else {
                    punish[t]
                }
            })
            .sum()
    };

    // Backward induction over stages.
    let mut next_layer = vec![vec![0.0f64; buckets]; n];
    for s in 0..n {
        for b in 0..buckets {
            next_layer[s][b] = if spec.is_absorbing(s) {
                spec.payoff(player, s)
            } else {
                punish[s]
            };
        }
    }
    for _stage in (0..horizon).rev() {
        let mut layer = vec![vec![0.0f64; buckets]; n];
        for s in 0..n {
            if spec.is_absorbing(s) {
                for b in 0..buckets {
                    layer[s][b] = spec.payoff(player, s);
                }
                continue;
            }
            let (na, nb) = spec.action_counts(s);
            let count = if player == 1 { na } else { nb };
            for b in 0..buckets {
                let stat = stat_of(b);
                let mut best = f64::NEG_INFINITY;
                for c in 0..count {
                    let value = if own[s][c] <= 0.0 {
                        // Support departure: detected, punished next
                        // stage.
                        punished_value(s, c)
                    } else {
                        let new_stat = stat + (w_move[s][c] - r_k[s]);
                        if new_stat > eps {
                            punished_value(s, c)
                        } else {
                            let nb_idx = bucket_of(new_stat);
                            frozen_row(spec, opponent, player, s, c)
                                .iter()
                                .enumerate()
                                .map(|(t, &p)| {
                                    p * if spec.is_absorbing(t) {
                                        spec.payoff(player, t)
                                    } else {
                                        next_layer[t][nb_idx]
                                    }
                                })
                                .sum()
                        }
                    };
                    best = best.max(value);
                }
                layer[s][b] = best;
            }
        }
        next_layer = layer;
    }
    let deviation_value = next_layer[start][bucket_of(0.0)];
    let baseline = r_k[start];
    let gap = deviation_value - baseline;
    let bound = 4.0 * eps;
    Ok(DeviationGapReport {
        player,
        start,
        deviation_value,
        baseline,
        gap,
        bound,
        holds: gap <= bound,
        horizon,
        buckets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    const TOL: f64 = 1e-9;

    #[test]
    fn g1_best_response_for_p2() {
        let g1 = fixtures::g1();
        let profile = fixtures::g1_profile(0.5);
        let br =
            best_response_value(&g1, &profile.x, 2, BrMode::Undiscounted).unwrap();
        assert!((br.values[0] - 1.0).abs() < TOL);
        assert_eq!(br.policy[0], 0);
        assert!(br.absorbing_policy);
        assert_eq!(br.method, "enumeration");
    }

    #[test]
    fn flat_game_best_response_is_constant() {
        let spec = fixtures::flat_game(0.3, 0.6);
        let profile = StrategyProfile::uniform(&spec);
        let br1 =
            best_response_value(&spec, &profile.y, 1, BrMode::Undiscounted).unwrap();
        let br2 =
            best_response_value(&spec, &profile.x, 2, BrMode::Undiscounted).unwrap();
        assert!((br1.values[0] - 0.3).abs() < TOL);
        assert!((br2.values[0] - 0.6).abs() < TOL);
    }

    #[test]
    fn enumeration_agrees_with_schedule() {
        let mut rng = fixtures::rng(73);
        for _ in 0..5 {
            let spec = fixtures::random_game(&mut rng, 3, 2, 3);
            let profile = fixtures::random_profile(&mut rng, &spec);
            for player in [1usize, 2] {
                let opponent = if player == 1 { &profile.y } else { &profile.x };
                let by_enum =
                    best_response_by_enumeration(&spec, opponent, player, &spec.boundary(player))
                        .unwrap();
                let by_schedule =
                    best_response_by_schedule(&spec, opponent, player).unwrap();
                for s in 0..spec.num_states() {
                    assert!(
                        (by_enum.values[s] - by_schedule.values[s]).abs() < 1e-5,
                        "player {player} state {s}: {} vs {}",
                        by_enum.values[s],
                        by_schedule.values[s]
                    );
                }
            }
        }
    }

    #[test]
    fn best_response_dominates_profile_value() {
        let mut rng = fixtures::rng(79);
        for _ in 0..5 {
            let spec = fixtures::random_game(&mut rng, 3, 2, 3);
            let profile = fixtures::random_profile(&mut rng, &spec);
            let chain = induce_chain(&spec, &profile).unwrap();
            let analysis = ChainAnalysis::new(&chain);
            for player in [1usize, 2] {
                let opponent = if player == 1 { &profile.y } else { &profile.x };
                let br =
                    best_response_value(&spec, opponent, player, BrMode::Undiscounted)
                        .unwrap();
                let value = analysis
                    .harmonic_payoffs(&spec.boundary(player))
                    .unwrap();
                for s in 0..spec.num_states() {
                    assert!(
                        br.values[s] >= value[s] - TOL,
                        "deviation hurt player {player} at {s}"
                    );
                }
            }
        }
    }

    #[test]
    fn g1_certificate_passes() {
        let g1 = fixtures::g1();
        let profile = fixtures::g1_profile(1.0);
        let cert = check_certificate(&g1, &profile, 0.1, g1.num_states()).unwrap();
        assert!(cert.certified, "{:?}", cert.witnesses);
        assert!(cert.delta_used < TOL);
        assert!(cert.cond1_margins.iter().all(|&(_, _, m)| m >= 0.0));
    }

    #[test]
    fn certificate_flags_deviating_move() {
        // Player Two mixes two absorbing moves with different values,
        // so each used move deviates from the average by 0.2.
        let states = vec![
            crate::game::State {
                name: "s".into(),
                kind: crate::game::StateKind::NonAbsorbing {
                    p1_actions: vec!["a".into()],
                    p2_actions: vec!["b1".into(), "b2".into()],
                },
            },
            crate::game::State {
                name: "hi".into(),
                kind: crate::game::StateKind::Absorbing(crate::game::AbsorbingPayoff {
                    r1: 0.0,
                    r2: 1.0,
                }),
            },
            crate::game::State {
                name: "lo".into(),
                kind: crate::game::StateKind::Absorbing(crate::game::AbsorbingPayoff {
                    r1: 0.0,
                    r2: 0.6,
                }),
            },
        ];
        let transition = vec![
            vec![vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]],
            vec![vec![vec![0.0, 1.0, 0.0]]],
            vec![vec![vec![0.0, 0.0, 1.0]]],
        ];
        let spec = GameSpec::new(states, transition, 0.6).unwrap();
        let profile = StrategyProfile {
            x: vec![vec![1.0], vec![1.0], vec![1.0]],
            y: vec![vec![0.5, 0.5], vec![1.0], vec![1.0]],
        };
        let cert = check_certificate(&spec, &profile, 0.1, 3).unwrap();
        assert!(!cert.certified);
        assert!((cert.delta_used - 0.2).abs() < TOL);
        assert!(!cert.witnesses.is_empty());
        assert!(cert.cond2_margins.iter().any(|&(_, _, _, m)| m < 0.0));
    }

    #[test]
    fn flat_game_certified_for_every_eps() {
        let spec = fixtures::flat_game(0.1, 0.8);
        let profile = StrategyProfile::uniform(&spec);
        for eps in [0.01, 0.05, 0.2, 0.4] {
            let cert =
                check_certificate(&spec, &profile, eps, spec.num_states()).unwrap();
            assert!(cert.certified, "eps {eps}: {:?}", cert.witnesses);
        }
    }

    #[test]
    fn situation_certificate_matches_base_on_identity_map() {
        let g1 = fixtures::g1();
        let profile = fixtures::g1_profile(1.0);
        let base_of: Vec<usize> = (0..g1.num_states()).collect();
        let cert =
            check_certificate_on_situations(&g1, &g1, &base_of, &profile, 0.1).unwrap();
        assert!(cert.certified);
        assert_eq!(cert.n, g1.num_states());
    }

    #[test]
    fn g1_simulation_never_punishes() {
        let g1 = fixtures::g1();
        let profile = fixtures::g1_profile(1.0);
        let report =
            simulate_test_and_punish(&g1, &profile, 0, 0.1, 2_000, 11).unwrap();
        assert_eq!(report.punished, 0);
        assert_eq!(report.horizon_expired + report.absorbed_clean, 2_000);
        assert!(report.max_statistic.abs() < TOL);
        assert_eq!(
            report.punished + report.absorbed_clean + report.horizon_expired,
            report.runs
        );
    }

    #[test]
    fn path_sum_bound_on_g2() {
        let chain = fixtures::g2();
        let boundary = vec![0.0, 0.0, 0.0, 1.0];
        let report = path_sum_check(&chain, &boundary, 0, 5_000, 13).unwrap();
        assert!(report.holds, "{report:?}");
        assert_eq!(report.n_active, 2);
        // Closed form: E[path sum] = 2/3 with the split boundary.
        assert!((report.empirical_mean - 2.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn two_layer_constant_evaluation_never_crosses() {
        // A walk whose evaluation is constant: delta = 0.
        let mut chain = TwoLayerChain::token_walk(10, 0.0);
        for v in chain.v_x.iter_mut() {
            *v = 0.5;
        }
        for v in chain.v_y.iter_mut() {
            *v = 0.5;
        }
        let report = threshold_crossing_check(&chain, 5, 0.0, 0.1, 500, 17).unwrap();
        assert_eq!(report.crossings, 0);
        assert!(report.holds);
    }

    #[test]
    fn revealed_walk_violates_crossing_bound() {
        // Per-edge deviation 1/n is far above eps^3/(M n): the
        // crossing probability stays near 1/2 regardless of n.
        let n = 40;
        let chain = TwoLayerChain::revealed_walk(n);
        let eps = 0.2;
        let delta = 1.0 / n as f64;
        let report =
            threshold_crossing_check(&chain, n / 2, delta, eps, 2_000, 19).unwrap();
        assert!(!report.budget_ok);
        assert!(
            report.probability > 3.0 * eps,
            "probability {}",
            report.probability
        );
        assert!(!report.holds);
    }

    #[test]
    fn token_walk_respects_crossing_bound() {
        let n = 30;
        let eps = 0.25f64;
        // The evaluation space has n + 1 primary states.
        let delta = eps.powi(3) / (n + 1) as f64;
        let theta = delta * n as f64 / 2.0;
        let chain = TwoLayerChain::token_walk(n, theta);
        let report =
            threshold_crossing_check(&chain, n / 2, delta, eps, 2_000, 23).unwrap();
        assert!(report.budget_ok);
        assert!(report.holds, "{report:?}");
        assert_eq!(report.crossings, 0);
    }

    #[test]
    fn g1_deviation_gap_within_bound() {
        let g1 = fixtures::g1();
        let profile = fixtures::g1_profile(1.0);
        for player in [1usize, 2] {
            let report = deviation_gap(&g1, &profile, player, 0, 0.1).unwrap();
            assert!(report.holds, "{report:?}");
            assert!(report.gap <= 4.0 * 0.1);
        }
    }

    #[test]
    fn wilson_upper_bound_behaves() {
        assert!(wilson_upper(0, 1000) < 0.01);
        assert!(wilson_upper(500, 1000) > 0.5);
        assert!(wilson_upper(1000, 1000) <= 1.0);
    }
}
