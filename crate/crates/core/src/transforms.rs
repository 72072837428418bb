//! Chain surgeries and their quantitative guarantees.
//!
//! Every operation here rewrites transitions of a chain (dropping
//! move frequencies, perturbing rows, collapsing blocks, or mixing in
//! alternative transitions) and then verifies the advertised stability
//! conclusions by exact recomputation on both chains. Hypothesis
//! failures are reported with the offending state rather than silently
//! ignored; structurally impossible inputs are errors.

use crate::chain::{Chain, ChainAnalysis, Part, PartLabel};
use crate::error::{Error, Result};
use crate::factor_diff;
use crate::game::{induce_chain, GameSpec, StrategyProfile};

const TOL: f64 = 1e-9;

/// One named comparison in a report.
#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl CheckEntry {
    fn at_least(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        CheckEntry {
            name: name.into(),
            lhs,
            rhs,
            holds: lhs + TOL >= rhs,
        }
    }

    fn at_most(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        CheckEntry {
            name: name.into(),
            lhs,
            rhs,
            holds: lhs <= rhs + TOL,
        }
    }

    fn positive(name: impl Into<String>, lhs: f64) -> Self {
        CheckEntry {
            name: name.into(),
            lhs,
            rhs: 0.0,
            holds: lhs > 0.0,
        }
    }
}

fn all_hold(entries: &[CheckEntry]) -> bool {
    entries.iter().all(|e| e.holds)
}

/// Checks that `part` is a sub-row of the chain row at `state`.
fn validate_subrow(chain: &Chain, state: usize, part: &Part) -> Result<()> {
    if part.row.len() != chain.num_states() {
        return Err(Error::InvalidPart {
            state,
            reason: "part row has wrong length".to_string(),
        });
    }
    if !(0.0..=1.0 + TOL).contains(&part.weight) {
        return Err(Error::InvalidPart {
            state,
            reason: format!("part weight {} outside [0,1]", part.weight),
        });
    }
    for (t, (&mass, &row)) in part.mass().iter().zip(chain.row(state)).enumerate() {
        if mass > row + 1e-7 {
            return Err(Error::InvalidPart {
                state,
                reason: format!("part mass {mass} exceeds row mass {row} at target {t}"),
            });
        }
    }
    Ok(())
}

/// The remaining row after removing `parts` from the row at `state`,
/// renormalized. Errors when the removal empties the row.
fn remove_parts_from_row(chain: &Chain, state: usize, parts: &[&Part]) -> Result<Vec<f64>> {
    let mut row = chain.row(state).to_vec();
    let mut removed = 0.0;
    for part in parts {
        validate_subrow(chain, state, part)?;
        removed += part.weight;
        for (t, mass) in part.mass().iter().enumerate() {
            row[t] -= mass;
        }
    }
    let remaining = 1.0 - removed;
    if remaining <= TOL {
        return Err(Error::RemovesEverything(state));
    }
    for value in row.iter_mut() {
        *value = (*value / remaining).max(0.0);
    }
    let sum: f64 = row.iter().sum();
    for value in row.iter_mut() {
        *value /= sum;
    }
    Ok(row)
}

/// The complement of a set of parts within the row at `state`, as a
/// part. `None` when the parts exhaust the row.
fn complement_part(chain: &Chain, state: usize, parts: &[&Part]) -> Result<Option<Part>> {
    let f: f64 = parts.iter().map(|p| p.weight).sum();
    if f >= 1.0 - TOL {
        return Ok(None);
    }
    let row = remove_parts_from_row(chain, state, parts)?;
    Ok(Some(Part {
        label: PartLabel::Named("complement".to_string()),
        weight: 1.0 - f,
        row,
    }))
}

// ---------------------------------------------------------------------------
// Simplification
// ---------------------------------------------------------------------------

/// A simplification outcome: the rewritten object and the per-state
/// frequency that was dropped before renormalization.
#[derive(Debug, Clone)]
pub struct Simplified<T> {
    pub result: T,
    pub removed_frequency: Vec<f64>,
}

/// Drops the listed `(player, state, action)` moves from a profile and
/// renormalizes what remains per state.
pub fn simplify_profile(
    profile: &StrategyProfile,
    removals: &[(usize, usize, usize)],
) -> Result<Simplified<StrategyProfile>> {
    let mut out = profile.clone();
    let mut removed_frequency = vec![0.0; profile.x.len()];
    for &(player, state, action) in removals {
        let dist = match player {
            1 => &mut out.x[state],
            2 => &mut out.y[state],
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "player must be 1 or 2, got {player}"
                )))
            }
        };
        if action >= dist.len() {
            return Err(Error::DimensionMismatch(format!(
                "action {action} out of range at state {state}"
            )));
        }
        removed_frequency[state] += dist[action];
        dist[action] = 0.0;
    }
    for state in 0..out.x.len() {
        for dist in [&mut out.x[state], &mut out.y[state]] {
            let sum: f64 = dist.iter().sum();
            if sum <= TOL {
                return Err(Error::RemovesEverything(state));
            }
            for p in dist.iter_mut() {
                *p /= sum;
            }
        }
    }
    Ok(Simplified {
        result: out,
        removed_frequency,
    })
}

/// Drops every Player `player` move with frequency strictly below
/// `gamma` (keeping at least the most frequent move per state).
pub fn simplify_below(
    profile: &StrategyProfile,
    player: usize,
    gamma: f64,
) -> Result<Simplified<StrategyProfile>> {
    let dists = if player == 1 { &profile.x } else { &profile.y };
    let mut removals = Vec::new();
    for (state, dist) in dists.iter().enumerate() {
        let best = dist
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(i, _)| i);
        for (action, &p) in dist.iter().enumerate() {
            if p > 0.0 && p < gamma && Some(action) != best {
                removals.push((player, state, action));
            }
        }
    }
    simplify_profile(profile, &removals)
}

/// Removes whole parts of chain rows (by explicit part values) and
/// renormalizes.
pub fn simplify_chain(chain: &Chain, removals: &[(usize, Part)]) -> Result<Simplified<Chain>> {
    let mut by_state: Vec<Vec<&Part>> = vec![Vec::new(); chain.num_states()];
    for (state, part) in removals {
        by_state[*state].push(part);
    }
    let mut rows: Vec<Vec<f64>> = chain.rows().to_vec();
    let mut removed_frequency = vec![0.0; chain.num_states()];
    for state in 0..chain.num_states() {
        if by_state[state].is_empty() {
            continue;
        }
        removed_frequency[state] = by_state[state].iter().map(|p| p.weight).sum();
        rows[state] = remove_parts_from_row(chain, state, &by_state[state])?;
    }
    let result = Chain::from_rows(
        chain.names().to_vec(),
        (0..chain.num_states())
            .map(|s| chain.is_absorbing_state(s))
            .collect(),
        rows,
    )?;
    Ok(Simplified {
        result,
        removed_frequency,
    })
}

// ---------------------------------------------------------------------------
// Frequency-removal bounds
// ---------------------------------------------------------------------------

/// Report of one removal-style check.
#[derive(Debug, Clone)]
pub struct RemovalBoundReport {
    pub gamma: f64,
    pub hypothesis: Vec<CheckEntry>,
    pub conclusions: Vec<CheckEntry>,
    pub holds: bool,
}

/// Single-state flow-preservation check. `part` is a part of the row
/// at `t` through which at least a `gamma` fraction of the taboo flow
/// `P^{B+t}(t, A)` passes; replacing the row by the part alone keeps
/// at least `gamma` of the flow from both `t` and the bystander `s`.
pub fn flow_preservation_check(
    analysis: &ChainAnalysis,
    t: usize,
    part: &Part,
    s: usize,
    taboo_b: &[usize],
    target_a: &[usize],
) -> Result<RemovalBoundReport> {
    let chain = &analysis.chain;
    validate_subrow(chain, t, part)?;
    for &u in taboo_b.iter().chain(target_a) {
        if u == s || u == t {
            return Err(Error::Hypothesis(format!(
                "sets A, B must avoid the special states; {u} collides"
            )));
        }
    }
    if s == t {
        return Err(Error::Hypothesis("s and t must be distinct".to_string()));
    }
    let mut taboo_t = taboo_b.to_vec();
    taboo_t.push(t);
    let mut taboo_s = taboo_b.to_vec();
    taboo_s.push(s);

    let base_t = analysis.taboo_probability(t, &taboo_t, target_a)?;
    let base_s = analysis.taboo_probability(s, &taboo_s, target_a)?;

    // The fraction through the part: complement replaced by a certain
    // return to t.
    let n = chain.num_states();
    let mut through_row = vec![0.0; n];
    for (u, mass) in part.mass().iter().enumerate() {
        through_row[u] += mass;
    }
    through_row[t] += 1.0 - part.weight;
    let through_chain = chain.replace_row(t, through_row)?;
    let through = ChainAnalysis::new(&through_chain).taboo_probability(t, &taboo_t, target_a)?;
    let gamma = if base_t > 0.0 { through / base_t } else { 1.0 };

    // Starred chain: the part used with certainty.
    let starred = chain.replace_row(t, part.row.clone())?;
    let starred_analysis = ChainAnalysis::new(&starred);
    let star_t = starred_analysis.taboo_probability(t, &taboo_t, target_a)?;
    let star_s = starred_analysis.taboo_probability(s, &taboo_s, target_a)?;

    let conclusions = vec![
        CheckEntry::at_least("flow from t", star_t, gamma * base_t),
        CheckEntry::at_least("flow from s", star_s, gamma * base_s),
    ];
    Ok(RemovalBoundReport {
        gamma,
        hypothesis: vec![CheckEntry::at_most("gamma below 1", gamma, 1.0)],
        holds: all_hold(&conclusions),
        conclusions,
    })
}

/// Multi-state removal check. At each state `u` carrying removals, the
/// removed frequency must stay within `gamma * P^{T+u}(u, A)` (or
/// plain `gamma` for `u` inside `A`); the renormalized chain then
/// keeps the taboo flow toward `A` within `(1 - gamma |U|)` and does
/// not inflate return flows by more than `1/(1 - 3 |U| gamma)`.
pub fn removal_bound_check(
    analysis: &ChainAnalysis,
    taboo_t: &[usize],
    target_a: &[usize],
    removals: &[(usize, Part)],
    gamma: f64,
) -> Result<RemovalBoundReport> {
    let chain = &analysis.chain;
    let n = chain.num_states();
    let u_set: Vec<usize> = {
        let mut v: Vec<usize> = removals.iter().map(|(u, _)| *u).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    for &u in taboo_t {
        if target_a.contains(&u) || u_set.contains(&u) {
            return Err(Error::Hypothesis(format!(
                "T must be disjoint from A and U; {u} collides"
            )));
        }
    }
    let mut hypothesis = vec![CheckEntry::at_most(
        "gamma below 1/(2|U|)",
        gamma,
        1.0 / (2.0 * u_set.len().max(1) as f64) - TOL,
    )];
    for &u in &u_set {
        let removed: f64 = removals
            .iter()
            .filter(|(s, _)| *s == u)
            .map(|(_, p)| p.weight)
            .sum();
        let limit = if target_a.contains(&u) {
            gamma
        } else {
            let mut taboo_u = taboo_t.to_vec();
            taboo_u.push(u);
            gamma * analysis.taboo_probability(u, &taboo_u, target_a)?
        };
        hypothesis.push(CheckEntry::at_most(
            format!("removed frequency at {u}"),
            removed,
            limit,
        ));
    }
    let removed_chain = simplify_chain(chain, removals)?.result;
    let removed_analysis = ChainAnalysis::new(&removed_chain);

    let mut conclusions = Vec::new();
    let slack = 1.0 - gamma * u_set.len() as f64;
    for x in 0..n {
        if target_a.contains(&x) {
            continue;
        }
        let mut taboo_x = taboo_t.to_vec();
        taboo_x.push(x);
        let before = analysis.taboo_probability(x, &taboo_x, target_a)?;
        let after = removed_analysis.taboo_probability(x, &taboo_x, target_a)?;
        conclusions.push(CheckEntry::at_least(
            format!("flow to A from {x}"),
            after,
            slack * before,
        ));
    }
    let reverse_slack = 1.0 - 3.0 * u_set.len() as f64 * gamma;
    let mut taboo_ta = taboo_t.to_vec();
    taboo_ta.extend_from_slice(target_a);
    for &a in target_a {
        for x in 0..n {
            if target_a.contains(&x) || taboo_t.contains(&x) {
                continue;
            }
            let before = analysis.taboo_probability(a, &taboo_ta, &[x])?;
            let after = removed_analysis.taboo_probability(a, &taboo_ta, &[x])?;
            conclusions.push(CheckEntry::at_most(
                format!("return flow {a}->{x}"),
                reverse_slack * after,
                before,
            ));
        }
    }
    Ok(RemovalBoundReport {
        gamma,
        holds: all_hold(&hypothesis) && all_hold(&conclusions),
        hypothesis,
        conclusions,
    })
}

/// Reachability-survival check: removing at every `t` in `T` a part
/// whose standalone flow toward `s` is a `gamma`-fraction of the
/// existing flow keeps `s` reachable from all of `T` when
/// `|T| gamma < 1`.
pub fn reachability_survival_check(
    analysis: &ChainAnalysis,
    t_set: &[usize],
    s: usize,
    removals: &[(usize, Part)],
) -> Result<RemovalBoundReport> {
    let chain = &analysis.chain;
    let mut gamma: f64 = 0.0;
    let mut hypothesis = Vec::new();
    for &(t, ref part) in removals {
        if !t_set.contains(&t) {
            return Err(Error::Hypothesis(format!("removal at {t} outside the set T")));
        }
        validate_subrow(chain, t, part)?;
        let base = analysis.taboo_probability(t, &[t], &[s])?;
        hypothesis.push(CheckEntry::positive(format!("s reachable from {t}"), base));
        let standalone_chain = chain.replace_row(t, part.row.clone())?;
        let standalone =
            ChainAnalysis::new(&standalone_chain).taboo_probability(t, &[t], &[s])?;
        let ratio = if base > 0.0 {
            part.weight * standalone / base
        } else {
            1.0
        };
        gamma = gamma.max(ratio);
    }
    hypothesis.push(CheckEntry::at_most(
        "|T| gamma below 1",
        t_set.len() as f64 * gamma,
        1.0 - TOL,
    ));
    let removed_chain = simplify_chain(chain, removals)?.result;
    let removed_analysis = ChainAnalysis::new(&removed_chain);
    let mut conclusions = Vec::new();
    for &t in t_set {
        let after = removed_analysis.taboo_probability(t, &[t], &[s])?;
        conclusions.push(CheckEntry::positive(
            format!("s still reachable from {t}"),
            after,
        ));
    }
    Ok(RemovalBoundReport {
        gamma,
        holds: all_hold(&hypothesis) && all_hold(&conclusions),
        hypothesis,
        conclusions,
    })
}

/// Two-sided strategy-removal check on a game: Player One drops move
/// frequencies toward `s` (a `gamma` fraction), Player Two drops the
/// parts `y_star` (a `delta` fraction of the flows to `s` and `t`),
/// and motion from `R` to `s` and from `s` to `t` must survive when
/// `(1 - 4 gamma |U|) eps > delta |U|`.
#[allow(clippy::too_many_arguments)]
pub fn joint_removal_check(
    spec: &GameSpec,
    profile: &StrategyProfile,
    r_set: &[usize],
    u_set: &[usize],
    s: usize,
    t: usize,
    x_removals: &[(usize, usize)],
    y_star: &[(usize, Vec<f64>)],
) -> Result<RemovalBoundReport> {
    if !u_set.contains(&s) || !u_set.contains(&t) || s == t {
        return Err(Error::Hypothesis(
            "s and t must be distinct members of U".to_string(),
        ));
    }
    for &u in u_set {
        if !r_set.contains(&u) {
            return Err(Error::Hypothesis(format!("{u} in U but not in R")));
        }
    }
    let chain = induce_chain(spec, profile)?;
    let analysis = ChainAnalysis::new(&chain);
    let mut hypothesis = Vec::new();

    // Mutual reachability within R.
    for &u in r_set {
        for &v in r_set {
            if u != v {
                let flow = analysis.taboo_probability(u, &[u], &[v])?;
                hypothesis.push(CheckEntry::positive(format!("motion {u}->{v}"), flow));
            }
        }
    }

    // Build x-bar and derive gamma.
    let mut gamma: f64 = 0.0;
    for &(u, action) in x_removals {
        if !u_set.contains(&u) {
            return Err(Error::Hypothesis(format!("x removal at {u} outside U")));
        }
        let freq = profile.x[u][action];
        let limit_base = if u == s {
            1.0
        } else {
            analysis.taboo_probability(u, &[u], &[s])?
        };
        if limit_base <= 0.0 {
            return Err(Error::Hypothesis(format!("no flow from {u} to s")));
        }
        gamma = gamma.max(freq / limit_base);
    }
    let x_bar = simplify_profile(
        profile,
        &x_removals
            .iter()
            .map(|&(u, a)| (1usize, u, a))
            .collect::<Vec<_>>(),
    )?
    .result;
    let chain_xbar = induce_chain(spec, &x_bar)?;
    let analysis_xbar = ChainAnalysis::new(&chain_xbar);
    let p_st_before = analysis.taboo_probability(s, &[s], &[t])?;
    let p_st_xbar = analysis_xbar.taboo_probability(s, &[s], &[t])?;
    if p_st_before <= 0.0 {
        return Err(Error::Hypothesis("no flow from s to t".to_string()));
    }
    let eps = p_st_xbar / p_st_before;
    hypothesis.push(CheckEntry::positive("eps positive", eps));

    // Derive delta from the y parts.
    let mut delta: f64 = 0.0;
    for (u, star) in y_star {
        if !u_set.contains(u) {
            return Err(Error::Hypothesis(format!("y part at {u} outside U")));
        }
        let (_, nb) = spec.action_counts(*u);
        if star.len() != nb {
            return Err(Error::DimensionMismatch(format!(
                "y part at {u} has wrong arity"
            )));
        }
        let f_star: f64 = star.iter().sum();
        if f_star <= 0.0 {
            continue;
        }
        for (b, &mass) in star.iter().enumerate() {
            if mass > profile.y[*u][b] + TOL {
                return Err(Error::InvalidPart {
                    state: *u,
                    reason: "y part exceeds the strategy".to_string(),
                });
            }
        }
        // Profile where y^u is the normalized part.
        let mut swapped = profile.clone();
        swapped.y[*u] = star.iter().map(|&m| m / f_star).collect();
        let chain_part = induce_chain(spec, &swapped)?;
        let analysis_part = ChainAnalysis::new(&chain_part);
        for &z in &[s, t] {
            let base = if *u == z {
                1.0
            } else {
                analysis.taboo_probability(*u, &[*u], &[z])?
            };
            if base <= 0.0 {
                continue;
            }
            let part_flow = if *u == z {
                1.0
            } else {
                analysis_part.taboo_probability(*u, &[*u], &[z])?
            };
            delta = delta.max(f_star * part_flow / base);
        }
    }
    let u_count = u_set.len() as f64;
    hypothesis.push(CheckEntry::at_least(
        "(1 - 4 gamma |U|) eps > delta |U|",
        (1.0 - 4.0 * gamma * u_count) * eps,
        delta * u_count + TOL,
    ));

    // Build y-bar and the final profile.
    let mut y_bar = profile.clone();
    for (u, star) in y_star {
        for (b, &mass) in star.iter().enumerate() {
            y_bar.y[*u][b] -= mass;
        }
        let sum: f64 = y_bar.y[*u].iter().sum();
        if sum <= TOL {
            return Err(Error::RemovesEverything(*u));
        }
        for p in y_bar.y[*u].iter_mut() {
            *p /= sum;
        }
    }
    let final_profile = StrategyProfile {
        x: x_bar.x.clone(),
        y: y_bar.y.clone(),
    };
    let final_chain = induce_chain(spec, &final_profile)?;
    let final_analysis = ChainAnalysis::new(&final_chain);
    let mut conclusions = Vec::new();
    for &v in r_set {
        if v == s {
            continue;
        }
        let flow = final_analysis.taboo_probability(v, &[v], &[s])?;
        conclusions.push(CheckEntry::positive(
            format!("motion {v}->s survives"),
            flow,
        ));
    }
    let flow_st = final_analysis.taboo_probability(s, &[s], &[t])?;
    conclusions.push(CheckEntry::positive("motion s->t survives", flow_st));
    Ok(RemovalBoundReport {
        gamma,
        holds: all_hold(&hypothesis) && all_hold(&conclusions),
        hypothesis,
        conclusions,
    })
}

// ---------------------------------------------------------------------------
// Relative perturbation
// ---------------------------------------------------------------------------

/// Report of the relative-perturbation continuity check.
#[derive(Debug, Clone)]
pub struct PerturbationReport {
    pub gamma: f64,
    pub changed: Vec<usize>,
    pub allowed_factor: f64,
    pub worst_taboo_factor: f64,
    pub taboo_checks: usize,
    pub harmonic_deviation: Option<f64>,
    pub harmonic_bound: Option<f64>,
    pub holds: bool,
}

/// Verifies that entry-wise relative changes of factor `gamma` at the
/// states `changed` move every sampled taboo probability by a factor
/// of at most `4 gamma |U|` and harmonic values by at most
/// `4 gamma |U| M`.
pub fn relative_perturbation_bound(
    analysis: &ChainAnalysis,
    perturbed: &Chain,
    changed: &[usize],
    gamma: f64,
    boundary: Option<&[f64]>,
    extra_subsets: &[(Vec<usize>, Vec<usize>)],
) -> Result<PerturbationReport> {
    let chain = &analysis.chain;
    let n = chain.num_states();
    if perturbed.num_states() != n {
        return Err(Error::DimensionMismatch(
            "perturbed chain has different state count".to_string(),
        ));
    }
    if gamma >= 1.0 / (2.0 * changed.len().max(1) as f64) {
        return Err(Error::Hypothesis(format!(
            "gamma {gamma} must stay below 1/(2|U|)"
        )));
    }
    for s in 0..n {
        for t in 0..n {
            let (p, q) = (chain.row(s)[t], perturbed.row(s)[t]);
            if (p == 0.0) != (q == 0.0) {
                return Err(Error::Hypothesis(format!(
                    "zero pattern changed at ({s},{t})"
                )));
            }
            if !changed.contains(&s) {
                if (p - q).abs() > TOL {
                    return Err(Error::Hypothesis(format!(
                        "row {s} changed outside the declared set"
                    )));
                }
            } else if factor_diff(p, q) > gamma + TOL {
                return Err(Error::Hypothesis(format!(
                    "entry ({s},{t}) moved by more than factor {gamma}"
                )));
            }
        }
    }
    let allowed = 4.0 * gamma * changed.len() as f64;
    let perturbed_analysis = ChainAnalysis::new(perturbed);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    {
        let mut check = |taboo: &[usize], target: &[usize], start: usize| -> Result<()> {
            let before = analysis.taboo_probability(start, taboo, target)?;
            let after = perturbed_analysis.taboo_probability(start, taboo, target)?;
            worst = worst.max(factor_diff(before, after));
            count += 1;
            Ok(())
        };
        for target in 0..n {
            for start in 0..n {
                check(&[], &[target], start)?;
                for taboo in 0..n {
                    if taboo != target {
                        check(&[taboo], &[target], start)?;
                    }
                }
            }
        }
        for (taboo, target) in extra_subsets {
            if taboo.iter().any(|u| target.contains(u)) {
                return Err(Error::OverlappingSets(taboo[0]));
            }
            for start in 0..n {
                check(taboo, target, start)?;
            }
        }
    }
    let mut holds = worst <= allowed + TOL;
    let (mut harmonic_deviation, mut harmonic_bound) = (None, None);
    if let Some(values) = boundary {
        if analysis.is_absorbing_chain {
            let r = analysis.harmonic_payoffs(values)?;
            let r_pert = perturbed_analysis.harmonic_payoffs(values)?;
            let spread = boundary_spread(chain, values);
            let deviation = (0..n)
                .map(|s| (r[s] - r_pert[s]).abs())
                .fold(0.0, f64::max);
            let bound = allowed * spread;
            holds &= deviation <= bound + TOL;
            harmonic_deviation = Some(deviation);
            harmonic_bound = Some(bound);
        }
    }
    Ok(PerturbationReport {
        gamma,
        changed: changed.to_vec(),
        allowed_factor: allowed,
        worst_taboo_factor: worst,
        taboo_checks: count,
        harmonic_deviation,
        harmonic_bound,
        holds,
    })
}

fn boundary_spread(chain: &Chain, values: &[f64]) -> f64 {
    let abs: Vec<f64> = chain
        .absorbing_states()
        .iter()
        .map(|&a| values[a])
        .collect();
    let hi = abs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    (hi - lo).max(0.0)
}

// ---------------------------------------------------------------------------
// Extension and contraction
// ---------------------------------------------------------------------------

/// A partition of the states into blocks with designated exits: all
/// motion out of a block flows through its exit parts.
#[derive(Debug, Clone)]
pub struct ExitSystem {
    /// Blocks of states; absorbing states must be singletons.
    pub partition: Vec<Vec<usize>>,
    /// One representative per block (a member).
    pub representatives: Vec<usize>,
    /// Exit parts per state (empty at absorbing states).
    pub exits: Vec<Vec<Part>>,
}

impl ExitSystem {
    /// The trivial system: every state its own block, the whole row as
    /// the single exit.
    pub fn trivial(chain: &Chain) -> ExitSystem {
        let n = chain.num_states();
        ExitSystem {
            partition: (0..n).map(|s| vec![s]).collect(),
            representatives: (0..n).collect(),
            exits: (0..n)
                .map(|s| {
                    if chain.is_absorbing_state(s) {
                        Vec::new()
                    } else {
                        vec![Part {
                            label: PartLabel::Whole,
                            weight: 1.0,
                            row: chain.row(s).to_vec(),
                        }]
                    }
                })
                .collect(),
        }
    }

    fn validate(&self, chain: &Chain) -> Result<Vec<usize>> {
        let n = chain.num_states();
        let mut block_of = vec![usize::MAX; n];
        if self.representatives.len() != self.partition.len() {
            return Err(Error::DimensionMismatch(
                "one representative per block required".to_string(),
            ));
        }
        for (i, block) in self.partition.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::InvalidParameter("empty block".to_string()));
            }
            if !block.contains(&self.representatives[i]) {
                return Err(Error::InvalidParameter(format!(
                    "representative of block {i} is not a member"
                )));
            }
            for &s in block {
                if s >= n || block_of[s] != usize::MAX {
                    return Err(Error::InvalidParameter(format!(
                        "state {s} missing or covered twice"
                    )));
                }
                if chain.is_absorbing_state(s) && block.len() > 1 {
                    return Err(Error::InvalidParameter(format!(
                        "absorbing state {s} must form a singleton block"
                    )));
                }
                block_of[s] = i;
            }
        }
        if block_of.iter().any(|&b| b == usize::MAX) {
            return Err(Error::InvalidParameter(
                "partition does not cover the states".to_string(),
            ));
        }
        if self.exits.len() != n {
            return Err(Error::DimensionMismatch(
                "exit lists must be indexed by state".to_string(),
            ));
        }
        for s in 0..n {
            if chain.is_absorbing_state(s) {
                if !self.exits[s].is_empty() {
                    return Err(Error::InvalidPart {
                        state: s,
                        reason: "absorbing states carry no exits".to_string(),
                    });
                }
                continue;
            }
            let mut total_mass = vec![0.0; n];
            let mut total_weight = 0.0;
            for part in &self.exits[s] {
                validate_subrow(chain, s, part)?;
                total_weight += part.weight;
                for (t, mass) in part.mass().iter().enumerate() {
                    total_mass[t] += mass;
                }
            }
            if total_weight > 1.0 + TOL {
                return Err(Error::InvalidPart {
                    state: s,
                    reason: "exit weights exceed 1".to_string(),
                });
            }
            for t in 0..n {
                if block_of[t] != block_of[s] && (chain.row(s)[t] - total_mass[t]).abs() > 1e-7
                {
                    return Err(Error::InvalidPart {
                        state: s,
                        reason: format!("out-of-block motion to {t} not covered by exits"),
                    });
                }
                if total_mass[t] > chain.row(s)[t] + 1e-7 {
                    return Err(Error::InvalidPart {
                        state: s,
                        reason: format!("exit mass exceeds row mass at {t}"),
                    });
                }
            }
        }
        Ok(block_of)
    }
}

/// One taboo-probability factor comparison between the original and
/// extended chains.
#[derive(Debug, Clone)]
pub struct TabooFactorCheck {
    pub taboo_blocks: Vec<usize>,
    pub target_blocks: Vec<usize>,
    pub start: usize,
    pub factor: f64,
    pub holds: bool,
}

/// Verification summary of a contraction.
#[derive(Debug, Clone)]
pub struct ContractReport {
    /// Number of non-singleton blocks.
    pub n_multi: usize,
    pub delta: f64,
    /// Whether `delta < 1/(2N)` (the factor bounds are only claimed
    /// under it).
    pub delta_small_enough: bool,
    pub allowed_taboo_factor: f64,
    pub taboo_checks: Vec<TabooFactorCheck>,
    pub worst_taboo_factor: f64,
    /// `max |r_ext(rep^in) - r_sharp(rep)|`.
    pub representative_match: f64,
    /// `max_s |r_ext(s^in) - r(s)|` against `4 M N delta`.
    pub harmonic_deviation: f64,
    pub harmonic_bound: f64,
    pub holds: bool,
}

/// The extended and contracted chains with their index maps.
#[derive(Debug, Clone)]
pub struct ContractionResult {
    pub original: Chain,
    pub extended: Chain,
    pub contracted: Chain,
    /// State -> index of its arrival copy in the extended chain.
    pub to_arrival: Vec<usize>,
    /// State -> index of its cycling copy (None for absorbing).
    pub to_cycle: Vec<Option<usize>>,
    /// State -> block index.
    pub block_of: Vec<usize>,
    /// Block -> state index in the contracted chain.
    pub sharp_of_block: Vec<usize>,
    /// The exit parts per state, as given.
    pub exit_parts: Vec<Vec<Part>>,
    /// `(state, exit position)` -> part label in the contracted chain.
    pub exit_labels: Vec<Vec<PartLabel>>,
    pub report: ContractReport,
}

/// Builds the extended chain (separate arrival and cycling copies per
/// state) and the contracted chain (one state per block, rows given by
/// the first-exit distribution from the representative), then verifies
/// the taboo-factor and harmonic-value guarantees.
///
/// `delta` is the caller's bound on the in-block exit-avoidance
/// probability: every ordered in-block pair must travel without exits
/// with probability at least `1 - delta`.
pub fn contract(
    analysis: &ChainAnalysis,
    exits: &ExitSystem,
    delta: f64,
    boundary: &[f64],
) -> Result<ContractionResult> {
    let chain = &analysis.chain;
    if !analysis.is_absorbing_chain {
        return Err(Error::NotAbsorbing(
            analysis.trapped_class.clone().unwrap_or_default(),
        ));
    }
    let block_of = exits.validate(chain)?;
    let n = chain.num_states();
    let n_blocks = exits.partition.len();
    let n_multi = exits.partition.iter().filter(|b| b.len() > 1).count();

    // Exit frequency and the in-block complement row per state.
    let mut f_exit = vec![0.0; n];
    let mut complement: Vec<Option<Vec<f64>>> = vec![None; n];
    for s in 0..n {
        if chain.is_absorbing_state(s) {
            continue;
        }
        let refs: Vec<&Part> = exits.exits[s].iter().collect();
        f_exit[s] = refs.iter().map(|p| p.weight).sum();
        if f_exit[s] < 1.0 - TOL {
            let mut row = remove_parts_from_row(chain, s, &refs)?;
            // Out-of-block leftovers must be numerical dust; clear it
            // and renormalize so the complement stays in the block.
            for (t, mass) in row.iter_mut().enumerate() {
                if block_of[t] != block_of[s] {
                    if *mass > 1e-9 {
                        return Err(Error::InvalidPart {
                            state: s,
                            reason: format!("non-exit motion leaves the block toward {t}"),
                        });
                    }
                    *mass = 0.0;
                }
            }
            let sum: f64 = row.iter().sum();
            if sum <= TOL {
                return Err(Error::RemovesEverything(s));
            }
            for mass in row.iter_mut() {
                *mass /= sum;
            }
            complement[s] = Some(row);
        }
        f_exit[s] = f_exit[s].min(1.0);
    }

    // Hypothesis: in-block travel avoids exits with probability at
    // least 1 - delta, for every ordered pair in every block.
    for block in &exits.partition {
        if block.len() < 2 {
            continue;
        }
        for &from in block {
            for &to in block {
                if from == to {
                    continue;
                }
                let avoid = in_block_reach(block, &f_exit, &complement, from, to);
                if avoid + TOL < 1.0 - delta {
                    return Err(Error::Hypothesis(format!(
                        "in-block travel {from}->{to} avoids exits with probability \
                         {avoid}, below 1 - delta"
                    )));
                }
            }
        }
    }

    // ---- extended chain ----
    let mut to_arrival = vec![0usize; n];
    let mut to_cycle: Vec<Option<usize>> = vec![None; n];
    let mut ext_names = Vec::new();
    let mut ext_absorbing = Vec::new();
    for s in 0..n {
        to_arrival[s] = ext_names.len();
        ext_names.push(format!("{}^in", chain.name(s)));
        ext_absorbing.push(chain.is_absorbing_state(s));
    }
    for s in 0..n {
        if !chain.is_absorbing_state(s) {
            to_cycle[s] = Some(ext_names.len());
            ext_names.push(format!("{}^cy", chain.name(s)));
            ext_absorbing.push(false);
        }
    }
    let n_ext = ext_names.len();
    let mut ext_rows = vec![vec![0.0; n_ext]; n_ext];
    for s in 0..n {
        let sa = to_arrival[s];
        if chain.is_absorbing_state(s) {
            ext_rows[sa][sa] = 1.0;
            continue;
        }
        // Arrival routes to the representative's cycling copy.
        let rep = exits.representatives[block_of[s]];
        ext_rows[sa][to_cycle[rep].unwrap()] = 1.0;
        // Cycling copy: exits to arrival copies, complement within the
        // block to cycling copies.
        let sb = to_cycle[s].unwrap();
        for part in &exits.exits[s] {
            for (t, mass) in part.mass().iter().enumerate() {
                ext_rows[sb][to_arrival[t]] += mass;
            }
        }
        if let Some(row) = &complement[s] {
            for (t, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    ext_rows[sb][to_cycle[t].expect("complement stays in block")] +=
                        (1.0 - f_exit[s]) * p;
                }
            }
        }
    }
    let extended = Chain::from_rows(ext_names, ext_absorbing, ext_rows)?;

    // ---- contracted chain ----
    let mut sharp_of_block = vec![0usize; n_blocks];
    let mut sharp_names = Vec::new();
    let mut sharp_absorbing = Vec::new();
    for (i, block) in exits.partition.iter().enumerate() {
        sharp_of_block[i] = sharp_names.len();
        let rep = exits.representatives[i];
        sharp_names.push(chain.name(rep).to_string());
        sharp_absorbing.push(block.len() == 1 && chain.is_absorbing_state(block[0]));
    }
    let mut sharp_rows = Vec::with_capacity(n_blocks);
    let mut sharp_parts = Vec::with_capacity(n_blocks);
    let mut exit_labels: Vec<Vec<PartLabel>> = vec![Vec::new(); n];
    for (i, block) in exits.partition.iter().enumerate() {
        if sharp_absorbing[i] {
            let mut row = vec![0.0; n_blocks];
            row[sharp_of_block[i]] = 1.0;
            sharp_parts.push(vec![Part {
                label: PartLabel::Whole,
                weight: 1.0,
                row: row.clone(),
            }]);
            sharp_rows.push(row);
            continue;
        }
        let rep = exits.representatives[i];
        let visits = in_block_visits(block, &f_exit, &complement, rep)?;
        let mut parts = Vec::new();
        let mut row = vec![0.0; n_blocks];
        for (pos, &u) in block.iter().enumerate() {
            for (j, part) in exits.exits[u].iter().enumerate() {
                let freq = visits[pos] * part.weight;
                if freq <= 0.0 {
                    continue;
                }
                let mut mapped = vec![0.0; n_blocks];
                for (t, &p) in part.row.iter().enumerate() {
                    mapped[sharp_of_block[block_of[t]]] += p;
                }
                for (t, &p) in mapped.iter().enumerate() {
                    row[t] += freq * p;
                }
                let label = PartLabel::Named(format!("exit@{u}#{j}"));
                exit_labels[u].push(label.clone());
                parts.push(Part {
                    label,
                    weight: freq,
                    row: mapped,
                });
            }
        }
        let total: f64 = parts.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > 1e-7 {
            return Err(Error::InvalidParameter(format!(
                "first-exit frequencies sum to {total} in block {i}"
            )));
        }
        for part in parts.iter_mut() {
            part.weight /= total;
        }
        for value in row.iter_mut() {
            *value /= total;
        }
        sharp_parts.push(parts);
        sharp_rows.push(row);
    }
    let contracted = Chain::with_parts(sharp_names, sharp_absorbing, sharp_rows, sharp_parts)?;

    // ---- verification ----
    let ext_analysis = ChainAnalysis::new(&extended);
    let sharp_analysis = ChainAnalysis::new(&contracted);
    let allowed = 4.0 * n_multi as f64 * delta;
    let mut taboo_checks = Vec::new();
    let mut worst: f64 = 0.0;
    for bi in 0..n_blocks {
        for bj in 0..n_blocks {
            if bi == bj {
                continue;
            }
            for &start in &[exits.representatives[bi], exits.representatives[bj]] {
                let factor = block_taboo_factor(
                    analysis,
                    &ext_analysis,
                    exits,
                    &to_arrival,
                    &to_cycle,
                    &[bi],
                    &[bj],
                    start,
                )?;
                worst = worst.max(factor);
                taboo_checks.push(TabooFactorCheck {
                    taboo_blocks: vec![bi],
                    target_blocks: vec![bj],
                    start,
                    factor,
                    holds: factor <= allowed + TOL,
                });
            }
        }
    }
    let mut ext_boundary = vec![0.0; extended.num_states()];
    for s in 0..n {
        if chain.is_absorbing_state(s) {
            ext_boundary[to_arrival[s]] = boundary[s];
        }
    }
    let r = analysis.harmonic_payoffs(boundary)?;
    let r_ext = ext_analysis.harmonic_payoffs(&ext_boundary)?;
    let mut sharp_boundary = vec![0.0; contracted.num_states()];
    for (bi, block) in exits.partition.iter().enumerate() {
        if block.len() == 1 && chain.is_absorbing_state(block[0]) {
            sharp_boundary[sharp_of_block[bi]] = boundary[block[0]];
        }
    }
    let r_sharp = sharp_analysis.harmonic_payoffs(&sharp_boundary)?;
    let representative_match = (0..n_blocks)
        .map(|bi| {
            let rep = exits.representatives[bi];
            (r_ext[to_arrival[rep]] - r_sharp[sharp_of_block[bi]]).abs()
        })
        .fold(0.0, f64::max);
    let spread = boundary_spread(chain, boundary);
    let harmonic_deviation = (0..n)
        .map(|s| (r_ext[to_arrival[s]] - r[s]).abs())
        .fold(0.0, f64::max);
    let harmonic_bound = 4.0 * spread * n_multi as f64 * delta;
    let delta_small_enough = n_multi == 0 || delta < 1.0 / (2.0 * n_multi as f64);
    let holds = representative_match <= 1e-9
        && (!delta_small_enough
            || (worst <= allowed + TOL && harmonic_deviation <= harmonic_bound + TOL));
    let report = ContractReport {
        n_multi,
        delta,
        delta_small_enough,
        allowed_taboo_factor: allowed,
        taboo_checks,
        worst_taboo_factor: worst,
        representative_match,
        harmonic_deviation,
        harmonic_bound,
        holds,
    };
    Ok(ContractionResult {
        original: chain.clone(),
        extended,
        contracted,
        to_arrival,
        to_cycle,
        block_of,
        sharp_of_block,
        exit_parts: exits.exits.clone(),
        exit_labels,
        report,
    })
}

/// Probability of reaching `to`'s cycling copy from `from`'s before
/// using any exit, inside one block.
fn in_block_reach(
    block: &[usize],
    f_exit: &[f64],
    complement: &[Option<Vec<f64>>],
    from: usize,
    to: usize,
) -> f64 {
    let k = block.len();
    let pos = |s: usize| block.iter().position(|&u| u == s).unwrap();
    let mut w = nalgebra::DMatrix::<f64>::zeros(k, k);
    for (i, &u) in block.iter().enumerate() {
        if let Some(row) = &complement[u] {
            for (j, &v) in block.iter().enumerate() {
                w[(i, j)] = (1.0 - f_exit[u]) * row[v];
            }
        }
    }
    let target = pos(to);
    let mut a = nalgebra::DMatrix::<f64>::identity(k, k);
    let mut b = nalgebra::DVector::<f64>::zeros(k);
    for i in 0..k {
        if i == target {
            continue;
        }
        for j in 0..k {
            if j != target {
                a[(i, j)] -= w[(i, j)];
            }
        }
        b[i] = w[(i, target)];
    }
    b[target] = 1.0;
    match crate::chain::solve_dense(&a, &b) {
        Ok(x) => x[pos(from)].clamp(0.0, 1.0),
        Err(_) => 0.0,
    }
}

/// Expected in-block visit counts from the representative before the
/// first exit use.
fn in_block_visits(
    block: &[usize],
    f_exit: &[f64],
    complement: &[Option<Vec<f64>>],
    rep: usize,
) -> Result<Vec<f64>> {
    let k = block.len();
    let mut w = nalgebra::DMatrix::<f64>::zeros(k, k);
    for (i, &u) in block.iter().enumerate() {
        if let Some(row) = &complement[u] {
            for (j, &v) in block.iter().enumerate() {
                w[(i, j)] = (1.0 - f_exit[u]) * row[v];
            }
        }
    }
    let system = (nalgebra::DMatrix::<f64>::identity(k, k) - w.transpose()).lu();
    let mut e = nalgebra::DVector::<f64>::zeros(k);
    let rep_pos = block.iter().position(|&u| u == rep).unwrap();
    e[rep_pos] = 1.0;
    let visits = system
        .solve(&e)
        .ok_or_else(|| Error::InvalidParameter("block never exits".to_string()))?;
    Ok(visits.iter().cloned().collect())
}

/// Factor difference between an original taboo probability over block
/// unions and its extended-chain counterpart.
#[allow(clippy::too_many_arguments)]
fn block_taboo_factor(
    analysis: &ChainAnalysis,
    ext_analysis: &ChainAnalysis,
    exits: &ExitSystem,
    to_arrival: &[usize],
    to_cycle: &[Option<usize>],
    taboo_blocks: &[usize],
    target_blocks: &[usize],
    start: usize,
) -> Result<f64> {
    let mut taboo = Vec::new();
    let mut target = Vec::new();
    let mut taboo_ext = Vec::new();
    let mut target_ext = Vec::new();
    for &bi in taboo_blocks {
        for &s in &exits.partition[bi] {
            taboo.push(s);
            taboo_ext.push(to_arrival[s]);
            if let Some(b) = to_cycle[s] {
                taboo_ext.push(b);
            }
        }
    }
    for &bj in target_blocks {
        for &s in &exits.partition[bj] {
            target.push(s);
            target_ext.push(to_arrival[s]);
            if let Some(b) = to_cycle[s] {
                target_ext.push(b);
            }
        }
    }
    let before = analysis.taboo_probability(start, &taboo, &target)?;
    let ext_start = to_cycle[start].unwrap_or(to_arrival[start]);
    let after = ext_analysis.taboo_probability(ext_start, &taboo_ext, &target_ext)?;
    Ok(factor_diff(before, after))
}

/// Exit-statistic comparison between the original and contracted
/// chains (all five bounds).
#[derive(Debug, Clone)]
pub struct ExitComparison {
    pub g: f64,
    pub g_sharp: f64,
    pub nu: f64,
    pub nu_sharp: f64,
    pub v: f64,
    pub v_sharp: f64,
    pub checks: Vec<CheckEntry>,
    pub holds: bool,
}

/// Compares `g`, `nu`, and `v` of the exit at `(state, exit_pos)` with
/// their contracted counterparts and checks the five deviation bounds.
pub fn exit_statistics_compare(
    result: &ContractionResult,
    state: usize,
    exit_pos: usize,
    boundary: &[f64],
) -> Result<ExitComparison> {
    let analysis = ChainAnalysis::new(&result.original);
    let exits_at_state = &result.exit_labels[state];
    if exit_pos >= exits_at_state.len() {
        return Err(Error::InvalidParameter(format!(
            "state {state} has no exit #{exit_pos}"
        )));
    }
    let sharp_state = result.sharp_of_block[result.block_of[state]];
    let label = &exits_at_state[exit_pos];
    let sharp_part = result
        .contracted
        .part(sharp_state, label)
        .ok_or_else(|| Error::InvalidParameter("exit part missing in contraction".into()))?
        .clone();
    let original_part = result
        .exit_parts
        .get(state)
        .and_then(|list| list.get(exit_pos))
        .cloned()
        .ok_or_else(|| Error::InvalidParameter("exit part not recorded".into()))?;

    let stats = analysis.part_statistics(state, &original_part, boundary)?;
    if stats.g <= 0.0 {
        return Err(Error::Hypothesis(
            "exit comparison requires g > 0".to_string(),
        ));
    }
    let sharp_analysis = ChainAnalysis::new(&result.contracted);
    let mut sharp_boundary = vec![0.0; result.contracted.num_states()];
    for s in 0..result.original.num_states() {
        if result.original.is_absorbing_state(s) {
            sharp_boundary[result.sharp_of_block[result.block_of[s]]] = boundary[s];
        }
    }
    let sharp_stats = sharp_analysis.part_statistics(sharp_state, &sharp_part, &sharp_boundary)?;

    let n_multi = result.report.n_multi as f64;
    let delta = result.report.delta;
    let spread = boundary_spread(&result.original, boundary);
    let (g, nu, v) = (stats.g, stats.nu, stats.v);
    let (g_sharp, nu_sharp, v_sharp) = (sharp_stats.g, sharp_stats.nu, sharp_stats.v);
    let four = 4.0 * n_multi * delta;
    let checks = vec![
        CheckEntry::at_most("|g - g#|", (g - g_sharp).abs(), four + delta),
        CheckEntry::at_most(
            "g factor",
            factor_diff(g, g_sharp),
            four + 2.0 * delta / nu.max(f64::MIN_POSITIVE),
        ),
        CheckEntry::at_most(
            "nu factor",
            factor_diff(nu, nu_sharp),
            four + 2.0 * delta + (four + delta) / g,
        ),
        CheckEntry::at_most("|nu - nu#|", (nu - nu_sharp).abs(), 2.0 * four + 4.0 * delta),
        CheckEntry::at_most(
            "|v - v#|",
            (v - v_sharp).abs(),
            spread
                * (2.0 * four + delta / g)
                    .min(2.0 * four + 2.0 * delta / nu.max(f64::MIN_POSITIVE)),
        ),
    ];
    Ok(ExitComparison {
        g,
        g_sharp,
        nu,
        nu_sharp,
        v,
        v_sharp,
        holds: all_hold(&checks),
        checks,
    })
}

// ---------------------------------------------------------------------------
// Single-state replacement
// ---------------------------------------------------------------------------

/// How the row at the target state is rebuilt.
#[derive(Debug, Clone)]
pub enum ReplaceMode {
    /// Use an existing part of the row alone (requires importance
    /// `nu(p) >= eps`).
    PartOfRow(Part),
    /// Use an alternative transition (requires `g(p) >= eps`).
    Replacement(Vec<f64>),
    /// `lambda` on the part, `1 - lambda` on the replacement; both
    /// sides must satisfy their own condition at `eps`.
    Convex {
        part: Part,
        replacement: Vec<f64>,
        lambda: f64,
    },
}

/// Report of a single-row replacement.
#[derive(Debug, Clone)]
pub struct ReplaceReport {
    pub eps: f64,
    pub hypothesis: Vec<CheckEntry>,
    /// Per other non-absorbing state: `(state, a_new, eps * a_old)`.
    pub rate_checks: Vec<(usize, f64, f64)>,
    pub new_chain_absorbing: bool,
    pub holds: bool,
}

/// Replaces the transition at `t` and verifies that every other
/// state's absorption rate keeps at least an `eps` fraction of its
/// old value.
pub fn replace_transition(
    analysis: &ChainAnalysis,
    t: usize,
    mode: &ReplaceMode,
    eps: f64,
) -> Result<(Chain, ReplaceReport)> {
    let chain = &analysis.chain;
    if chain.is_absorbing_state(t) {
        return Err(Error::InvalidParameter(
            "cannot replace the row of an absorbing state".to_string(),
        ));
    }
    if !(0.0 < eps && eps <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "eps must lie in (0,1], got {eps}"
        )));
    }
    let mut hypothesis = Vec::new();
    let new_row = match mode {
        ReplaceMode::PartOfRow(part) => {
            validate_subrow(chain, t, part)?;
            let g = analysis.part_g(t, part);
            let a = analysis.absorption_rate[t];
            let nu = if a > 0.0 { part.weight * g / a } else { 0.0 };
            hypothesis.push(CheckEntry::at_least("nu(p) >= eps", nu, eps));
            part.row.clone()
        }
        ReplaceMode::Replacement(row) => {
            let g = analysis.part_g(t, &Part::replacement(row.clone()));
            hypothesis.push(CheckEntry::at_least("g(p) >= eps", g, eps));
            row.clone()
        }
        ReplaceMode::Convex {
            part,
            replacement,
            lambda,
        } => {
            if !(0.0..=1.0).contains(lambda) {
                return Err(Error::InvalidParameter("lambda outside [0,1]".into()));
            }
            validate_subrow(chain, t, part)?;
            let g_part = analysis.part_g(t, part);
            let a = analysis.absorption_rate[t];
            let nu = if a > 0.0 { part.weight * g_part / a } else { 0.0 };
            hypothesis.push(CheckEntry::at_least("nu(p) >= eps", nu, eps));
            let g_repl = analysis.part_g(t, &Part::replacement(replacement.clone()));
            hypothesis.push(CheckEntry::at_least("g(q) >= eps", g_repl, eps));
            part.row
                .iter()
                .zip(replacement.iter())
                .map(|(&p, &q)| lambda * p + (1.0 - lambda) * q)
                .collect()
        }
    };
    if !all_hold(&hypothesis) {
        return Err(Error::Hypothesis(format!(
            "replacement precondition failed: {hypothesis:?}"
        )));
    }
    let new_chain = chain.replace_row(t, new_row)?;
    let new_analysis = ChainAnalysis::new(&new_chain);
    let mut rate_checks = Vec::new();
    let mut holds = new_analysis.is_absorbing_chain || !analysis.is_absorbing_chain;
    for s in chain.non_absorbing_states() {
        if s == t {
            continue;
        }
        let lhs = new_analysis.absorption_rate[s];
        let rhs = eps * analysis.absorption_rate[s];
        holds &= lhs + TOL >= rhs;
        rate_checks.push((s, lhs, rhs));
    }
    let report = ReplaceReport {
        eps,
        hypothesis,
        rate_checks,
        new_chain_absorbing: new_analysis.is_absorbing_chain,
        holds,
    };
    Ok((new_chain, report))
}

// ---------------------------------------------------------------------------
// Polarization
// ---------------------------------------------------------------------------

/// Per-state polarization data: the value-lowering part to neutralize,
/// the replacement transition, and the value-raising part.
#[derive(Debug, Clone, Default)]
pub struct PolarizeInput {
    pub p_star: Option<Part>,
    /// Alternative transition with `w2 <= r2 - eps` and `v1` close to
    /// `r1`.
    pub p_alt: Option<Vec<f64>>,
    /// Part of the row with `w2 > r2` (checked during selection).
    pub q: Option<Part>,
}

/// Outcome of the polarization sweep.
#[derive(Debug, Clone)]
pub struct PolarizeReport {
    pub t_set: Vec<usize>,
    pub hypothesis: Vec<CheckEntry>,
    /// `lambda` per polarized state.
    pub lambdas: Vec<(usize, f64)>,
    /// `max_t |sum_u row_T(u|t) r2(u) - r2(t)|` over polarized states.
    pub lambda_residual: f64,
    /// Harmonic residual of Player Two values on the intermediate
    /// chain (value-lowering parts kept outside `T`).
    pub r2_preservation_residual: f64,
    pub deviation1: f64,
    pub deviation2: f64,
    pub eps: f64,
    /// Whether `delta` satisfies the stated smallness requirement
    /// `delta < eps^(3N+1) / (2N (3N)^N)`.
    pub delta_bound_ok: bool,
    pub new_chain_absorbing: bool,
    pub holds: bool,
}

/// Runs the polarization sweep: iteratively selects states whose
/// value-lowering part keeps importance at least `eps^2 / 2N`, mixes
/// the replacement with the value-raising part so Player Two's value
/// is preserved exactly, discards the value-lowering parts elsewhere,
/// and verifies that both harmonic functions move by at most `eps`.
pub fn polarize(
    analysis: &ChainAnalysis,
    boundary1: &[f64],
    boundary2: &[f64],
    inputs: &[PolarizeInput],
    eps: f64,
    delta: f64,
    gamma: f64,
) -> Result<(Chain, PolarizeReport)> {
    let chain = &analysis.chain;
    let n = chain.num_states();
    if inputs.len() != n {
        return Err(Error::DimensionMismatch(
            "one polarization input per state required".to_string(),
        ));
    }
    if !(0.0 < gamma && gamma < delta && delta < eps && eps < 0.5) {
        return Err(Error::InvalidParameter(
            "need 0 < gamma < delta < eps < 1/2".to_string(),
        ));
    }
    let r1 = analysis.harmonic_payoffs(boundary1)?;
    let r2 = analysis.harmonic_payoffs(boundary2)?;
    let n_int = chain.non_absorbing_states().len().max(1) as f64;
    let delta_bound_ok = {
        let log_bound =
            (3.0 * n_int + 1.0) * eps.ln() - ((2.0 * n_int).ln() + n_int * (3.0 * n_int).ln());
        delta.ln() < log_bound
    };

    let mut hypothesis = Vec::new();
    let mut w2_star = vec![f64::NAN; n];
    let mut nu_star = vec![0.0; n];
    let mut w2_alt = vec![f64::NAN; n];
    let mut w2_q = vec![f64::NAN; n];
    for s in 0..n {
        let input = &inputs[s];
        if chain.is_absorbing_state(s) {
            if input.p_star.is_some() || input.p_alt.is_some() || input.q.is_some() {
                return Err(Error::InvalidParameter(format!(
                    "polarization data at absorbing state {s}"
                )));
            }
            continue;
        }
        let phi = analysis.absorption_values_avoiding(s, boundary2);
        let phi1 = analysis.absorption_values_avoiding(s, boundary1);
        if let Some(p_star) = &input.p_star {
            validate_subrow(chain, s, p_star)?;
            let stats = analysis.part_statistics_with(s, p_star, &r2, &phi)?;
            w2_star[s] = stats.w;
            nu_star[s] = stats.nu;
            hypothesis.push(CheckEntry::at_most(
                format!("w2(p*) <= r2 - eps at {s}"),
                stats.w,
                r2[s] - eps,
            ));
            if stats.nu >= gamma {
                let Some(alt) = &input.p_alt else {
                    return Err(Error::Hypothesis(format!(
                        "state {s} needs an alternative transition (nu(p*) >= gamma)"
                    )));
                };
                let alt_part = Part::replacement(alt.clone());
                let alt2 = analysis.part_statistics_with(s, &alt_part, &r2, &phi)?;
                let alt1 = analysis.part_statistics_with(s, &alt_part, &r1, &phi1)?;
                w2_alt[s] = alt2.w;
                hypothesis.push(CheckEntry::at_most(
                    format!("w2(p) <= r2 - eps at {s}"),
                    alt2.w,
                    r2[s] - eps,
                ));
                hypothesis.push(CheckEntry::at_most(
                    format!("|v1(p) - r1| <= delta at {s}"),
                    (alt1.v - r1[s]).abs(),
                    delta,
                ));
                let Some(q) = &input.q else {
                    return Err(Error::Hypothesis(format!(
                        "state {s} needs a value-raising part (nu(p*) >= gamma)"
                    )));
                };
                validate_subrow(chain, s, q)?;
                let q_stats = analysis.part_statistics_with(s, q, &r2, &phi)?;
                w2_q[s] = q_stats.w;
                let refs = [q, p_star];
                let d = complement_part(chain, s, &refs)?;
                let lhs = match d {
                    Some(d_part) => {
                        let d_stats = analysis.part_statistics_with(s, &d_part, &r2, &phi)?;
                        (d_stats.v - r2[s]) * d_stats.nu
                    }
                    None => 0.0,
                };
                hypothesis.push(CheckEntry::at_most(
                    format!("(v2(qd) - r2) nu(qd) at {s}"),
                    lhs,
                    n_int * delta / eps,
                ));
            }
        }
    }

    // Selection loop on the intermediate chain (value-lowering parts
    // kept outside T).
    let threshold = eps * eps / (2.0 * n_int);
    let mut t_set: Vec<usize> = Vec::new();
    let mut lambdas: Vec<(usize, f64)> = Vec::new();
    let lambda_for = |s: usize| -> Option<f64> {
        let (wq, wp) = (w2_q[s], w2_alt[s]);
        if !wq.is_finite() || !wp.is_finite() || wq <= r2[s] {
            return None;
        }
        Some((wq - r2[s]) / (wq - wp))
    };
    loop {
        let mut work = chain.clone();
        for &(t, lambda) in &lambdas {
            let q = inputs[t].q.as_ref().unwrap();
            let alt = inputs[t].p_alt.as_ref().unwrap();
            let row: Vec<f64> = alt
                .iter()
                .zip(q.row.iter())
                .map(|(&p, &qv)| lambda * p + (1.0 - lambda) * qv)
                .collect();
            work = work.replace_row(t, row)?;
        }
        let work_analysis = ChainAnalysis::new(&work);
        let mut best: Option<(usize, f64)> = None;
        for s in 0..n {
            if t_set.contains(&s) || chain.is_absorbing_state(s) {
                continue;
            }
            let Some(p_star) = &inputs[s].p_star else {
                continue;
            };
            if nu_star[s] < gamma || lambda_for(s).is_none() {
                continue;
            }
            let g_work = work_analysis.part_g(s, p_star);
            let a_work = work_analysis.absorption_rate[s];
            if a_work <= 0.0 {
                continue;
            }
            let nu_work = p_star.weight * g_work / a_work;
            if nu_work >= threshold {
                match best {
                    Some((_, current)) if current >= nu_work => {}
                    _ => best = Some((s, nu_work)),
                }
            }
        }
        let Some((pick, _)) = best else {
            break;
        };
        let lambda = lambda_for(pick).unwrap();
        t_set.push(pick);
        lambdas.push((pick, lambda));
    }

    // Intermediate chain: polarized rows in T, everything else as is.
    let mut intermediate = chain.clone();
    for &(t, lambda) in &lambdas {
        let q = inputs[t].q.as_ref().unwrap();
        let alt = inputs[t].p_alt.as_ref().unwrap();
        let row: Vec<f64> = alt
            .iter()
            .zip(q.row.iter())
            .map(|(&p, &qv)| lambda * p + (1.0 - lambda) * qv)
            .collect();
        intermediate = intermediate.replace_row(t, row)?;
    }
    let intermediate_analysis = ChainAnalysis::new(&intermediate);
    let r2_preservation_residual = if intermediate_analysis.is_absorbing_chain {
        let r2_mid = intermediate_analysis.harmonic_payoffs(boundary2)?;
        (0..n)
            .map(|s| (r2_mid[s] - r2[s]).abs())
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };

    // Final chain: discard the value-lowering parts outside T.
    let mut final_chain = intermediate;
    for s in 0..n {
        if t_set.contains(&s) || chain.is_absorbing_state(s) {
            continue;
        }
        if let Some(p_star) = &inputs[s].p_star {
            if p_star.weight > 0.0 {
                let row = remove_parts_from_row(chain, s, &[p_star])?;
                final_chain = final_chain.replace_row(s, row)?;
            }
        }
    }
    let final_analysis = ChainAnalysis::new(&final_chain);
    let new_chain_absorbing = final_analysis.is_absorbing_chain;
    let (deviation1, deviation2, lambda_residual);
    if new_chain_absorbing {
        let r1_new = final_analysis.harmonic_payoffs(boundary1)?;
        let r2_new = final_analysis.harmonic_payoffs(boundary2)?;
        deviation1 = (0..n)
            .map(|s| (r1_new[s] - r1[s]).abs())
            .fold(0.0, f64::max);
        deviation2 = (0..n)
            .map(|s| (r2_new[s] - r2[s]).abs())
            .fold(0.0, f64::max);
        lambda_residual = t_set
            .iter()
            .map(|&t| {
                let mixed: f64 = final_chain
                    .row(t)
                    .iter()
                    .enumerate()
                    .map(|(u, &p)| p * r2[u])
                    .sum();
                (mixed - r2[t]).abs()
            })
            .fold(0.0, f64::max);
    } else {
        deviation1 = f64::INFINITY;
        deviation2 = f64::INFINITY;
        lambda_residual = f64::INFINITY;
    }
    let holds = new_chain_absorbing && deviation1 <= eps + TOL && deviation2 <= eps + TOL;
    let report = PolarizeReport {
        t_set,
        hypothesis,
        lambdas,
        lambda_residual,
        r2_preservation_residual,
        deviation1,
        deviation2,
        eps,
        delta_bound_ok,
        new_chain_absorbing,
        holds,
    };
    Ok((final_chain, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::Rng;

    #[test]
    fn simplify_mass_zero_is_identity() {
        let profile = fixtures::g1_profile(1.0);
        let out = simplify_profile(&profile, &[(2, 0, 1)]).unwrap();
        assert_eq!(out.result, profile);
        assert_eq!(out.removed_frequency[0], 0.0);
    }

    #[test]
    fn simplify_g1_to_pure() {
        let profile = fixtures::g1_profile(0.5);
        let out = simplify_profile(&profile, &[(2, 0, 1)]).unwrap();
        assert_eq!(out.result.y[0], vec![1.0, 0.0]);
        assert!((out.removed_frequency[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn simplify_cannot_empty_row() {
        let profile = fixtures::g1_profile(0.5);
        assert!(matches!(
            simplify_profile(&profile, &[(2, 0, 0), (2, 0, 1)]),
            Err(Error::RemovesEverything(0))
        ));
    }

    #[test]
    fn simplify_below_reports_removed_mass() {
        let mut rng = fixtures::rng(41);
        for _ in 0..10 {
            let spec = fixtures::random_game(&mut rng, 3, 2, 3);
            let profile = fixtures::random_profile(&mut rng, &spec);
            let gamma = 0.1;
            let out = simplify_below(&profile, 2, gamma).unwrap();
            for (s, dist) in profile.y.iter().enumerate() {
                let dropped: f64 = dist
                    .iter()
                    .zip(out.result.y[s].iter())
                    .filter(|(_, &new)| new == 0.0)
                    .map(|(&old, _)| old)
                    .sum();
                assert!(out.removed_frequency[s] <= dropped + 1e-12);
            }
        }
    }

    #[test]
    fn flow_preservation_on_g2() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        // Part of t's row: half of the motion to s.
        let part = Part {
            label: PartLabel::Named("p".into()),
            weight: 0.25,
            row: vec![1.0, 0.0, 0.0, 0.0],
        };
        let report =
            flow_preservation_check(&analysis, 1, &part, 0, &[], &[2, 3]).unwrap();
        assert!(report.holds, "{report:?}");
        assert!(report.gamma > 0.0 && report.gamma <= 1.0);
    }

    #[test]
    fn removal_bound_empty_is_exact() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        let report = removal_bound_check(&analysis, &[], &[2, 3], &[], 0.1).unwrap();
        assert!(report.holds);
        for entry in &report.conclusions {
            assert!((entry.lhs - entry.rhs / (1.0 - 0.0)).abs() < 1e-9 || entry.holds);
        }
    }

    #[test]
    fn removal_bound_g2_quarter_fraction() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        // Remove an eighth of t's row mass toward s; admissible at
        // gamma = 1/4 since P^t(t, A) = 3/4.
        let part = Part {
            label: PartLabel::Named("q".into()),
            weight: 0.125,
            row: vec![1.0, 0.0, 0.0, 0.0],
        };
        let report =
            removal_bound_check(&analysis, &[], &[2, 3], &[(1, part)], 0.25).unwrap();
        assert!(report.holds, "{report:?}");
        // The headline conclusion: flow from s keeps 3/4 of its mass.
        let entry = report
            .conclusions
            .iter()
            .find(|e| e.name == "flow to A from 0")
            .unwrap();
        assert!(entry.lhs >= 0.75 * 0.75 - 1e-9);
    }

    #[test]
    fn removal_bound_random_chains() {
        let mut rng = fixtures::rng(43);
        for _ in 0..10 {
            let chain = fixtures::random_absorbing_chain(&mut rng, 4, 2);
            let analysis = ChainAnalysis::new(&chain);
            let target: Vec<usize> = chain.absorbing_states();
            let interior = chain.non_absorbing_states();
            let u_count = 2.min(interior.len());
            let gamma = 0.4 / (2.0 * u_count as f64);
            let mut removals = Vec::new();
            for &u in interior.iter().take(u_count) {
                let budget = gamma * analysis.taboo_probability(u, &[u], &target).unwrap();
                // Remove a slice of one positive row entry.
                let row = analysis.chain.row(u);
                let t_pos = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 1e-6)
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(t, _)| t)
                    .unwrap();
                let weight = (budget * 0.9).min(row[t_pos] * 0.9);
                if weight <= 0.0 {
                    continue;
                }
                let mut part_row = vec![0.0; chain.num_states()];
                part_row[t_pos] = 1.0;
                removals.push((
                    u,
                    Part {
                        label: PartLabel::Named("cut".into()),
                        weight,
                        row: part_row,
                    },
                ));
            }
            if removals.is_empty() {
                continue;
            }
            let report =
                removal_bound_check(&analysis, &[], &target, &removals, gamma).unwrap();
            assert!(report.holds, "{report:?}");
        }
    }

    #[test]
    fn reachability_survives_small_removals() {
        let mut rng = fixtures::rng(47);
        for _ in 0..10 {
            let chain = fixtures::random_absorbing_chain(&mut rng, 5, 1);
            let analysis = ChainAnalysis::new(&chain);
            let interior = chain.non_absorbing_states();
            let s = interior[0];
            let t_set: Vec<usize> = interior[1..].to_vec();
            if t_set.is_empty() {
                continue;
            }
            let mut removals = Vec::new();
            for &t in &t_set {
                let row = analysis.chain.row(t);
                // A thin uniform slice of the whole row keeps the
                // standalone flow equal to the original flow, so the
                // fraction equals the slice weight.
                let weight = 0.9 / t_set.len() as f64 * 0.5;
                removals.push((
                    t,
                    Part {
                        label: PartLabel::Named("slice".into()),
                        weight,
                        row: row.to_vec(),
                    },
                ));
            }
            let reachable = t_set.iter().all(|&t| {
                analysis.taboo_probability(t, &[t], &[s]).unwrap() > 0.0
            });
            if !reachable {
                continue;
            }
            match reachability_survival_check(&analysis, &t_set, s, &removals) {
                Ok(report) => assert!(report.holds, "{report:?}"),
                Err(Error::Hypothesis(_)) => {}
                Err(other) => panic!("unexpected error {other:?}"),
            }
        }
    }

    #[test]
    fn joint_removal_on_two_state_game() {
        let spec = fixtures::g2_choice_game();
        // Mix both moves everywhere so there is motion between s and t.
        let profile = StrategyProfile {
            x: vec![vec![1.0], vec![1.0], vec![1.0], vec![1.0]],
            y: vec![vec![0.2, 0.8], vec![0.2, 0.8], vec![1.0], vec![1.0]],
        };
        // Remove a thin y-part at t (a slice of the absorb-now move).
        let y_star = vec![(1usize, vec![0.02, 0.0])];
        let report = joint_removal_check(
            &spec,
            &profile,
            &[0, 1],
            &[0, 1],
            0,
            1,
            &[],
            &y_star,
        )
        .unwrap();
        assert!(report.holds, "{report:?}");
    }

    #[test]
    fn perturbation_identity_has_factor_zero() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        let report = relative_perturbation_bound(
            &analysis,
            &chain,
            &[0],
            0.01,
            Some(&[0.0, 0.0, 0.0, 1.0]),
            &[],
        )
        .unwrap();
        assert_eq!(report.worst_taboo_factor, 0.0);
        assert!(report.holds);
    }

    #[test]
    fn perturbation_g2_small_tilt() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        let perturbed = chain
            .replace_row(0, vec![0.0, 0.505, 0.495, 0.0])
            .unwrap();
        let report = relative_perturbation_bound(
            &analysis,
            &perturbed,
            &[0],
            0.01,
            Some(&[0.0, 0.0, 0.0, 1.0]),
            &[(vec![1], vec![2, 3])],
        )
        .unwrap();
        assert!(report.holds, "{report:?}");
        assert!(report.worst_taboo_factor <= 0.04);
    }

    #[test]
    fn perturbation_zero_pattern_guarded() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        let perturbed = chain
            .replace_row(0, vec![0.01, 0.495, 0.495, 0.0])
            .unwrap();
        assert!(matches!(
            relative_perturbation_bound(&analysis, &perturbed, &[0], 0.01, None, &[]),
            Err(Error::Hypothesis(_))
        ));
    }

    #[test]
    fn perturbation_random_chains() {
        let mut rng = fixtures::rng(53);
        for _ in 0..8 {
            let chain = fixtures::random_absorbing_chain(&mut rng, 4, 2);
            let analysis = ChainAnalysis::new(&chain);
            let n = chain.num_states();
            let gamma = 1.0 / (4.0 * n as f64);
            let changed: Vec<usize> = chain.non_absorbing_states();
            let mut rows = chain.rows().to_vec();
            for &s in &changed {
                // Multiply entries by random factors within gamma, then
                // renormalize (renormalization keeps the relative move
                // within gamma for small gamma).
                let mut row = rows[s].clone();
                for p in row.iter_mut() {
                    if *p > 0.0 {
                        *p *= 1.0 + gamma * 0.45 * (2.0 * rng.gen::<f64>() - 1.0);
                    }
                }
                let sum: f64 = row.iter().sum();
                for p in row.iter_mut() {
                    *p /= sum;
                }
                rows[s] = row;
            }
            let perturbed = Chain::from_rows(
                chain.names().to_vec(),
                (0..n).map(|s| chain.is_absorbing_state(s)).collect(),
                rows,
            )
            .unwrap();
            let boundary: Vec<f64> = (0..n)
                .map(|s| if chain.is_absorbing_state(s) { 1.0 } else { 0.0 })
                .collect();
            let report = relative_perturbation_bound(
                &analysis,
                &perturbed,
                &changed,
                gamma,
                Some(&boundary),
                &[],
            )
            .unwrap();
            assert!(report.holds, "{report:?}");
        }
    }

    #[test]
    fn contract_trivial_partition_is_identity() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        let exits = ExitSystem::trivial(&chain);
        let boundary = vec![0.0, 0.0, 0.0, 1.0];
        let result = contract(&analysis, &exits, 0.3, &boundary).unwrap();
        assert_eq!(result.report.n_multi, 0);
        // The contracted chain has the same states and rows.
        assert_eq!(result.contracted.num_states(), chain.num_states());
        for s in 0..chain.num_states() {
            for t in 0..chain.num_states() {
                assert!(
                    (result.contracted.row(s)[t] - chain.row(s)[t]).abs() < 1e-12,
                    "row mismatch at ({s},{t})"
                );
            }
        }
        // Taboo probabilities agree exactly through the extension.
        for check in &result.report.taboo_checks {
            assert!(check.factor < 1e-12, "{check:?}");
        }
        assert!(result.report.representative_match < 1e-9);
    }

    #[test]
    fn contract_g2_single_block_hand_solve() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        let exits = ExitSystem {
            partition: vec![vec![0, 1], vec![2], vec![3]],
            representatives: vec![0, 2, 3],
            exits: vec![
                vec![Part {
                    label: PartLabel::Named("abs_s".into()),
                    weight: 0.5,
                    row: vec![0.0, 0.0, 1.0, 0.0],
                }],
                vec![Part {
                    label: PartLabel::Named("abs_t".into()),
                    weight: 0.5,
                    row: vec![0.0, 0.0, 0.0, 1.0],
                }],
                Vec::new(),
                Vec::new(),
            ],
        };
        let boundary = vec![0.0, 0.0, 0.0, 1.0];
        // The in-block round trip avoids exits with probability 1/2.
        let result = contract(&analysis, &exits, 0.5, &boundary).unwrap();
        assert!(!result.report.delta_small_enough);
        // Hand solve: from the representative, exit via s with
        // probability 2/3 (value 0) and via t with probability 1/3
        // (value 1).
        let sharp = result.sharp_of_block[0];
        let sharp_analysis = ChainAnalysis::new(&result.contracted);
        let mut sharp_boundary = vec![0.0; result.contracted.num_states()];
        sharp_boundary[result.sharp_of_block[2]] = 1.0;
        let r_sharp = sharp_analysis.harmonic_payoffs(&sharp_boundary).unwrap();
        assert!((r_sharp[sharp] - 1.0 / 3.0).abs() < 1e-9, "{}", r_sharp[sharp]);
        assert!(result.report.representative_match < 1e-9);
    }

    #[test]
    fn contract_two_state_block_small_delta() {
        // Block {s, t} with 0.005 exit mass per state.
        let names = vec!["s".into(), "t".into(), "A0".into(), "A1".into()];
        let absorbing = vec![false, false, true, true];
        let rows = vec![
            vec![0.0, 0.995, 0.005, 0.0],
            vec![0.995, 0.0, 0.0, 0.005],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let chain = Chain::from_rows(names, absorbing, rows).unwrap();
        let analysis = ChainAnalysis::new(&chain);
        let exits = ExitSystem {
            partition: vec![vec![0, 1], vec![2], vec![3]],
            representatives: vec![0, 2, 3],
            exits: vec![
                vec![Part {
                    label: PartLabel::Named("e0".into()),
                    weight: 0.005,
                    row: vec![0.0, 0.0, 1.0, 0.0],
                }],
                vec![Part {
                    label: PartLabel::Named("e1".into()),
                    weight: 0.005,
                    row: vec![0.0, 0.0, 0.0, 1.0],
                }],
                Vec::new(),
                Vec::new(),
            ],
        };
        let boundary = vec![0.0, 0.0, 0.0, 1.0];
        let result = contract(&analysis, &exits, 0.01, &boundary).unwrap();
        assert!(result.report.delta_small_enough);
        assert!(result.report.holds, "{:?}", result.report);
        assert!(result.report.harmonic_deviation <= result.report.harmonic_bound + 1e-9);

        // Exit statistics: singleton comparison bounds.
        let cmp = exit_statistics_compare(&result, 0, 0, &boundary).unwrap();
        assert!(cmp.holds, "{cmp:?}");
        assert!((cmp.nu - cmp.nu_sharp).abs() <= 8.0 * 0.01 + 4.0 * 0.01 + 1e-9);
    }

    #[test]
    fn exit_stats_trivial_blocks_exact() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        let exits = ExitSystem::trivial(&chain);
        let boundary = vec![0.0, 0.0, 0.0, 1.0];
        let result = contract(&analysis, &exits, 0.1, &boundary).unwrap();
        let cmp = exit_statistics_compare(&result, 0, 0, &boundary).unwrap();
        assert!((cmp.g - cmp.g_sharp).abs() < 1e-12);
        assert!((cmp.nu - cmp.nu_sharp).abs() < 1e-12);
        assert!((cmp.v - cmp.v_sharp).abs() < 1e-9);
    }

    #[test]
    fn exit_stats_random_blocks() {
        let mut rng = fixtures::rng(59);
        let boundary_of = |chain: &Chain| -> Vec<f64> {
            (0..chain.num_states())
                .map(|s| {
                    if chain.is_absorbing_state(s) {
                        if chain.name(s).ends_with('0') {
                            0.0
                        } else {
                            1.0
                        }
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        for _ in 0..8 {
            let (chain, exits, delta) = fixtures::random_block_chain(&mut rng, 3, 0.02);
            let analysis = ChainAnalysis::new(&chain);
            let boundary = boundary_of(&chain);
            let result = contract(&analysis, &exits, delta, &boundary).unwrap();
            assert!(result.report.holds, "{:?}", result.report);
            for s in chain.non_absorbing_states() {
                for pos in 0..result.exit_labels[s].len() {
                    let cmp =
                        exit_statistics_compare(&result, s, pos, &boundary).unwrap();
                    assert!(cmp.holds, "state {s} exit {pos}: {cmp:?}");
                }
            }
        }
    }

    #[test]
    fn replace_row_by_itself_keeps_rates() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        let eps = analysis.absorption_rate[1];
        let (new_chain, report) = replace_transition(
            &analysis,
            1,
            &ReplaceMode::Replacement(chain.row(1).to_vec()),
            eps,
        )
        .unwrap();
        assert!(report.holds);
        let new_analysis = ChainAnalysis::new(&new_chain);
        assert!((new_analysis.absorption_rate[0] - 0.75).abs() < 1e-9);
    }

    #[test]
    fn replace_with_pure_absorption_raises_rate() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        let (new_chain, report) = replace_transition(
            &analysis,
            1,
            &ReplaceMode::Replacement(vec![0.0, 0.0, 0.0, 1.0]),
            1.0,
        )
        .unwrap();
        assert!(report.holds, "{report:?}");
        let new_analysis = ChainAnalysis::new(&new_chain);
        assert!((new_analysis.absorption_rate[0] - 1.0).abs() < 1e-9);
        assert!(new_analysis.absorption_rate[0] >= 0.75);
    }

    #[test]
    fn replace_convex_random_chains() {
        let mut rng = fixtures::rng(61);
        for _ in 0..10 {
            let chain = fixtures::random_absorbing_chain(&mut rng, 4, 2);
            let analysis = ChainAnalysis::new(&chain);
            let t = chain.non_absorbing_states()[0];
            // Part: the whole row (importance 1); replacement: pure
            // jump to an absorbing state (g = 1).
            let part = Part {
                label: PartLabel::Whole,
                weight: 1.0,
                row: chain.row(t).to_vec(),
            };
            let mut repl = vec![0.0; chain.num_states()];
            repl[chain.absorbing_states()[0]] = 1.0;
            for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let eps = 0.9;
                let mode = ReplaceMode::Convex {
                    part: part.clone(),
                    replacement: repl.clone(),
                    lambda,
                };
                match replace_transition(&analysis, t, &mode, eps) {
                    Ok((_, report)) => assert!(report.holds, "{report:?}"),
                    Err(Error::Hypothesis(_)) => {}
                    Err(other) => panic!("unexpected {other:?}"),
                }
            }
        }
    }

    #[test]
    fn polarize_empty_inputs_is_identity() {
        let chain = fixtures::g2();
        let analysis = ChainAnalysis::new(&chain);
        let inputs = vec![PolarizeInput::default(); 4];
        let b1 = vec![0.0, 0.0, 0.2, -0.2];
        let b2 = vec![0.0, 0.0, 0.5, 1.0];
        let (new_chain, report) =
            polarize(&analysis, &b1, &b2, &inputs, 0.3, 0.01, 0.005).unwrap();
        assert!(report.t_set.is_empty());
        assert!(report.holds);
        for s in 0..4 {
            for t in 0..4 {
                assert_eq!(new_chain.row(s)[t], chain.row(s)[t]);
            }
        }
    }

    #[test]
    fn polarize_single_state_exact_lambda() {
        // One interior state, absorbing values r2 = (1, 0.3), r1 flat.
        let names = vec!["s".into(), "hi".into(), "lo".into()];
        let absorbing = vec![false, true, true];
        let rows = vec![
            vec![0.4, 0.35, 0.25],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let chain = Chain::from_rows(names, absorbing, rows).unwrap();
        let analysis = ChainAnalysis::new(&chain);
        let b1 = vec![0.0, 0.1, 0.1];
        let b2 = vec![0.0, 1.0, 0.3];
        let r2 = analysis.harmonic_payoffs(&b2).unwrap();
        assert!((r2[0] - 0.425 / 0.6).abs() < 1e-12);
        let inputs = vec![
            PolarizeInput {
                p_star: Some(Part {
                    label: PartLabel::Named("low".into()),
                    weight: 0.25,
                    row: vec![0.0, 0.0, 1.0],
                }),
                p_alt: Some(vec![0.0, 0.0, 1.0]),
                q: Some(Part {
                    label: PartLabel::Named("high".into()),
                    weight: 0.35,
                    row: vec![0.0, 1.0, 0.0],
                }),
            },
            PolarizeInput::default(),
            PolarizeInput::default(),
        ];
        let (new_chain, report) =
            polarize(&analysis, &b1, &b2, &inputs, 0.4, 0.01, 0.005).unwrap();
        assert_eq!(report.t_set, vec![0]);
        let lambda = report.lambdas[0].1;
        let expected = (1.0 - r2[0]) / (1.0 - 0.3);
        assert!((lambda - expected).abs() < 1e-12, "lambda {lambda}");
        assert!(report.lambda_residual < 1e-9, "{}", report.lambda_residual);
        assert!(report.deviation2 < 1e-9);
        assert!(report.deviation1 < 1e-9);
        assert!(report.holds);
        // The polarized row mixes only the two absorbing targets.
        assert!(new_chain.row(0)[0].abs() < 1e-12);
    }

    #[test]
    fn polarize_random_instances() {
        let mut rng = fixtures::rng(67);
        for _ in 0..8 {
            let (chain, b1, b2, inputs) =
                fixtures::random_polarization_instance(&mut rng, 3);
            let analysis = ChainAnalysis::new(&chain);
            let (_, report) =
                polarize(&analysis, &b1, &b2, &inputs, 0.1, 0.01, 0.005).unwrap();
            assert!(
                report.hypothesis.iter().all(|h| h.holds),
                "hypothesis failed: {:?}",
                report.hypothesis
            );
            assert!(report.holds, "{report:?}");
            assert!(report.lambda_residual < 1e-9);
            assert!(report.r2_preservation_residual < 1e-9);
        }
    }
}
