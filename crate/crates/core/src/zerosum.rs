//! Auxiliary zero-sum solvers: matrix games by the minimax linear
//! program, discounted values by value iteration over matrix games,
//! approximate undiscounted punishment values, and the jump
//! functions/correspondences they induce.

use crate::error::{Error, Result};
use crate::game::{GameSpec, StrategyProfile};
use crate::TIE_TOL;

/// Which side of the matrix is the maximizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Maximizer {
    Row,
    Column,
}

/// Value and optimal mixed strategies of a matrix game.
#[derive(Debug, Clone)]
pub struct MatrixGameSolution {
    pub value: f64,
    pub row_strategy: Vec<f64>,
    pub col_strategy: Vec<f64>,
    /// Realized duality gap certificate.
    pub gap: f64,
}

/// Solves the zero-sum matrix game `M` (entries are payments to the
/// maximizer) via the standard minimax linear program, after a shift
/// that makes all entries positive.
///
/// The returned strategies carry a duality-gap certificate below
/// `1e-9`.
pub fn solve_matrix_game(matrix: &[Vec<f64>], maximizer: Maximizer) -> Result<MatrixGameSolution> {
    if matrix.is_empty() || matrix[0].is_empty() {
        return Err(Error::EmptyMatrix);
    }
    match maximizer {
        Maximizer::Row => solve_row_max(matrix),
        Maximizer::Column => {
            let rows = matrix.len();
            let cols = matrix[0].len();
            let transposed: Vec<Vec<f64>> = (0..cols)
                .map(|j| (0..rows).map(|i| matrix[i][j]).collect())
                .collect();
            let sol = solve_row_max(&transposed)?;
            Ok(MatrixGameSolution {
                value: sol.value,
                row_strategy: sol.col_strategy,
                col_strategy: sol.row_strategy,
                gap: sol.gap,
            })
        }
    }
}

fn solve_row_max(matrix: &[Vec<f64>]) -> Result<MatrixGameSolution> {
    let m = matrix.len();
    let n = matrix[0].len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch(
            "ragged payoff matrix".to_string(),
        ));
    }
    // Shift so every entry is strictly positive; the value shifts by
    // the same amount and strategies are unchanged.
    let min_entry = matrix
        .iter()
        .flat_map(|r| r.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let shift = if min_entry <= 0.0 { 1.0 - min_entry } else { 0.0 };

    // Column player's LP in slack form:
    //   max sum(y)  s.t.  M' y + s = 1,  y, s >= 0
    // where M' is the shifted matrix. The optimal y normalizes to the
    // column strategy and the slack reduced costs give the row
    // strategy; the game value is 1 / sum(y) - shift.
    let cols = n + m; // y variables then slacks
    let mut tableau = vec![vec![0.0; cols + 1]; m + 1];
    for i in 0..m {
        for j in 0..n {
            tableau[i][j] = matrix[i][j] + shift;
        }
        tableau[i][n + i] = 1.0;
        tableau[i][cols] = 1.0;
    }
    for j in 0..n {
        tableau[m][j] = -1.0; // maximize sum(y)
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    // Primal simplex with Bland's rule; bounded because M' > 0.
    for _ in 0..10_000 {
        let Some(pivot_col) = (0..cols).find(|&j| tableau[m][j] < -1e-12) else {
            break;
        };
        let mut pivot_row = None;
        let mut best_ratio = f64::INFINITY;
        for (i, row) in tableau.iter().enumerate().take(m) {
            if row[pivot_col] > 1e-12 {
                let ratio = row[cols] / row[pivot_col];
                if ratio < best_ratio - 1e-12
                    || (ratio < best_ratio + 1e-12
                        && pivot_row.map_or(true, |r: usize| basis[r] > basis[i]))
                {
                    best_ratio = ratio;
                    pivot_row = Some(i);
                }
            }
        }
        let Some(pr) = pivot_row else {
            return Err(Error::NonConvergence(
                "unbounded matrix-game program".to_string(),
            ));
        };
        let pivot = tableau[pr][pivot_col];
        for v in tableau[pr].iter_mut() {
            *v /= pivot;
        }
        for i in 0..=m {
            if i == pr {
                continue;
            }
            let factor = tableau[i][pivot_col];
            if factor != 0.0 {
                for j in 0..=cols {
                    tableau[i][j] -= factor * tableau[pr][j];
                }
            }
        }
        basis[pr] = pivot_col;
    }

    let mut y = vec![0.0; n];
    for (i, &bj) in basis.iter().enumerate() {
        if bj < n {
            y[bj] = tableau[i][cols].max(0.0);
        }
    }
    let y_sum: f64 = y.iter().sum();
    if y_sum <= 0.0 {
        return Err(Error::NonConvergence(
            "degenerate matrix-game solution".to_string(),
        ));
    }
    let col_strategy: Vec<f64> = y.iter().map(|&v| v / y_sum).collect();
    // Dual values live in the slack columns of the objective row.
    let mut x = vec![0.0; m];
    for (i, xv) in x.iter_mut().enumerate() {
        *xv = tableau[m][n + i].max(0.0);
    }
    let x_sum: f64 = x.iter().sum();
    if x_sum <= 0.0 {
        return Err(Error::NonConvergence(
            "degenerate matrix-game dual".to_string(),
        ));
    }
    let row_strategy: Vec<f64> = x.iter().map(|&v| v / x_sum).collect();

    // Certificate: row side guarantees min over columns, column side
    // concedes max over rows.
    let row_guarantee = (0..n)
        .map(|j| {
            (0..m)
                .map(|i| row_strategy[i] * matrix[i][j])
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    let col_concession = (0..m)
        .map(|i| {
            (0..n)
                .map(|j| col_strategy[j] * matrix[i][j])
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let value = 1.0 / y_sum - shift;
    let gap = (col_concession - row_guarantee).abs();
    if gap > 1e-9 {
        return Err(Error::NonConvergence(format!(
            "matrix-game duality gap {gap} above certificate"
        )));
    }
    Ok(MatrixGameSolution {
        value,
        row_strategy,
        col_strategy,
        gap,
    })
}

/// Which player's payoff the auxiliary zero-sum game maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroSumSide {
    /// Player One maximizes `r1`; Player Two minimizes it.
    PlayerOne,
    /// Player Two maximizes `r2`; Player One minimizes it.
    PlayerTwo,
}

/// Discounted and approximate undiscounted zero-sum values, plus the
/// Player One optimal stationary strategy extracted at the requested
/// discount.
#[derive(Debug, Clone)]
pub struct ZeroSumTables {
    /// Discount parameter of `c_alpha`.
    pub alpha: f64,
    /// Per-state discounted value for Player Two; `r2` on absorbing
    /// states.
    pub c_alpha: Vec<f64>,
    /// Approximate undiscounted punishment value for Player One.
    pub c1: Vec<f64>,
    /// Approximate undiscounted punishment value for Player Two.
    pub c2: Vec<f64>,
    /// Sup-norm residual achieved by the final sweep.
    pub tolerance_achieved: f64,
    /// Residual history of the `c_alpha` iteration (for the geometric
    /// decay property).
    pub residuals: Vec<f64>,
    /// A stationary optimal strategy for Player One in the discounted
    /// game at `alpha`.
    pub p1_optimal: Vec<Vec<f64>>,
    /// A stationary optimal strategy for Player Two at `alpha`.
    pub p2_optimal: Vec<Vec<f64>>,
}

/// One value-iteration sweep; returns the new values plus optimal
/// strategies of the per-state matrix games.
fn sweep(
    spec: &GameSpec,
    side: ZeroSumSide,
    alpha: f64,
    values: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = spec.num_states();
    let mut next = values.to_vec();
    let mut p1 = vec![Vec::new(); n];
    let mut p2 = vec![Vec::new(); n];
    for s in 0..n {
        if spec.is_absorbing(s) {
            p1[s] = vec![1.0];
            p2[s] = vec![1.0];
            continue;
        }
        let (na, nb) = spec.action_counts(s);
        let mut matrix = vec![vec![0.0; nb]; na];
        for (a, row) in matrix.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                *cell = (1.0 - alpha)
                    * spec
                        .row(s, a, b)
                        .iter()
                        .enumerate()
                        .map(|(t, &p)| p * values[t])
                        .sum::<f64>();
            }
        }
        let maximizer = match side {
            ZeroSumSide::PlayerOne => Maximizer::Row,
            ZeroSumSide::PlayerTwo => Maximizer::Column,
        };
        let sol = solve_matrix_game(&matrix, maximizer)?;
        next[s] = sol.value;
        p1[s] = sol.row_strategy;
        p2[s] = sol.col_strategy;
    }
    Ok((next, p1, p2))
}

/// Value iteration for the discounted zero-sum game on `side`,
/// starting from the absorbing boundary. The iteration contracts with
/// modulus `1 - alpha`; it stops once the fixed-point error is within
/// `tol`.
pub fn discounted_value_iteration(
    spec: &GameSpec,
    side: ZeroSumSide,
    alpha: f64,
    tol: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    if tol <= 0.0 {
        return Err(Error::InvalidParameter("tol must be positive".into()));
    }
    let k = match side {
        ZeroSumSide::PlayerOne => 1,
        ZeroSumSide::PlayerTwo => 2,
    };
    let mut values = spec.boundary(k);
    let stop = tol * alpha / (1.0 - alpha);
    let mut residuals = Vec::new();
    let max_iters = 10_000_000usize;
    for _ in 0..max_iters {
        let (next, p1, p2) = sweep(spec, side, alpha, &values)?;
        let residual = next
            .iter()
            .zip(values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        residuals.push(residual);
        values = next;
        if residual <= stop.max(1e-14) {
            return Ok((values, p1, p2, residuals));
        }
    }
    Err(Error::NonConvergence(
        "discounted value iteration exceeded its budget".to_string(),
    ))
}

/// Approximates the undiscounted value on `side` by walking an
/// alpha-grid (factor 5 refinements from 0.5) until successive grid
/// values differ by less than `eps / 4` in sup norm.
pub fn undiscounted_value(spec: &GameSpec, side: ZeroSumSide, eps: f64) -> Result<Vec<f64>> {
    let mut alpha = 0.5;
    let tol = (eps / 20.0).max(1e-12);
    let (mut prev, ..) = discounted_value_iteration(spec, side, alpha, tol)?;
    for _ in 0..24 {
        alpha /= 5.0;
        let (next, ..) = discounted_value_iteration(spec, side, alpha, tol)?;
        let diff = next
            .iter()
            .zip(prev.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prev = next;
        if diff < eps / 4.0 {
            return Ok(prev);
        }
    }
    Err(Error::NonConvergence(
        "alpha grid did not stabilize the undiscounted value".to_string(),
    ))
}

/// Solves the discounted Player Two game at `alpha` and approximates
/// the undiscounted punishment values for both players at accuracy
/// `tol`.
pub fn discounted_values(spec: &GameSpec, alpha: f64, tol: f64) -> Result<ZeroSumTables> {
    let (c_alpha, p1_optimal, p2_optimal, residuals) =
        discounted_value_iteration(spec, ZeroSumSide::PlayerTwo, alpha, tol)?;
    let c2 = undiscounted_value(spec, ZeroSumSide::PlayerTwo, tol.max(1e-9) * 4.0)?;
    let c1 = undiscounted_value(spec, ZeroSumSide::PlayerOne, tol.max(1e-9) * 4.0)?;
    let tolerance_achieved = residuals.last().copied().unwrap_or(0.0);
    Ok(ZeroSumTables {
        alpha,
        c_alpha,
        c1,
        c2,
        tolerance_achieved,
        residuals,
        p1_optimal,
        p2_optimal,
    })
}

/// Jump levels and argmax correspondences for a fixed Player One
/// strategy, in both the discounted and undiscounted senses.
#[derive(Debug, Clone)]
pub struct JumpTables {
    /// `(1-alpha) max_b sum_t p(t|s;x,b) c_alpha(t)`, and `r2` on
    /// absorbing states.
    pub j_alpha: Vec<f64>,
    /// Argmax move sets behind `j_alpha` (ties within tolerance all
    /// included); empty at absorbing states.
    pub jump_set: Vec<Vec<usize>>,
    /// Undiscounted Player Two jump `max_b sum_t p(t|s;x,b) c2(t)`.
    pub j2: Vec<f64>,
    /// Undiscounted Player One jump `max_a sum_t p(t|s;a,y) c1(t)`.
    pub j1: Vec<f64>,
}

/// Builds the jump tables of a profile: the discounted jump and its
/// argmax set from Player One's strategy, plus both undiscounted jump
/// levels from the punishment values.
pub fn jump_function(
    spec: &GameSpec,
    profile: &StrategyProfile,
    tables: &ZeroSumTables,
) -> Result<JumpTables> {
    profile.validate(spec)?;
    let n = spec.num_states();
    let mut j_alpha = vec![0.0; n];
    let mut jump_set = vec![Vec::new(); n];
    let mut j2 = vec![0.0; n];
    let mut j1 = vec![0.0; n];
    for s in 0..n {
        if spec.is_absorbing(s) {
            j_alpha[s] = spec.payoff(2, s);
            j2[s] = spec.payoff(2, s);
            j1[s] = spec.payoff(1, s);
            continue;
        }
        let (na, nb) = spec.action_counts(s);
        let mut best = f64::NEG_INFINITY;
        let mut scores = Vec::with_capacity(nb);
        for b in 0..nb {
            let row = spec.row_vs_x(s, &profile.x[s], b);
            let score: f64 = row
                .iter()
                .enumerate()
                .map(|(t, &p)| p * tables.c_alpha[t])
                .sum();
            scores.push(score);
            best = best.max(score);
        }
        j_alpha[s] = (1.0 - tables.alpha) * best;
        jump_set[s] = (0..nb)
            .filter(|&b| scores[b] >= best - TIE_TOL)
            .collect();
        j2[s] = (0..nb)
            .map(|b| {
                spec.row_vs_x(s, &profile.x[s], b)
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| p * tables.c2[t])
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        j1[s] = (0..na)
            .map(|a| {
                spec.row_vs_y(s, a, &profile.y[s])
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| p * tables.c1[t])
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(JumpTables {
        j_alpha,
        jump_set,
        j2,
        j1,
    })
}

/// One submartingale inequality instance: at `state` under jump move
/// `b`, `j(s)` against `(1-alpha) E[j(next)]`.
#[derive(Debug, Clone, Copy)]
pub struct SubmartingaleEntry {
    pub state: usize,
    pub b: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Submartingale check report.
#[derive(Debug, Clone)]
pub struct SubmartingaleReport {
    pub entries: Vec<SubmartingaleEntry>,
    pub holds: bool,
}

/// Verifies that the discounted jump level is a submartingale along
/// its own argmax moves: `j(s) <= (1-alpha) E^x_b[j(next)]` for every
/// non-absorbing `s` and every `b` in the jump set.
pub fn submartingale_check(
    spec: &GameSpec,
    profile: &StrategyProfile,
    tables: &ZeroSumTables,
) -> Result<SubmartingaleReport> {
    let jumps = jump_function(spec, profile, tables)?;
    let mut entries = Vec::new();
    let mut holds = true;
    for s in 0..spec.num_states() {
        if spec.is_absorbing(s) {
            continue;
        }
        for &b in &jumps.jump_set[s] {
            let row = spec.row_vs_x(s, &profile.x[s], b);
            let rhs = (1.0 - tables.alpha)
                * row
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| p * jumps.j_alpha[t])
                    .sum::<f64>();
            let lhs = jumps.j_alpha[s];
            let ok = lhs <= rhs + 1e-9;
            holds &= ok;
            entries.push(SubmartingaleEntry {
                state: s,
                b,
                lhs,
                rhs,
                holds: ok,
            });
        }
    }
    Ok(SubmartingaleReport { entries, holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::game::{AbsorbingPayoff, GameSpec, State, StateKind};

    const TOL: f64 = 1e-9;

    #[test]
    fn one_by_one_matrix() {
        let sol = solve_matrix_game(&[vec![0.37]], Maximizer::Row).unwrap();
        assert!((sol.value - 0.37).abs() < TOL);
    }

    #[test]
    fn matching_pennies() {
        let m = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        let sol = solve_matrix_game(&m, Maximizer::Row).unwrap();
        assert!(sol.value.abs() < TOL);
        assert!((sol.row_strategy[0] - 0.5).abs() < 1e-8);
        assert!((sol.col_strategy[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn two_by_two_closed_form() {
        // Frozen from the 2x2 formula: value = (ad - bc)/(a - b - c + d).
        let m = vec![vec![3.0, 0.0], vec![1.0, 2.0]];
        let sol = solve_matrix_game(&m, Maximizer::Row).unwrap();
        assert!((sol.value - 1.5).abs() < TOL, "value {}", sol.value);
        assert!((sol.row_strategy[0] - 0.25).abs() < 1e-8);
        assert!((sol.row_strategy[1] - 0.75).abs() < 1e-8);
        assert!((sol.col_strategy[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(matches!(
            solve_matrix_game(&[], Maximizer::Row),
            Err(Error::EmptyMatrix)
        ));
    }

    #[test]
    fn column_maximizer_flips() {
        let m = vec![vec![3.0, 0.0], vec![1.0, 2.0]];
        let row = solve_matrix_game(&m, Maximizer::Row).unwrap();
        let negated: Vec<Vec<f64>> =
            m.iter().map(|r| r.iter().map(|&v| -v).collect()).collect();
        let col = solve_matrix_game(&negated, Maximizer::Column).unwrap();
        assert!((row.value + col.value).abs() < 1e-8);
    }

    #[test]
    fn g1_discounted_value() {
        let g1 = fixtures::g1();
        for alpha in [0.5, 0.1, 0.02] {
            let tables = discounted_values(&g1, alpha, 1e-10).unwrap();
            // Absorbing now dominates: the value is (1 - alpha) * 1.
            assert!(
                (tables.c_alpha[0] - (1.0 - alpha)).abs() < 1e-8,
                "alpha {alpha}: {}",
                tables.c_alpha[0]
            );
            assert!((tables.c_alpha[1] - 1.0).abs() < TOL);
            assert!((tables.c2[0] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn self_loop_only_value_zero() {
        let states = vec![
            State {
                name: "s".into(),
                kind: StateKind::NonAbsorbing {
                    p1_actions: vec!["a".into()],
                    p2_actions: vec!["b".into()],
                },
            },
            State {
                name: "A".into(),
                kind: StateKind::Absorbing(AbsorbingPayoff { r1: 0.0, r2: 1.0 }),
            },
        ];
        let transition = vec![
            vec![vec![vec![1.0, 0.0]]],
            vec![vec![vec![0.0, 1.0]]],
        ];
        let spec = GameSpec::new(states, transition, 1.0).unwrap();
        let (values, ..) =
            discounted_value_iteration(&spec, ZeroSumSide::PlayerTwo, 0.25, 1e-10).unwrap();
        assert!(values[0].abs() < 1e-9);
    }

    #[test]
    fn forced_half_absorption_closed_form() {
        // c = (1-alpha) * (1/2 + 1/2 c) solves to (1-alpha)/(1+alpha).
        let states = vec![
            State {
                name: "s".into(),
                kind: StateKind::NonAbsorbing {
                    p1_actions: vec!["a".into()],
                    p2_actions: vec!["b".into()],
                },
            },
            State {
                name: "A".into(),
                kind: StateKind::Absorbing(AbsorbingPayoff { r1: 0.0, r2: 1.0 }),
            },
        ];
        let transition = vec![
            vec![vec![vec![0.5, 0.5]]],
            vec![vec![vec![0.0, 1.0]]],
        ];
        let spec = GameSpec::new(states, transition, 1.0).unwrap();
        let alpha = 0.3;
        let (values, ..) =
            discounted_value_iteration(&spec, ZeroSumSide::PlayerTwo, alpha, 1e-11).unwrap();
        let expected = (1.0 - alpha) / (1.0 + alpha);
        assert!((values[0] - expected).abs() < 1e-9, "{}", values[0]);
    }

    #[test]
    fn jump_absorbing_is_r2() {
        let g1 = fixtures::g1();
        let tables = discounted_values(&g1, 0.1, 1e-10).unwrap();
        let jumps = jump_function(&g1, &fixtures::g1_profile(0.5), &tables).unwrap();
        assert!((jumps.j_alpha[1] - 1.0).abs() < TOL);
        assert!((jumps.j2[1] - 1.0).abs() < TOL);
    }

    #[test]
    fn g1_jump_level() {
        let g1 = fixtures::g1();
        let alpha = 0.1;
        let tables = discounted_values(&g1, alpha, 1e-10).unwrap();
        let jumps = jump_function(&g1, &fixtures::g1_profile(0.5), &tables).unwrap();
        // b1 reaches value 1 next stage; b2 stays at c_alpha(s0).
        assert!((jumps.j_alpha[0] - (1.0 - alpha)).abs() < 1e-8);
        assert_eq!(jumps.jump_set[0], vec![0]);
    }

    #[test]
    fn optimal_x_attains_equality() {
        let mut rng = fixtures::rng(7);
        for _ in 0..5 {
            let spec = fixtures::random_game(&mut rng, 3, 2, 3);
            let tables = discounted_values(&spec, 0.2, 1e-11).unwrap();
            let profile = StrategyProfile {
                x: tables.p1_optimal.clone(),
                y: tables.p2_optimal.clone(),
            };
            let jumps = jump_function(&spec, &profile, &tables).unwrap();
            for s in 0..spec.num_states() {
                assert!(
                    jumps.j_alpha[s] >= tables.c_alpha[s] - 1e-7,
                    "jump below value at {s}"
                );
                assert!(
                    (jumps.j_alpha[s] - tables.c_alpha[s]).abs() < 1e-6,
                    "state {s}: jump {} value {}",
                    jumps.j_alpha[s],
                    tables.c_alpha[s]
                );
            }
        }
    }

    #[test]
    fn submartingale_on_random_games() {
        let mut rng = fixtures::rng(11);
        for _ in 0..5 {
            let spec = fixtures::random_game(&mut rng, 3, 2, 3);
            let profile = fixtures::random_profile(&mut rng, &spec);
            let tables = discounted_values(&spec, 0.2, 1e-11).unwrap();
            let report = submartingale_check(&spec, &profile, &tables).unwrap();
            assert!(report.holds, "failed: {:?}", report.entries);
        }
    }

    #[test]
    fn monotone_in_decreasing_alpha() {
        let mut rng = fixtures::rng(13);
        let spec = fixtures::random_game(&mut rng, 3, 2, 2);
        let grid = [0.5, 0.1, 0.02, 0.004];
        let mut prev: Option<Vec<f64>> = None;
        for alpha in grid {
            let (values, ..) =
                discounted_value_iteration(&spec, ZeroSumSide::PlayerTwo, alpha, 1e-10).unwrap();
            if let Some(p) = prev {
                for s in 0..spec.num_states() {
                    assert!(
                        values[s] >= p[s] - 1e-7,
                        "value dropped at {s}: {} -> {}",
                        p[s],
                        values[s]
                    );
                }
            }
            prev = Some(values);
        }
    }

    #[test]
    fn residuals_decay_geometrically() {
        let g1 = fixtures::g1();
        let alpha = 0.3;
        let (_, _, _, residuals) =
            discounted_value_iteration(&g1, ZeroSumSide::PlayerTwo, alpha, 1e-12).unwrap();
        for win in residuals.windows(2) {
            if win[0] > 1e-13 {
                assert!(win[1] <= win[0] * (1.0 - alpha) + 1e-13);
            }
        }
        assert!(*residuals.last().unwrap() <= 1e-12);
    }
}
