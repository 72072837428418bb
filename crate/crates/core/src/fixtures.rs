//! Shared fixtures and randomized instance generators.
//!
//! The fixtures are small hand-checkable games and chains used across
//! unit, property, and acceptance tests; the generators produce seeded
//! random absorbing chains and games for the bound-verification suites.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::chain::{Chain, Part, PartLabel};
use crate::game::{AbsorbingPayoff, GameSpec, State, StateKind, StrategyProfile};

/// One non-absorbing state `s0`; Player One has a single action,
/// Player Two chooses between absorbing at payoff `(0, 1)` and staying.
pub fn g1() -> GameSpec {
    let states = vec![
        State {
            name: "s0".into(),
            kind: StateKind::NonAbsorbing {
                p1_actions: vec!["a".into()],
                p2_actions: vec!["b1".into(), "b2".into()],
            },
        },
        State {
            name: "a1".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1: 0.0, r2: 1.0 }),
        },
    ];
    GameSpec::new(states, g1_transitions(), 1.0).unwrap()
}

/// Transition tables of [`g1`], exposed for tests that perturb them.
pub fn g1_transitions() -> Vec<Vec<Vec<Vec<f64>>>> {
    vec![
        // s0: a x {b1 -> absorb, b2 -> stay}
        vec![vec![vec![0.0, 1.0], vec![1.0, 0.0]]],
        // a1: self-loop
        vec![vec![vec![0.0, 1.0]]],
    ]
}

/// The profile of [`g1`] that plays `b1` with probability `p_absorb`.
pub fn g1_profile(p_absorb: f64) -> StrategyProfile {
    StrategyProfile {
        x: vec![vec![1.0], vec![1.0]],
        y: vec![vec![p_absorb, 1.0 - p_absorb], vec![1.0]],
    }
}

/// The two-state chain: `s -> t` w.p. 1/2, `s -> A_s` w.p. 1/2,
/// `t -> s` w.p. 1/2, `t -> A_t` w.p. 1/2, with separate absorbing
/// states for the two departure points.
pub fn g2() -> Chain {
    let names = vec!["s".into(), "t".into(), "A_s".into(), "A_t".into()];
    let absorbing = vec![false, false, true, true];
    let rows = vec![
        vec![0.0, 0.5, 0.5, 0.0],
        vec![0.5, 0.0, 0.0, 0.5],
        vec![0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
    ];
    Chain::from_rows(names, absorbing, rows).unwrap()
}

/// [`g2`] encoded as a one-action-per-player game. Absorbing payoffs
/// split by departure point so harmonic fixtures are non-constant.
pub fn g2_as_game() -> (GameSpec, StrategyProfile) {
    let states = vec![
        State {
            name: "s".into(),
            kind: StateKind::NonAbsorbing {
                p1_actions: vec!["a".into()],
                p2_actions: vec!["b".into()],
            },
        },
        State {
            name: "t".into(),
            kind: StateKind::NonAbsorbing {
                p1_actions: vec!["a".into()],
                p2_actions: vec!["b".into()],
            },
        },
        State {
            name: "A_s".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1: 0.2, r2: 0.5 }),
        },
        State {
            name: "A_t".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1: -0.2, r2: 1.0 }),
        },
    ];
    let transition = vec![
        vec![vec![vec![0.0, 0.5, 0.5, 0.0]]],
        vec![vec![vec![0.5, 0.0, 0.0, 0.5]]],
        vec![vec![vec![0.0, 0.0, 1.0, 0.0]]],
        vec![vec![vec![0.0, 0.0, 0.0, 1.0]]],
    ];
    let spec = GameSpec::new(states, transition, 0.5).unwrap();
    let profile = StrategyProfile::uniform(&spec);
    (spec, profile)
}

/// The [`g2`] shape with a Player Two choice at both interior states:
/// `b1` absorbs on the spot, `b2` travels (the original G2 row).
pub fn g2_choice_game() -> GameSpec {
    let states = vec![
        State {
            name: "s".into(),
            kind: StateKind::NonAbsorbing {
                p1_actions: vec!["a".into()],
                p2_actions: vec!["b1".into(), "b2".into()],
            },
        },
        State {
            name: "t".into(),
            kind: StateKind::NonAbsorbing {
                p1_actions: vec!["a".into()],
                p2_actions: vec!["b1".into(), "b2".into()],
            },
        },
        State {
            name: "A_s".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1: 0.2, r2: 0.5 }),
        },
        State {
            name: "A_t".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1: -0.2, r2: 1.0 }),
        },
    ];
    let transition = vec![
        vec![vec![
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.5, 0.5, 0.0],
        ]],
        vec![vec![
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.5, 0.0, 0.0, 0.5],
        ]],
        vec![vec![vec![0.0, 0.0, 1.0, 0.0]]],
        vec![vec![vec![0.0, 0.0, 0.0, 1.0]]],
    ];
    GameSpec::new(states, transition, 0.5).unwrap()
}

/// A game in which every action pair at every state absorbs immediately
/// at the same payoff pair, so every profile is a fixed point.
pub fn flat_game(r1: f64, r2: f64) -> GameSpec {
    let states = vec![
        State {
            name: "s".into(),
            kind: StateKind::NonAbsorbing {
                p1_actions: vec!["a1".into(), "a2".into()],
                p2_actions: vec!["b1".into(), "b2".into()],
            },
        },
        State {
            name: "end".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1, r2 }),
        },
    ];
    let row = vec![vec![0.0, 1.0]; 2];
    let transition = vec![
        vec![row.clone(), row],
        vec![vec![vec![0.0, 1.0]]],
    ];
    GameSpec::new(states, transition, r2.min(1.0)).unwrap()
}

/// A one-interior-state game whose unique equilibrium is fully mixed:
/// Player One wants the action indices to match, Player Two wants them
/// to differ, and every pair absorbs immediately.
pub fn matching_pennies_game() -> GameSpec {
    let states = vec![
        State {
            name: "s".into(),
            kind: StateKind::NonAbsorbing {
                p1_actions: vec!["a1".into(), "a2".into()],
                p2_actions: vec!["b1".into(), "b2".into()],
            },
        },
        State {
            name: "match".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1: 0.5, r2: 0.5 }),
        },
        State {
            name: "miss".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1: -0.5, r2: 1.0 }),
        },
    ];
    let hit = vec![0.0, 1.0, 0.0];
    let miss = vec![0.0, 0.0, 1.0];
    let transition = vec![
        vec![
            vec![hit.clone(), miss.clone()],
            vec![miss.clone(), hit.clone()],
        ],
        vec![vec![hit]],
        vec![vec![miss]],
    ];
    GameSpec::new(states, transition, 0.5).unwrap()
}

/// A pennies variant whose unique equilibrium is mixed but away from
/// uniform: Player One still wants matching indices, while Player
/// Two's payoffs are tilted so his indifference pins Player One to
/// `x = (1/4, 3/4)`.
pub fn biased_pennies_game() -> GameSpec {
    let states = vec![
        State {
            name: "s".into(),
            kind: StateKind::NonAbsorbing {
                p1_actions: vec!["a1".into(), "a2".into()],
                p2_actions: vec!["b1".into(), "b2".into()],
            },
        },
        State {
            name: "m11".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1: 0.5, r2: 0.25 }),
        },
        State {
            name: "m12".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1: -0.5, r2: 1.0 }),
        },
        State {
            name: "m21".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1: -0.5, r2: 1.0 }),
        },
        State {
            name: "m22".into(),
            kind: StateKind::Absorbing(AbsorbingPayoff { r1: 0.5, r2: 0.75 }),
        },
    ];
    let to = |k: usize| {
        let mut row = vec![0.0; 5];
        row[k] = 1.0;
        row
    };
    let transition = vec![
        vec![vec![to(1), to(2)], vec![to(3), to(4)]],
        vec![vec![to(1)]],
        vec![vec![to(2)]],
        vec![vec![to(3)]],
        vec![vec![to(4)]],
    ];
    GameSpec::new(states, transition, 0.25).unwrap()
}

/// Deterministic RNG for the generators below.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize, sparsity: f64) -> Vec<f64> {
    loop {
        let mut row: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < sparsity {
                    0.0
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        let sum: f64 = row.iter().sum();
        if sum > 1e-9 {
            for p in row.iter_mut() {
                *p /= sum;
            }
            return row;
        }
    }
}

/// A random absorbing chain with `n_trans` non-absorbing and `n_abs`
/// absorbing states. Every non-absorbing row gets a direct escape
/// nudge so absorption holds by construction; rows are then split into
/// one to three labeled parts.
pub fn random_absorbing_chain(rng: &mut ChaCha8Rng, n_trans: usize, n_abs: usize) -> Chain {
    let n = n_trans + n_abs;
    let names = (0..n)
        .map(|i| {
            if i < n_trans {
                format!("s{i}")
            } else {
                format!("A{}", i - n_trans)
            }
        })
        .collect();
    let absorbing: Vec<bool> = (0..n).map(|i| i >= n_trans).collect();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        if i >= n_trans {
            let mut row = vec![0.0; n];
            row[i] = 1.0;
            rows.push(row);
            continue;
        }
        let mut row = random_distribution(rng, n, 0.4);
        // Guarantee a strictly positive direct path to absorption.
        let target = n_trans + rng.gen_range(0..n_abs);
        let eps = 0.02 + 0.2 * rng.gen::<f64>();
        for p in row.iter_mut() {
            *p *= 1.0 - eps;
        }
        row[target] += eps;
        rows.push(row);
    }
    let mut parts = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        parts.push(split_into_parts(rng, row, absorbing[i]));
    }
    Chain::with_parts(names, absorbing, rows, parts).unwrap()
}

/// Splits a row into one to three random parts whose weighted rows sum
/// back to the original.
fn split_into_parts(rng: &mut ChaCha8Rng, row: &[f64], absorbing: bool) -> Vec<Part> {
    if absorbing {
        return vec![Part {
            label: PartLabel::Whole,
            weight: 1.0,
            row: row.to_vec(),
        }];
    }
    let k = rng.gen_range(1..=3usize);
    if k == 1 {
        return vec![Part {
            label: PartLabel::Whole,
            weight: 1.0,
            row: row.to_vec(),
        }];
    }
    // Split each entry's mass over k buckets, then normalize buckets.
    let n = row.len();
    let mut masses = vec![vec![0.0; n]; k];
    for (t, &p) in row.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let mut cuts: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let sum: f64 = cuts.iter().sum();
        for (j, c) in cuts.iter_mut().enumerate() {
            masses[j][t] = p * *c / sum;
        }
    }
    let mut parts = Vec::new();
    for (j, mass) in masses.into_iter().enumerate() {
        let w: f64 = mass.iter().sum();
        if w < 1e-12 {
            continue;
        }
        parts.push(Part {
            label: PartLabel::Named(format!("p{j}")),
            weight: w,
            row: mass.iter().map(|&m| m / w).collect(),
        });
    }
    // Exact re-normalization of weights against rounding.
    let total: f64 = parts.iter().map(|p| p.weight).sum();
    for p in parts.iter_mut() {
        p.weight /= total;
    }
    parts
}

/// A chain organized in strongly-mixing blocks with rare exits, plus
/// the exit system that witnesses it. Every exit leads to an absorbing
/// state or to another block; per-state exit mass stays below `delta`,
/// so in-block travel avoids exits with probability at least
/// `1 - delta`.
pub fn random_block_chain(
    rng: &mut ChaCha8Rng,
    n_blocks: usize,
    delta: f64,
) -> (Chain, crate::transforms::ExitSystem, f64) {
    let sizes: Vec<usize> = (0..n_blocks).map(|_| rng.gen_range(1..=2usize)).collect();
    let n_interior: usize = sizes.iter().sum();
    let n_abs = 2;
    let n = n_interior + n_abs;
    let mut names = Vec::new();
    let mut absorbing = vec![false; n];
    let mut partition = Vec::new();
    let mut representatives = Vec::new();
    let mut idx = 0;
    for (b, &size) in sizes.iter().enumerate() {
        let members: Vec<usize> = (idx..idx + size).collect();
        for &s in &members {
            names.push(format!("b{b}s{s}"));
        }
        representatives.push(members[0]);
        partition.push(members);
        idx += size;
    }
    for i in 0..n_abs {
        names.push(format!("A{i}"));
        absorbing[n_interior + i] = true;
        partition.push(vec![n_interior + i]);
        representatives.push(n_interior + i);
    }
    let block_of = {
        let mut map = vec![0usize; n];
        for (b, members) in partition.iter().enumerate() {
            for &s in members {
                map[s] = b;
            }
        }
        map
    };
    let mut rows = vec![vec![0.0; n]; n];
    let mut exits: Vec<Vec<Part>> = vec![Vec::new(); n];
    for s in 0..n_interior {
        let my_block = &partition[block_of[s]];
        let f_exit = delta * (0.3 + 0.6 * rng.gen::<f64>());
        // Exit part: mass to an absorbing state, sometimes also to a
        // random state of another block.
        let mut exit_row = vec![0.0; n];
        let abs_target = n_interior + rng.gen_range(0..n_abs);
        if n_blocks > 1 && rng.gen::<f64>() < 0.5 {
            let mut other = rng.gen_range(0..n_blocks);
            while other == block_of[s] {
                other = rng.gen_range(0..n_blocks);
            }
            let target = partition[other][rng.gen_range(0..partition[other].len())];
            let split = 0.3 + 0.4 * rng.gen::<f64>();
            exit_row[abs_target] = split;
            exit_row[target] = 1.0 - split;
        } else {
            exit_row[abs_target] = 1.0;
        }
        // In-block complement: all mass on the other members, so the
        // avoid-exit travel probability stays at 1 - f_exit per hop.
        let mut in_row = vec![0.0; n];
        if my_block.len() == 1 {
            in_row[s] = 1.0;
        } else {
            for &t in my_block {
                if t != s {
                    in_row[t] = rng.gen::<f64>() + 0.5;
                }
            }
            let sum: f64 = in_row.iter().sum();
            for v in in_row.iter_mut() {
                *v /= sum;
            }
        }
        for t in 0..n {
            rows[s][t] = f_exit * exit_row[t] + (1.0 - f_exit) * in_row[t];
        }
        exits[s].push(Part {
            label: PartLabel::Named(format!("x{s}")),
            weight: f_exit,
            row: exit_row,
        });
    }
    for i in 0..n_abs {
        rows[n_interior + i][n_interior + i] = 1.0;
    }
    let chain = Chain::from_rows(names, absorbing, rows).unwrap();
    let system = crate::transforms::ExitSystem {
        partition,
        representatives,
        exits,
    };
    (chain, system, delta)
}

/// An admissible polarization instance: a chain over `n_interior`
/// states and three absorbing states (two low-value states for Player
/// Two with opposite Player One payoffs, one high-value state), along
/// with per-state polarization data whose replacement transition
/// matches Player One's value exactly.
pub fn random_polarization_instance(
    rng: &mut ChaCha8Rng,
    n_interior: usize,
) -> (
    Chain,
    Vec<f64>,
    Vec<f64>,
    Vec<crate::transforms::PolarizeInput>,
) {
    let n = n_interior + 3;
    let lo_a = n_interior; // r1 = 0.4,  r2 = 0.3
    let lo_b = n_interior + 1; // r1 = -0.4, r2 = 0.3
    let hi = n_interior + 2; // r1 = 0.0,  r2 = 1.0
    let mut boundary1 = vec![0.0; n];
    let mut boundary2 = vec![0.0; n];
    boundary1[lo_a] = 0.4;
    boundary1[lo_b] = -0.4;
    boundary1[hi] = 0.0;
    boundary2[lo_a] = 0.3;
    boundary2[lo_b] = 0.3;
    boundary2[hi] = 1.0;
    let names: Vec<String> = (0..n_interior)
        .map(|i| format!("s{i}"))
        .chain(["lo_a".into(), "lo_b".into(), "hi".into()])
        .collect();
    let absorbing: Vec<bool> = (0..n).map(|i| i >= n_interior).collect();
    let mut rows = vec![vec![0.0; n]; n];
    for s in 0..n_interior {
        // Guaranteed large mass to the high state, a slice to the low
        // pair, and some interior motion.
        let hi_mass = 0.45 + 0.2 * rng.gen::<f64>();
        let lo_mass = 0.1 + 0.15 * rng.gen::<f64>();
        let split = rng.gen::<f64>();
        rows[s][hi] = hi_mass;
        rows[s][lo_a] = lo_mass * split;
        rows[s][lo_b] = lo_mass * (1.0 - split);
        let rest = 1.0 - hi_mass - lo_mass;
        let interior: Vec<f64> = (0..n_interior).map(|_| rng.gen::<f64>()).collect();
        let sum: f64 = interior.iter().sum();
        for (t, w) in interior.iter().enumerate() {
            rows[s][t] = rest * w / sum;
        }
    }
    for i in 0..3 {
        rows[n_interior + i][n_interior + i] = 1.0;
    }
    let chain = Chain::from_rows(names, absorbing, rows.clone()).unwrap();
    let analysis = crate::chain::ChainAnalysis::new(&chain);
    let r1 = analysis.harmonic_payoffs(&boundary1).unwrap();
    let mut inputs = vec![crate::transforms::PolarizeInput::default(); n];
    for s in 0..n_interior {
        // p*: the slice going to the low pair; w2(p*) = 0.3.
        let lo_total = rows[s][lo_a] + rows[s][lo_b];
        let mut p_star_row = vec![0.0; n];
        p_star_row[lo_a] = rows[s][lo_a] / lo_total;
        p_star_row[lo_b] = rows[s][lo_b] / lo_total;
        // q: the slice going to the high state; w2(q) = 1.
        let mut q_row = vec![0.0; n];
        q_row[hi] = 1.0;
        // Replacement: low-pair mix matching Player One's value.
        let mu = (r1[s] + 0.4) / 0.8;
        let mut alt = vec![0.0; n];
        alt[lo_a] = mu;
        alt[lo_b] = 1.0 - mu;
        inputs[s] = crate::transforms::PolarizeInput {
            p_star: Some(Part {
                label: PartLabel::Named("low".into()),
                weight: lo_total,
                row: p_star_row,
            }),
            p_alt: Some(alt),
            q: Some(Part {
                label: PartLabel::Named("high".into()),
                weight: rows[s][hi],
                row: q_row,
            }),
        };
    }
    (chain, boundary1, boundary2, inputs)
}

/// A random game with `n_trans` non-absorbing states, `n_abs` absorbing
/// states, and at most `max_actions` actions per player per state.
/// Every action pair keeps a positive direct absorption probability,
/// so all profiles are absorbing.
pub fn random_game(
    rng: &mut ChaCha8Rng,
    n_trans: usize,
    n_abs: usize,
    max_actions: usize,
) -> GameSpec {
    let n = n_trans + n_abs;
    let mut states = Vec::with_capacity(n);
    let mut transition = Vec::with_capacity(n);
    let omega = 0.2;
    for i in 0..n_trans {
        let na = rng.gen_range(1..=max_actions);
        let nb = rng.gen_range(1..=max_actions);
        states.push(State {
            name: format!("s{i}"),
            kind: StateKind::NonAbsorbing {
                p1_actions: (0..na).map(|a| format!("a{a}")).collect(),
                p2_actions: (0..nb).map(|b| format!("b{b}")).collect(),
            },
        });
        let mut tables = Vec::with_capacity(na);
        for _ in 0..na {
            let mut cols = Vec::with_capacity(nb);
            for _ in 0..nb {
                let mut row = random_distribution(rng, n, 0.4);
                let target = n_trans + rng.gen_range(0..n_abs);
                let eps = 0.05 + 0.2 * rng.gen::<f64>();
                for p in row.iter_mut() {
                    *p *= 1.0 - eps;
                }
                row[target] += eps;
                cols.push(row);
            }
            tables.push(cols);
        }
        transition.push(tables);
    }
    for i in 0..n_abs {
        let s = n_trans + i;
        states.push(State {
            name: format!("A{i}"),
            kind: StateKind::Absorbing(AbsorbingPayoff {
                r1: rng.gen_range(-0.5..=0.5),
                r2: rng.gen_range(omega..=1.0),
            }),
        });
        let mut row = vec![0.0; n];
        row[s] = 1.0;
        transition.push(vec![vec![row]]);
    }
    GameSpec::new(states, transition, omega).unwrap()
}

/// A random profile for `spec`, mixing all actions with positive mass.
pub fn random_profile(rng: &mut ChaCha8Rng, spec: &GameSpec) -> StrategyProfile {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in 0..spec.num_states() {
        let (na, nb) = spec.action_counts(s);
        x.push(random_distribution(rng, na, 0.0));
        y.push(random_distribution(rng, nb, 0.0));
    }
    StrategyProfile { x, y }
}
