//! Shared oracles for the integration suites.
//!
//! The path-enumeration oracle propagates probability mass forward
//! through the chain for a fixed horizon, splitting off the event mass
//! at every stage, and reports the still-running mass as a certified
//! tail bound: the exact probability lies within `tail` of the
//! estimate. It solves no linear system, so it is independent of the
//! implementation path it checks.

use absorb_eq::Chain;

/// Forward-propagated estimate of a taboo probability with its tail.
pub struct OracleEstimate {
    pub estimate: f64,
    pub tail: f64,
}

/// Probability, from `s`, of reaching `target` before `taboo`
/// (stages counted from 1), truncated at `horizon`.
pub fn taboo_oracle(
    chain: &Chain,
    s: usize,
    taboo: &[usize],
    target: &[usize],
    horizon: usize,
) -> OracleEstimate {
    let n = chain.num_states();
    let mut is_taboo = vec![false; n];
    let mut is_target = vec![false; n];
    for &u in taboo {
        is_taboo[u] = true;
    }
    for &u in target {
        is_target[u] = true;
    }
    // Mass of paths still running (no event decided), by current state.
    let mut running = vec![0.0f64; n];
    running[s] = 1.0;
    let mut hit = 0.0;
    for _ in 0..horizon {
        let mut next = vec![0.0f64; n];
        for (u, &mass) in running.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (t, &p) in chain.row(u).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                if is_target[t] {
                    hit += mass * p;
                } else if !is_taboo[t] {
                    next[t] += mass * p;
                }
            }
        }
        running = next;
    }
    OracleEstimate {
        estimate: hit,
        tail: running.iter().sum(),
    }
}

/// Truncated expected boundary value at absorption (zero on
/// non-absorbed mass), with the running mass as the tail weight.
pub fn absorption_value_oracle(
    chain: &Chain,
    s: usize,
    boundary: &[f64],
    horizon: usize,
) -> OracleEstimate {
    let n = chain.num_states();
    let mut running = vec![0.0f64; n];
    let mut value = 0.0;
    if chain.is_absorbing_state(s) {
        return OracleEstimate {
            estimate: boundary[s],
            tail: 0.0,
        };
    }
    running[s] = 1.0;
    for _ in 0..horizon {
        let mut next = vec![0.0f64; n];
        for (u, &mass) in running.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (t, &p) in chain.row(u).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                if chain.is_absorbing_state(t) {
                    value += mass * p * boundary[t];
                } else {
                    next[t] += mass * p;
                }
            }
        }
        running = next;
    }
    let tail: f64 = running.iter().sum::<f64>()
        * boundary
            .iter()
            .fold(0.0f64, |acc, &b| acc.max(b.abs()));
    OracleEstimate {
        estimate: value,
        tail,
    }
}
