//! Command-line front end: game/profile file formats, command
//! dispatch, and deterministic report emission.
//!
//! Game and profile files are UTF-8 JSON with probabilities written as
//! decimal strings; canonical serialization sorts map keys and orders
//! transitions by state and action indices, so a serialize/parse round
//! trip reproduces the spec bit for bit. Structured reports carry the
//! versioned `"schema": "absorb-eq/1"` field and are byte-identical
//! for identical input, parameters, and seed.
//!
//! Exit codes: 0 success, 2 parse failure, 3 validation failure,
//! 4 non-convergence, 5 certification failure (1 for other errors).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::aux_eval::{xi_values, AuxParams};
use crate::chain::ChainAnalysis;
use crate::error::{Error, Result};
use crate::fixed_point::{diagnose_candidate, find_fixed_point, SolverSettings};
use crate::game::{
    induce_chain, validate_game, AbsorbingPayoff, GameSpec, State, StateKind,
    StrategyProfile,
};
use crate::transforms::{contract, simplify_below, ExitSystem};
use crate::verifier::{check_certificate, deviation_gap, simulate_test_and_punish};
use crate::zerosum::discounted_values;

/// Report schema identifier.
pub const SCHEMA: &str = "absorb-eq/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

/// Parsed command line.
#[derive(Debug, Parser)]
#[command(name = "absorb-eq", version, about = "Absorbing-game chain calculus and equilibrium certification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Output format.
    #[arg(long, global = true, value_enum, default_value = "text")]
    pub format: OutputFormat,
    /// Write the report to a file instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// RNG seed, echoed in every report.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every model invariant of a game file.
    Validate { game: PathBuf },
    /// Chain calculus of a profile: rates, escape table, metric,
    /// importance decomposition, harmonic values.
    Analyze {
        game: PathBuf,
        #[arg(long)]
        profile: PathBuf,
    },
    /// Discounted values, punishment values, and optimal stationary
    /// strategies of the zero-sum side games.
    SolveZerosum {
        game: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// The state-specific discounted evaluation of a profile.
    AuxEval {
        game: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        eps_bar: f64,
        #[arg(long, default_value_t = 1e-4)]
        delta: f64,
        #[arg(long, default_value_t = 40.0)]
        q1: f64,
        #[arg(long, default_value_t = 40.0)]
        q2: f64,
    },
    /// Search for an approximate fixed point of the best-reply
    /// correspondence and diagnose it.
    FixedPoint {
        game: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 0.05)]
        eps_bar: f64,
        #[arg(long, default_value_t = 1e-4)]
        delta: f64,
        #[arg(long, default_value_t = 40.0)]
        q1: f64,
        #[arg(long, default_value_t = 40.0)]
        q2: f64,
        #[arg(long, default_value_t = 16)]
        restarts: usize,
        #[arg(long, default_value_t = 400)]
        max_iters: usize,
        /// Residual at which a candidate counts as converged.
        #[arg(long, default_value_t = 1e-6)]
        fp_tol: f64,
        /// Exhaustive grid fallback on very small games.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        grid_fallback: bool,
    },
    /// Chain surgeries with verified conclusions.
    Transform {
        game: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, value_enum)]
        op: TransformOp,
        /// Frequency threshold for `simplify`.
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        /// Exit-avoidance bound for `contract`.
        #[arg(long, default_value_t = 0.3)]
        delta: f64,
    },
    /// Certify a profile as a 4-eps equilibrium.
    Verify {
        game: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        /// Evaluation-space size (defaults to the state count).
        #[arg(long)]
        n: Option<usize>,
        /// Also evaluate the exact deviation program (desk scale).
        #[arg(long, default_value_t = false)]
        deviation_gap: bool,
        /// Start state index for the deviation program.
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// Simulate honest test-and-punish play.
    Simulate {
        game: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = 10_000)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransformOp {
    /// Gamma-simplification of both players' strategies.
    Simplify,
    /// Contraction along the trivial partition (a machinery check).
    Contract,
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// A JSON number written either natively or as a decimal string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum NumberField {
    Number(f64),
    Text(String),
}

impl NumberField {
    fn value(&self) -> Result<f64> {
        match self {
            NumberField::Number(v) => Ok(*v),
            NumberField::Text(s) => s
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("malformed number {s:?}"))),
        }
    }
}

fn number_string(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Deserialize)]
struct StateFile {
    name: String,
    absorbing: bool,
    #[serde(default)]
    r1: Option<NumberField>,
    #[serde(default)]
    r2: Option<NumberField>,
}

#[derive(Debug, Deserialize)]
struct ActionsFile {
    p1: Vec<String>,
    p2: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct TransitionFile {
    from: String,
    a: String,
    b: String,
    to: String,
    p: NumberField,
}

#[derive(Debug, Deserialize)]
struct GameFile {
    states: Vec<StateFile>,
    #[serde(default)]
    actions: BTreeMap<String, ActionsFile>,
    transitions: Vec<TransitionFile>,
    omega: NumberField,
}

/// Parses and validates a game file; validation failures abort with
/// the full issue list.
pub fn parse_game_file(path: &Path) -> Result<GameSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let spec = parse_game_str(&text)?;
    let report = validate_game(&spec);
    if !report.ok {
        let lines: Vec<String> = report
            .issues
            .iter()
            .map(|i| format!("{}: {}", i.location, i.message))
            .collect();
        return Err(Error::Validation(lines.join("; ")));
    }
    Ok(spec)
}

/// Parses a game from JSON text (shape checks only).
pub fn parse_game_str(text: &str) -> Result<GameSpec> {
    let file: GameFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let n = file.states.len();
    let mut index = BTreeMap::new();
    for (i, st) in file.states.iter().enumerate() {
        if index.insert(st.name.clone(), i).is_some() {
            return Err(Error::Parse(format!("duplicate state name {}", st.name)));
        }
    }
    let mut states = Vec::with_capacity(n);
    for st in &file.states {
        if st.absorbing {
            let r1 = st
                .r1
                .as_ref()
                .ok_or_else(|| Error::Parse(format!("state {} needs r1", st.name)))?
                .value()?;
            let r2 = st
                .r2
                .as_ref()
                .ok_or_else(|| Error::Parse(format!("state {} needs r2", st.name)))?
                .value()?;
            states.push(State {
                name: st.name.clone(),
                kind: StateKind::Absorbing(AbsorbingPayoff { r1, r2 }),
            });
        } else {
            let actions = file.actions.get(&st.name).ok_or_else(|| {
                Error::Parse(format!("state {} has no action lists", st.name))
            })?;
            if actions.p1.is_empty() || actions.p2.is_empty() {
                return Err(Error::Parse(format!(
                    "state {} has an empty action list",
                    st.name
                )));
            }
            states.push(State {
                name: st.name.clone(),
                kind: StateKind::NonAbsorbing {
                    p1_actions: actions.p1.clone(),
                    p2_actions: actions.p2.clone(),
                },
            });
        }
    }
    let mut transition: Vec<Vec<Vec<Vec<f64>>>> = states
        .iter()
        .map(|st| {
            let (na, nb) = match &st.kind {
                StateKind::Absorbing(_) => (1, 1),
                StateKind::NonAbsorbing {
                    p1_actions,
                    p2_actions,
                } => (p1_actions.len(), p2_actions.len()),
            };
            vec![vec![vec![0.0; n]; nb]; na]
        })
        .collect();
    for tr in &file.transitions {
        let &s = index
            .get(&tr.from)
            .ok_or_else(|| Error::Parse(format!("unknown state {}", tr.from)))?;
        let &t = index
            .get(&tr.to)
            .ok_or_else(|| Error::Parse(format!("unknown state {}", tr.to)))?;
        let (ai, bi) = match &states[s].kind {
            StateKind::Absorbing(_) => (0usize, 0usize),
            StateKind::NonAbsorbing {
                p1_actions,
                p2_actions,
            } => {
                let ai = p1_actions
                    .iter()
                    .position(|x| x == &tr.a)
                    .ok_or_else(|| {
                        Error::Parse(format!("unknown action {} at {}", tr.a, tr.from))
                    })?;
                let bi = p2_actions
                    .iter()
                    .position(|x| x == &tr.b)
                    .ok_or_else(|| {
                        Error::Parse(format!("unknown action {} at {}", tr.b, tr.from))
                    })?;
                (ai, bi)
            }
        };
        let p = tr.p.value()?;
        if p < 0.0 {
            return Err(Error::Parse(format!(
                "negative probability on {} -> {}",
                tr.from, tr.to
            )));
        }
        transition[s][ai][bi][t] = p;
    }
    // Absorbing self-loops may be left implicit in the file.
    for (s, st) in states.iter().enumerate() {
        if st.is_absorbing() && transition[s][0][0].iter().all(|&p| p == 0.0) {
            transition[s][0][0][s] = 1.0;
        }
    }
    GameSpec::new(states, transition, file.omega.value()?)
}

/// Canonical serialization of a game: sorted keys, decimal strings,
/// transitions ordered by state and action indices.
pub fn serialize_game(spec: &GameSpec) -> String {
    let mut states = Vec::new();
    for st in spec.states() {
        let mut obj = serde_json::Map::new();
        obj.insert("name".into(), json!(st.name));
        obj.insert("absorbing".into(), json!(st.is_absorbing()));
        if let StateKind::Absorbing(p) = &st.kind {
            obj.insert("r1".into(), json!(number_string(p.r1)));
            obj.insert("r2".into(), json!(number_string(p.r2)));
        }
        states.push(Value::Object(obj));
    }
    let mut actions = BTreeMap::new();
    for (s, st) in spec.states().iter().enumerate() {
        if let StateKind::NonAbsorbing {
            p1_actions,
            p2_actions,
        } = &spec.state(s).kind
        {
            actions.insert(
                st.name.clone(),
                json!({"p1": p1_actions, "p2": p2_actions}),
            );
        }
    }
    let mut transitions = Vec::new();
    for (s, st) in spec.states().iter().enumerate() {
        let (na, nb) = spec.action_counts(s);
        for a in 0..na {
            for b in 0..nb {
                for (t, &p) in spec.row(s, a, b).iter().enumerate() {
                    if p > 0.0 {
                        let (an, bn) = match &st.kind {
                            StateKind::Absorbing(_) => ("*".to_string(), "*".to_string()),
                            StateKind::NonAbsorbing {
                                p1_actions,
                                p2_actions,
                            } => (p1_actions[a].clone(), p2_actions[b].clone()),
                        };
                        transitions.push(json!({
                            "from": st.name,
                            "a": an,
                            "b": bn,
                            "to": spec.state(t).name,
                            "p": number_string(p),
                        }));
                    }
                }
            }
        }
    }
    let doc = json!({
        "states": states,
        "actions": actions,
        "transitions": transitions,
        "omega": number_string(spec.omega()),
    });
    serde_json::to_string_pretty(&doc).expect("serialization cannot fail")
}

#[derive(Debug, Deserialize)]
struct ProfileFile {
    #[serde(default)]
    x: BTreeMap<String, BTreeMap<String, NumberField>>,
    #[serde(default)]
    y: BTreeMap<String, BTreeMap<String, NumberField>>,
}

/// Parses a profile file against a game.
pub fn parse_profile_file(path: &Path, spec: &GameSpec) -> Result<StrategyProfile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    parse_profile_str(&text, spec)
}

/// Parses a profile from JSON text; absorbing states and unlisted
/// actions default to their trivial values.
pub fn parse_profile_str(text: &str, spec: &GameSpec) -> Result<StrategyProfile> {
    let file: ProfileFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let mut profile = StrategyProfile {
        x: Vec::new(),
        y: Vec::new(),
    };
    for s in 0..spec.num_states() {
        let name = &spec.state(s).name;
        match &spec.state(s).kind {
            StateKind::Absorbing(_) => {
                profile.x.push(vec![1.0]);
                profile.y.push(vec![1.0]);
            }
            StateKind::NonAbsorbing {
                p1_actions,
                p2_actions,
            } => {
                for (player, (names, table)) in [
                    (1, (p1_actions, &file.x)),
                    (2, (p2_actions, &file.y)),
                ] {
                    let mut dist = vec![0.0; names.len()];
                    if let Some(entries) = table.get(name) {
                        for (action, value) in entries {
                            let idx = names.iter().position(|a| a == action).ok_or_else(
                                || {
                                    Error::Parse(format!(
                                        "unknown player {player} action {action} at {name}"
                                    ))
                                },
                            )?;
                            dist[idx] = value.value()?;
                        }
                    } else {
                        return Err(Error::Parse(format!(
                            "profile misses state {name} for player {player}"
                        )));
                    }
                    if player == 1 {
                        profile.x.push(dist);
                    } else {
                        profile.y.push(dist);
                    }
                }
            }
        }
    }
    profile.validate(spec)?;
    Ok(profile)
}

/// Canonical serialization of a profile (interior states only).
pub fn serialize_profile(spec: &GameSpec, profile: &StrategyProfile) -> String {
    let mut x = BTreeMap::new();
    let mut y = BTreeMap::new();
    for s in spec.non_absorbing() {
        let name = spec.state(s).name.clone();
        if let StateKind::NonAbsorbing {
            p1_actions,
            p2_actions,
        } = &spec.state(s).kind
        {
            let xs: BTreeMap<String, String> = p1_actions
                .iter()
                .zip(profile.x[s].iter())
                .filter(|(_, &p)| p > 0.0)
                .map(|(a, &p)| (a.clone(), number_string(p)))
                .collect();
            let ys: BTreeMap<String, String> = p2_actions
                .iter()
                .zip(profile.y[s].iter())
                .filter(|(_, &p)| p > 0.0)
                .map(|(b, &p)| (b.clone(), number_string(p)))
                .collect();
            x.insert(name.clone(), xs);
            y.insert(name, ys);
        }
    }
    serde_json::to_string_pretty(&json!({"x": x, "y": y}))
        .expect("serialization cannot fail")
}

// ---------------------------------------------------------------------------
// Reports and dispatch
// ---------------------------------------------------------------------------

/// Exit code of an error per the documented mapping.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse(_) | Error::Io(_) | Error::Json(_) => 2,
        Error::Validation(_) => 3,
        Error::NonConvergence(_) => 4,
        _ => 1,
    }
}

fn report_value(command: &str, seed: u64, params: BTreeMap<String, String>, result: Value) -> Value {
    json!({
        "schema": SCHEMA,
        "command": command,
        "seed": seed,
        "params": params,
        "result": result,
    })
}

fn render_text(report: &Value, lines: &mut String) {
    fn walk(prefix: &str, value: &Value, lines: &mut String) {
        match value {
            Value::Object(map) => {
                for (k, v) in map {
                    walk(&format!("{prefix}{k}."), v, lines);
                }
            }
            Value::Array(items) => {
                for (i, v) in items.iter().enumerate() {
                    walk(&format!("{prefix}{i}."), v, lines);
                }
            }
            other => {
                let shown = prefix.trim_end_matches('.');
                lines.push_str(&format!("{shown} = {other}\n"));
            }
        }
    }
    walk("", report, lines);
}

/// Runs the parsed command; returns the report and the exit code.
pub fn execute(cli: &Cli) -> (Value, i32) {
    match dispatch(cli) {
        Ok((report, code)) => (report, code),
        Err(err) => {
            let report = json!({
                "schema": SCHEMA,
                "error": err.to_string(),
                "exit": exit_code(&err),
            });
            (report, exit_code(&err))
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(Value, i32)> {
    let seed = cli.seed;
    match &cli.command {
        Command::Validate { game } => {
            // Validation issues are the payload here, not an abort.
            let text = std::fs::read_to_string(game)
                .map_err(|e| Error::Parse(format!("{}: {e}", game.display())))?;
            let spec = parse_game_str(&text)?;
            let report = validate_game(&spec);
            let result = json!({
                "ok": report.ok,
                "is_absorbing_forcible_p2": report.is_absorbing_forcible_p2,
                "issues": report.issues.iter().map(|i| json!({
                    "location": i.location,
                    "message": i.message,
                })).collect::<Vec<_>>(),
                "rho": spec.rho(),
                "m": spec.m(),
            });
            let code = if report.ok { 0 } else { 3 };
            Ok((
                report_value("validate", seed, BTreeMap::new(), result),
                code,
            ))
        }
        Command::Analyze { game, profile } => {
            let spec = parse_game_file(game)?;
            let profile = parse_profile_file(profile, &spec)?;
            let chain = induce_chain(&spec, &profile)?;
            let analysis = ChainAnalysis::new(&chain);
            let names: Vec<&str> = (0..chain.num_states())
                .map(|s| chain.name(s))
                .collect();
            let mut per_state = Vec::new();
            let boundary1 = spec.boundary(1);
            let boundary2 = spec.boundary(2);
            let (r1, r2) = if analysis.is_absorbing_chain {
                (
                    Some(analysis.harmonic_payoffs(&boundary1)?),
                    Some(analysis.harmonic_payoffs(&boundary2)?),
                )
            } else {
                (None, None)
            };
            for s in 0..chain.num_states() {
                let mut parts = Vec::new();
                if !chain.is_absorbing_state(s) && analysis.is_absorbing_chain {
                    let phi2 = analysis.absorption_values_avoiding(s, &boundary2);
                    for part in chain.parts(s) {
                        let stats = analysis.part_statistics_with(
                            s,
                            part,
                            r2.as_ref().unwrap(),
                            &phi2,
                        )?;
                        parts.push(json!({
                            "label": part.label.to_string(),
                            "weight": part.weight,
                            "g": stats.g,
                            "nu": stats.nu,
                            "v2": stats.v,
                            "w2": stats.w,
                        }));
                    }
                }
                per_state.push(json!({
                    "state": names[s],
                    "absorbing": chain.is_absorbing_state(s),
                    "absorption_rate": analysis.absorption_rate[s],
                    "expected_visits": if analysis.expected_visits[s].is_finite() {
                        json!(analysis.expected_visits[s])
                    } else {
                        json!("infinite")
                    },
                    "r1": r1.as_ref().map(|r| r[s]),
                    "r2": r2.as_ref().map(|r| r[s]),
                    "parts": parts,
                }));
            }
            let esc: Vec<Vec<f64>> = analysis.esc.clone();
            let metric: Vec<Vec<f64>> = (0..chain.num_states())
                .map(|s| {
                    (0..chain.num_states())
                        .map(|t| analysis.metric(s, t))
                        .collect()
                })
                .collect();
            let result = json!({
                "absorbing_chain": analysis.is_absorbing_chain,
                "trapped_class": analysis.trapped_class,
                "states": per_state,
                "escape": esc,
                "metric": metric,
                "tolerance": crate::IDENTITY_TOL,
            });
            Ok((
                report_value("analyze", seed, BTreeMap::new(), result),
                0,
            ))
        }
        Command::SolveZerosum { game, alpha, tol } => {
            let spec = parse_game_file(game)?;
            let tables = discounted_values(&spec, *alpha, *tol)?;
            let mut params = BTreeMap::new();
            params.insert("alpha".into(), number_string(*alpha));
            params.insert("tol".into(), number_string(*tol));
            let result = json!({
                "c_alpha": tables.c_alpha,
                "c1": tables.c1,
                "c2": tables.c2,
                "residual": tables.tolerance_achieved,
                "p1_optimal": tables.p1_optimal,
                "p2_optimal": tables.p2_optimal,
                "tolerance": *tol,
            });
            Ok((report_value("solve-zerosum", seed, params, result), 0))
        }
        Command::AuxEval {
            game,
            profile,
            eps_bar,
            delta,
            q1,
            q2,
        } => {
            let spec = parse_game_file(game)?;
            let profile = parse_profile_file(profile, &spec)?;
            let chain = induce_chain(&spec, &profile)?;
            let analysis = ChainAnalysis::new(&chain);
            let aux = AuxParams::new(*eps_bar, *delta, *q1, *q2)?;
            let eval = xi_values(&analysis, &spec.boundary(2), &aux)?;
            let mut params = BTreeMap::new();
            params.insert("eps_bar".into(), number_string(*eps_bar));
            params.insert("delta".into(), number_string(*delta));
            params.insert("q1".into(), number_string(*q1));
            params.insert("q2".into(), number_string(*q2));
            let mut states = Vec::new();
            for s in spec.non_absorbing() {
                let state_aux = eval.state(s).unwrap();
                let moves: Vec<Value> = state_aux
                    .moves
                    .iter()
                    .zip(eval.xi_moves[s].iter())
                    .map(|(mv, &xi_b)| {
                        json!({
                            "b": mv.b,
                            "weight": mv.weight,
                            "g": mv.g,
                            "g_tilde": mv.g_tilde,
                            "g_bar": mv.g_bar,
                            "v2": mv.v2,
                            "v2_tilde": mv.v2_tilde,
                            "xi_b": xi_b,
                        })
                    })
                    .collect();
                states.push(json!({
                    "state": spec.state(s).name,
                    "a": state_aux.a,
                    "a_tilde": state_aux.a_tilde,
                    "log_w_tilde": eval.log_w_tilde[s],
                    "r2": state_aux.r2,
                    "xi": eval.xi[s],
                    "xi_bar": eval.xi_bar[s],
                    "moves": moves,
                }));
            }
            let result = json!({
                "states": states,
                "consistency_residual": eval.consistency_residual,
                "tolerance": crate::IDENTITY_TOL,
            });
            Ok((report_value("aux-eval", seed, params, result), 0))
        }
        Command::FixedPoint {
            game,
            alpha,
            eps_bar,
            delta,
            q1,
            q2,
            restarts,
            max_iters,
            fp_tol,
            grid_fallback,
        } => {
            let spec = parse_game_file(game)?;
            let tables = discounted_values(&spec, *alpha, 1e-10)?;
            let aux = AuxParams::new(*eps_bar, *delta, *q1, *q2)?;
            let settings = SolverSettings {
                restarts: *restarts,
                max_iters: *max_iters,
                tol: *fp_tol,
                seed,
                grid_fallback: *grid_fallback,
                ..Default::default()
            };
            let candidate = find_fixed_point(&spec, &tables, &aux, &settings)?;
            let diagnosis = diagnose_candidate(&spec, &candidate, &tables, &aux, 1e-7)?;
            let mut params = BTreeMap::new();
            params.insert("alpha".into(), number_string(*alpha));
            params.insert("eps_bar".into(), number_string(*eps_bar));
            params.insert("delta".into(), number_string(*delta));
            params.insert("q1".into(), number_string(*q1));
            params.insert("q2".into(), number_string(*q2));
            params.insert("restarts".into(), restarts.to_string());
            params.insert("max_iters".into(), max_iters.to_string());
            params.insert("fp_tol".into(), number_string(*fp_tol));
            let entry = |e: &crate::fixed_point::DiagnosisEntry| {
                json!({"name": e.name, "state": e.state, "margin": e.margin, "holds": e.holds})
            };
            let result = json!({
                "profile": serde_json::from_str::<Value>(
                    &serialize_profile(&spec, &candidate.profile)
                )?,
                "residual": candidate.residual,
                "converged": candidate.converged,
                "iterations": candidate.iterations,
                "restarts_used": candidate.restarts_used,
                "used_grid": candidate.used_grid,
                "diagnosis": {
                    "absorbing": diagnosis.absorbing,
                    "value_dominates_jump": diagnosis.value_dominates_jump.iter().map(entry).collect::<Vec<_>>(),
                    "eval_dominates_jump": diagnosis.eval_dominates_jump.iter().map(entry).collect::<Vec<_>>(),
                    "jump_usage": diagnosis.jump_usage.iter().map(entry).collect::<Vec<_>>(),
                    "jump_mass": diagnosis.jump_mass.iter().map(entry).collect::<Vec<_>>(),
                    "small_rate": diagnosis.small_rate.iter().map(entry).collect::<Vec<_>>(),
                    "l_star": diagnosis.l_star,
                    "delta_star": diagnosis.delta_star,
                    "paper_regime": diagnosis.paper_regime,
                    "all_hold": diagnosis.all_hold,
                },
                "tolerance": *fp_tol,
            });
            let code = if candidate.converged { 0 } else { 4 };
            Ok((report_value("fixed-point", seed, params, result), code))
        }
        Command::Transform {
            game,
            profile,
            op,
            gamma,
            delta,
        } => {
            let spec = parse_game_file(game)?;
            let profile = parse_profile_file(profile, &spec)?;
            let mut params = BTreeMap::new();
            params.insert("gamma".into(), number_string(*gamma));
            params.insert("delta".into(), number_string(*delta));
            match op {
                TransformOp::Simplify => {
                    let sx = simplify_below(&profile, 1, *gamma)?;
                    let sboth = simplify_below(&sx.result, 2, *gamma)?;
                    let result = json!({
                        "profile": serde_json::from_str::<Value>(
                            &serialize_profile(&spec, &sboth.result)
                        )?,
                        "removed_frequency_p1": sx.removed_frequency,
                        "removed_frequency_p2": sboth.removed_frequency,
                    });
                    Ok((report_value("transform", seed, params, result), 0))
                }
                TransformOp::Contract => {
                    let chain = induce_chain(&spec, &profile)?;
                    let analysis = ChainAnalysis::new(&chain);
                    let exits = ExitSystem::trivial(&chain);
                    let result_data =
                        contract(&analysis, &exits, *delta, &spec.boundary(2))?;
                    let report = &result_data.report;
                    let result = json!({
                        "n_multi_blocks": report.n_multi,
                        "delta": report.delta,
                        "delta_small_enough": report.delta_small_enough,
                        "allowed_taboo_factor": report.allowed_taboo_factor,
                        "worst_taboo_factor": report.worst_taboo_factor,
                        "representative_match": report.representative_match,
                        "harmonic_deviation": report.harmonic_deviation,
                        "harmonic_bound": report.harmonic_bound,
                        "holds": report.holds,
                        "tolerance": crate::IDENTITY_TOL,
                    });
                    Ok((report_value("transform", seed, params, result), 0))
                }
            }
        }
        Command::Verify {
            game,
            profile,
            eps,
            n,
            deviation_gap: run_gap,
            start,
        } => {
            let spec = parse_game_file(game)?;
            let profile = parse_profile_file(profile, &spec)?;
            let n_eval = n.unwrap_or_else(|| spec.num_states());
            let cert = check_certificate(&spec, &profile, *eps, n_eval)?;
            let mut params = BTreeMap::new();
            params.insert("eps".into(), number_string(*eps));
            params.insert("n".into(), n_eval.to_string());
            let gap = if *run_gap {
                let mut gaps = Vec::new();
                for player in [1usize, 2] {
                    let report = deviation_gap(&spec, &profile, player, *start, *eps)?;
                    gaps.push(json!({
                        "player": player,
                        "deviation_value": report.deviation_value,
                        "baseline": report.baseline,
                        "gap": report.gap,
                        "bound": report.bound,
                        "holds": report.holds,
                        "horizon": report.horizon,
                        "buckets": report.buckets,
                    }));
                }
                Some(gaps)
            } else {
                None
            };
            let result = json!({
                "certified": cert.certified,
                "eps": cert.eps,
                "four_eps": 4.0 * cert.eps,
                "n": cert.n,
                "m_bound": cert.m_bound,
                "delta_used": cert.delta_used,
                "delta_budget": cert.delta_budget,
                "cond1_margins": cert.cond1_margins.iter().map(|&(player, state, margin)| json!({
                    "player": player, "state": spec.state(state).name, "margin": margin,
                })).collect::<Vec<_>>(),
                "cond2_margins": cert.cond2_margins.iter().map(|&(player, state, mv, margin)| json!({
                    "player": player, "state": spec.state(state).name, "move": mv, "margin": margin,
                })).collect::<Vec<_>>(),
                "witnesses": cert.witnesses,
                "deviation_gaps": gap,
            });
            let code = if cert.certified { 0 } else { 5 };
            Ok((report_value("verify", seed, params, result), code))
        }
        Command::Simulate {
            game,
            profile,
            eps,
            runs,
            start,
        } => {
            let spec = parse_game_file(game)?;
            let profile = parse_profile_file(profile, &spec)?;
            let report = simulate_test_and_punish(&spec, &profile, *start, *eps, *runs, seed)?;
            let mut params = BTreeMap::new();
            params.insert("eps".into(), number_string(*eps));
            params.insert("runs".into(), runs.to_string());
            params.insert("start".into(), start.to_string());
            let result = json!({
                "runs": report.runs,
                "horizon": report.horizon,
                "punished": report.punished,
                "absorbed_clean": report.absorbed_clean,
                "horizon_expired": report.horizon_expired,
                "punishment_frequency": report.punishment_frequency,
                "punishment_upper99": report.punishment_upper99,
                "absorption_frequency": report.absorption_frequency,
                "mean_absorption_stage": report.mean_absorption_stage,
                "max_statistic": report.max_statistic,
                "confidence": "99% Wilson upper bound",
            });
            Ok((report_value("simulate", seed, params, result), 0))
        }
    }
}

/// Entry point: parses arguments, runs, writes the report, returns the
/// exit code.
pub fn run_main() -> i32 {
    let cli = Cli::parse();
    let (report, code) = execute(&cli);
    let output = match cli.format {
        OutputFormat::Json => {
            let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
            text.push('\n');
            text
        }
        OutputFormat::Text => {
            let mut text = String::new();
            render_text(&report, &mut text);
            text
        }
    };
    match &cli.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, output) {
                eprintln!("cannot write {}: {e}", path.display());
                return 2;
            }
        }
        None => print!("{output}"),
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn game_round_trip_is_bit_exact() {
        let g1 = fixtures::g1();
        let text = serialize_game(&g1);
        let parsed = parse_game_str(&text).unwrap();
        assert_eq!(parsed, g1);
        assert_eq!(serialize_game(&parsed), text);
    }

    #[test]
    fn choice_game_round_trip() {
        let spec = fixtures::g2_choice_game();
        let text = serialize_game(&spec);
        let parsed = parse_game_str(&text).unwrap();
        assert_eq!(parsed, spec);
    }

    #[test]
    fn profile_round_trip() {
        let spec = fixtures::g2_choice_game();
        let profile = StrategyProfile {
            x: vec![vec![1.0], vec![1.0], vec![1.0], vec![1.0]],
            y: vec![vec![0.25, 0.75], vec![1.0, 0.0], vec![1.0], vec![1.0]],
        };
        let text = serialize_profile(&spec, &profile);
        let parsed = parse_profile_str(&text, &spec).unwrap();
        assert_eq!(parsed, profile);
    }

    #[test]
    fn negative_probability_rejected_at_parse() {
        let g1 = fixtures::g1();
        let text = serialize_game(&g1).replace("\"1\"", "\"-1\"");
        match parse_game_str(&text) {
            Err(Error::Parse(msg)) => assert!(msg.contains("negative")),
            other => panic!("expected parse rejection, got {other:?}"),
        }
    }

    #[test]
    fn string_and_number_probabilities_agree() {
        let with_strings = r#"{
            "states": [
                {"name": "s", "absorbing": false},
                {"name": "A", "absorbing": true, "r1": "0.25", "r2": "0.75"}
            ],
            "actions": {"s": {"p1": ["a"], "p2": ["b"]}},
            "transitions": [
                {"from": "s", "a": "a", "b": "b", "to": "A", "p": "0.5"},
                {"from": "s", "a": "a", "b": "b", "to": "s", "p": "0.5"}
            ],
            "omega": "0.75"
        }"#;
        let with_numbers = with_strings
            .replace("\"0.5\"", "0.5")
            .replace("\"0.25\"", "0.25")
            .replace("\"0.75\"", "0.75");
        let a = parse_game_str(with_strings).unwrap();
        let b = parse_game_str(&with_numbers).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exit_codes_mapped() {
        assert_eq!(exit_code(&Error::Parse("x".into())), 2);
        assert_eq!(exit_code(&Error::Validation("x".into())), 3);
        assert_eq!(exit_code(&Error::NonConvergence("x".into())), 4);
        assert_eq!(exit_code(&Error::EmptyMatrix), 1);
    }
}
