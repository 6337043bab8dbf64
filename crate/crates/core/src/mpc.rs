//! Receding-horizon control: at every step solve the horizon-`T` problem
//! from the current state, apply the first control, and move the state with
//! the nominal dynamics.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dissipativity::{rotated_cost, rotated_terminal, StorageCandidate};
use crate::dp::{DpSolver, OcpSolution, TerminalConditions, TerminalMode, TerminalSet, ValueTable};
use crate::error::{Error, Result};
use crate::export::{fmt_num, trajectory_csv, write_text, Csv};
use crate::grid::{Grid, Lattice};
use crate::system::{
    euclidean_distance, sup_distance, ComparisonFunction, ControlSystem, Equilibrium, Trajectory, CONSISTENCY_TOL,
};

/// Slack of the Lyapunov decrease test.
pub const LYAPUNOV_TOL: f64 = 1e-6;
/// Slack of the terminal-cost inequality.
pub const TERMINAL_COST_TOL: f64 = 1e-9;
/// Slack of the radius monotonicity test.
pub const RADIUS_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct MpcConfig {
    pub horizon: usize,
    pub steps: usize,
    pub terminal: TerminalConditions,
    pub grid: Grid,
    /// Reuse the previous value table while the state moves less than one
    /// grid cell per coordinate.
    pub warm_start: bool,
}

impl MpcConfig {
    pub fn new(horizon: usize, steps: usize, terminal: TerminalConditions, grid: Grid) -> Self {
        Self { horizon, steps, terminal, grid, warm_start: false }
    }
}

#[derive(Clone, Debug)]
pub struct MpcRun {
    pub horizon: usize,
    pub terminal_mode: TerminalMode,
    pub closed_loop: Trajectory,
    pub predictions: Vec<OcpSolution>,
    pub feedback_values: Vec<Vec<f64>>,
}

impl MpcRun {
    pub fn steps(&self) -> usize {
        self.feedback_values.len()
    }
}

fn within_one_cell(lattice: &Lattice, a: &[f64], b: &[f64]) -> bool {
    lattice
        .axes()
        .iter()
        .zip(a.iter().zip(b))
        .all(|(axis, (p, q))| (p - q).abs() < axis.step())
}

/// `S` steps of the closed loop from `x0`. Losing feasibility yields
/// [`Error::FeasibilityLoss`] with the steps completed so far.
pub fn mpc_run(system: &ControlSystem, x0: &[f64], config: &MpcConfig) -> Result<MpcRun> {
    if config.horizon == 0 || config.steps == 0 {
        return Err(Error::InvalidArgument("MPC needs T >= 1 and S >= 1".into()));
    }
    if !system.state_box().contains(x0) {
        return Err(Error::Domain(format!("initial state {x0:?}")));
    }
    let solver = DpSolver::new(system, &config.grid)?;
    let mut states = vec![x0.to_vec()];
    let mut feedback = Vec::with_capacity(config.steps);
    let mut predictions = Vec::with_capacity(config.steps);
    let mut cached: Option<(Vec<f64>, ValueTable)> = None;

    let partial = |states: &[Vec<f64>], feedback: &[Vec<f64>], predictions: &[OcpSolution]| MpcRun {
        horizon: config.horizon,
        terminal_mode: config.terminal.mode(),
        closed_loop: Trajectory::new(states.to_vec(), feedback.to_vec()).expect("aligned closed loop"),
        predictions: predictions.to_vec(),
        feedback_values: feedback.to_vec(),
    };

    for k in 0..config.steps {
        let x = states.last().unwrap().clone();
        let reuse = config.warm_start
            && cached
                .as_ref()
                .is_some_and(|(at, _)| within_one_cell(&config.grid.state, at, &x));
        if !reuse {
            match solver.value_table(config.horizon, &config.terminal) {
                Ok(table) => cached = Some((x.clone(), table)),
                Err(source) => {
                    return Err(Error::FeasibilityLoss {
                        step: k,
                        source: Box::new(source),
                        partial: Box::new(partial(&states, &feedback, &predictions)),
                    })
                }
            }
        }
        let table = &cached.as_ref().unwrap().1;
        let sol = match solver.solve_with_table(&x, config.horizon, table, &config.terminal) {
            Ok(sol) => sol,
            Err(source) => {
                return Err(Error::FeasibilityLoss {
                    step: k,
                    source: Box::new(source),
                    partial: Box::new(partial(&states, &feedback, &predictions)),
                })
            }
        };
        let u = sol.first_control().to_vec();
        let mut next = system.step(&x, &u);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { step: k });
        }
        // Rounding residue on a node is removed so unstable dynamics cannot
        // amplify it into a spurious loss of feasibility. The threshold keeps
        // the closed loop consistent with the dynamics.
        if let Some(node) = config.grid.state.node_index(&next).map(|i| config.grid.state.point(i)) {
            if sup_distance(&node, &next) <= CONSISTENCY_TOL {
                next = node;
            }
        }
        states.push(next);
        feedback.push(u);
        predictions.push(sol);
    }
    Ok(partial(&states, &feedback, &predictions))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerformanceRow {
    pub s: usize,
    pub j_s: f64,
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerformanceTable {
    pub rows: Vec<PerformanceRow>,
}

impl PerformanceTable {
    /// Least-squares slope of `J_S` against `S` over rows with `lo ≤ S ≤ hi`.
    pub fn slope(&self, lo: usize, hi: usize) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.s >= lo && r.s <= hi)
            .map(|r| (r.s as f64, r.j_s))
            .collect();
        least_squares_slope(&pts)
    }

    /// `|J_S/S − ℓ^e|` at the longest `S`.
    pub fn tail_gap(&self, eq_cost: f64) -> Option<f64> {
        self.rows.iter().max_by_key(|r| r.s).map(|r| (r.average - eq_cost).abs())
    }

    /// `S,J_S,J_S_over_S`
    pub fn to_csv(&self) -> String {
        let mut csv = Csv::new(&["S", "J_S", "J_S_over_S"]);
        for r in &self.rows {
            csv.raw_row([r.s.to_string(), fmt_num(r.j_s), fmt_num(r.average)]);
        }
        csv.into_string()
    }
}

pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `J_S = Σ_{k<S} ℓ(x(k), u(k))` along the closed loop.
pub fn performance(system: &ControlSystem, run: &MpcRun, s_values: &[usize]) -> Result<PerformanceTable> {
    let available = run.steps();
    let states = run.closed_loop.states();
    let mut prefix = Vec::with_capacity(available + 1);
    prefix.push(0.0);
    for (k, u) in run.feedback_values.iter().enumerate() {
        prefix.push(prefix[k] + system.cost(&states[k], u));
    }
    let rows = s_values
        .iter()
        .map(|&s| {
            if s == 0 || s > available {
                return Err(Error::Range { requested: s, available });
            }
            Ok(PerformanceRow { s, j_s: prefix[s], average: prefix[s] / s as f64 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerformanceTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityRow {
    pub horizon: usize,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityTable {
    pub rows: Vec<StabilityRow>,
    /// Radius nonincreasing in `T` over the list, within [`RADIUS_TOL`].
    pub nonincreasing: bool,
}

/// `max ‖x(k) − x^e‖` over the last `⌈S/4⌉` closed-loop states.
pub fn asymptotic_radius(run: &MpcRun, x_e: &[f64]) -> f64 {
    let states = run.closed_loop.states();
    let tail = run.steps().div_ceil(4).max(1);
    states[states.len() - tail..]
        .iter()
        .map(|x| euclidean_distance(x, x_e))
        .fold(0.0, f64::max)
}

/// Closed-loop radius per horizon without terminal conditions.
pub fn practical_stability_radius(
    system: &ControlSystem,
    x0: &[f64],
    x_e: &[f64],
    horizons: &[usize],
    steps: usize,
    grid: &Grid,
) -> Result<StabilityTable> {
    practical_stability_radius_with(system, x0, x_e, horizons, steps, grid, &TerminalConditions::none())
}

pub fn practical_stability_radius_with(
    system: &ControlSystem,
    x0: &[f64],
    x_e: &[f64],
    horizons: &[usize],
    steps: usize,
    grid: &Grid,
    terminal: &TerminalConditions,
) -> Result<StabilityTable> {
    let mut sorted = horizons.to_vec();
    sorted.sort_unstable();
    let rows = sorted
        .iter()
        .map(|&t| {
            let run = mpc_run(system, x0, &MpcConfig::new(t, steps, terminal.clone(), grid.clone()))?;
            Ok(StabilityRow { horizon: t, radius: asymptotic_radius(&run, x_e) })
        })
        .collect::<Result<Vec<_>>>()?;
    let nonincreasing = rows.windows(2).all(|w| w[1].radius <= w[0].radius + RADIUS_TOL);
    Ok(StabilityTable { rows, nonincreasing })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TerminalCostRow {
    pub x: Vec<f64>,
    /// Control attaining the largest margin among those keeping `f(x,u) ∈ 𝕏₀`.
    pub witness: Option<Vec<f64>>,
    /// `F(x) − ℓ(x,u) + ℓ^e − F(f(x,u))` at the witness.
    pub margin: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TerminalCostReport {
    pub rows: Vec<TerminalCostRow>,
    pub passed: bool,
}

/// Searches the control grid for `u` with `f(x,u) ∈ 𝕏₀` and
/// `F(f(x,u)) ≤ F(x) − ℓ(x,u) + ℓ^e` at each sample `x ∈ 𝕏₀`. A missing
/// terminal cost is `F ≡ 0`.
pub fn terminal_cost_check(
    system: &ControlSystem,
    eq: &Equilibrium,
    terminal: &TerminalConditions,
    samples: &[Vec<f64>],
    controls: &Lattice,
) -> Result<TerminalCostReport> {
    let Some(set) = &terminal.set else {
        return Err(Error::Precondition("terminal cost check needs a terminal set".into()));
    };
    if samples.is_empty() {
        return Err(Error::Domain("empty terminal-set sample".into()));
    }
    if let Some(x) = samples.iter().find(|x| !set.contains(x)) {
        return Err(Error::Domain(format!("sample {x:?} is not in the terminal set")));
    }
    let controls = controls.points();
    let rows: Vec<TerminalCostRow> = samples
        .iter()
        .map(|x| {
            let fx = terminal.cost_at(x);
            let mut best: Option<(f64, &Vec<f64>)> = None;
            for u in &controls {
                let y = system.step(x, u);
                if !set.contains(&y) || !system.state_box().contains(&y) {
                    continue;
                }
                let margin = fx - system.cost(x, u) + eq.cost - terminal.cost_at(&y);
                if !margin.is_nan() && best.is_none_or(|(m, _)| margin > m) {
                    best = Some((margin, u));
                }
            }
            match best {
                Some((margin, u)) => TerminalCostRow {
                    x: x.clone(),
                    witness: Some(u.clone()),
                    margin,
                    passed: margin >= -TERMINAL_COST_TOL,
                },
                None => TerminalCostRow { x: x.clone(), witness: None, margin: f64::NEG_INFINITY, passed: false },
            }
        })
        .collect();
    let passed = rows.iter().all(|r| r.passed);
    Ok(TerminalCostReport { rows, passed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovStatus {
    Passed,
    Violated,
    /// Runs without terminal conditions are only practically stable.
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovStep {
    pub k: usize,
    pub value: f64,
    pub next_value: f64,
    pub alpha: f64,
    /// `Ṽ(x(k+1)) − Ṽ(x(k)) + α(‖x(k) − x^e‖)`
    pub excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovReport {
    pub status: LyapunovStatus,
    pub steps: Vec<LyapunovStep>,
    pub violations: Vec<usize>,
}

/// Evaluates the rotated value `Ṽ_T` (stage cost `ℓ̃`, terminal cost
/// `F + λ`) along the closed loop and tests
/// `Ṽ_T(x(k+1)) ≤ Ṽ_T(x(k)) − α(‖x(k) − x^e‖)`.
pub fn lyapunov_decrease_check(
    system: &ControlSystem,
    storage: &StorageCandidate,
    alpha: &ComparisonFunction,
    eq: &Equilibrium,
    run: &MpcRun,
    terminal: &TerminalConditions,
    grid: &Grid,
) -> Result<LyapunovReport> {
    if run.terminal_mode == TerminalMode::None || terminal.mode() == TerminalMode::None {
        return Ok(LyapunovReport { status: LyapunovStatus::NotApplicable, steps: Vec::new(), violations: Vec::new() });
    }
    let rotated = rotated_cost(system, storage, eq);
    let rot_terminal = rotated_terminal(terminal, storage);
    let table = DpSolver::new(&rotated, grid)?.value_table(run.horizon, &rot_terminal)?;
    let states = run.closed_loop.states();
    let values: Vec<f64> = states.iter().map(|x| table.value_at(run.horizon, x)).collect();
    let mut steps = Vec::with_capacity(run.steps());
    let mut violations = Vec::new();
    for k in 0..run.steps() {
        let a = alpha.eval(euclidean_distance(&states[k], &eq.state));
        let excess = values[k + 1] - values[k] + a;
        if !(excess <= LYAPUNOV_TOL) {
            violations.push(k);
        }
        steps.push(LyapunovStep { k, value: values[k], next_value: values[k + 1], alpha: a, excess });
    }
    let status = if violations.is_empty() { LyapunovStatus::Passed } else { LyapunovStatus::Violated };
    Ok(LyapunovReport { status, steps, violations })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransientReference {
    pub s: usize,
    /// `‖x_MPC(S) − x^e‖`
    pub radius: f64,
    pub mpc_cost: f64,
    /// `inf J_S(x0,u)` over `u` with `‖x_u(S) − x^e‖ ≤ radius`.
    pub reference: f64,
    pub gap: f64,
}

/// Compares `J_S^MPC` with the best `S`-step cost that ends at least as
/// close to `x^e` (closed ball).
pub fn transient_reference(
    system: &ControlSystem,
    run: &MpcRun,
    x_e: &[f64],
    s: usize,
    grid: &Grid,
) -> Result<TransientReference> {
    let perf = performance(system, run, &[s])?;
    let x0 = run.closed_loop.initial();
    let radius = euclidean_distance(&run.closed_loop.states()[s], x_e);
    let terminal = TerminalConditions::none().with_set(TerminalSet::Ball { center: x_e.to_vec(), radius });
    let sol = DpSolver::new(system, grid)?.solve(x0, s, &terminal)?;
    let mpc_cost = perf.rows[0].j_s;
    Ok(TransientReference { s, radius, mpc_cost, reference: sol.value, gap: mpc_cost - sol.value })
}

/// Closed loop, one prediction file per step and `performance.csv` under `dir`.
pub fn write_run(dir: &Path, run: &MpcRun, perf: &PerformanceTable) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(run.steps() + 2);
    let closed = dir.join("closed_loop.csv");
    write_text(&closed, &trajectory_csv(&run.closed_loop))?;
    written.push(closed);
    for (k, pred) in run.predictions.iter().enumerate() {
        let path = dir.join("predictions").join(format!("step_{k:04}.csv"));
        write_text(&path, &trajectory_csv(&pred.trajectory))?;
        written.push(path);
    }
    let path = dir.join("performance.csv");
    write_text(&path, &perf.to_csv())?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{preset, simulate, BoxSet};
    use std::sync::Arc;

    fn inv(points: usize) -> (ControlSystem, Grid) {
        let sys = preset("invariance").unwrap();
        let grid = Grid::uniform(&sys, points, points).unwrap();
        (sys, grid)
    }

    #[test]
    fn terminal_regime_first_step() {
        let sys = preset("invariance").unwrap();
        let grid = Grid::uniform(&sys, 401, 601).unwrap();
        let cfg = MpcConfig::new(3, 4, TerminalConditions::equilibrium(vec![0.0]), grid);
        let run = mpc_run(&sys, &[2.0], &cfg).unwrap();
        assert!((run.feedback_values[0][0] + 3.0).abs() < 0.03);
        assert!((run.closed_loop.states()[1][0] - 1.0).abs() < 0.03);
        for (k, pred) in run.predictions.iter().enumerate() {
            assert_eq!(run.closed_loop.controls()[k], pred.controls[0]);
        }
    }

    #[test]
    fn origin_is_stationary() {
        let (sys, grid) = inv(41);
        let run = mpc_run(&sys, &[0.0], &MpcConfig::new(4, 6, TerminalConditions::none(), grid)).unwrap();
        assert!(run.closed_loop.states().iter().all(|x| x[0] == 0.0));
        assert!(run.feedback_values.iter().all(|u| u[0] == 0.0));
        let perf = performance(&sys, &run, &[1, 6]).unwrap();
        assert!(perf.rows.iter().all(|r| r.j_s == 0.0));
        assert!(matches!(performance(&sys, &run, &[7]), Err(Error::Range { requested: 7, available: 6 })));
    }

    #[test]
    fn prefix_consistency_and_warm_start() {
        let (sys, grid) = inv(101);
        let mut cfg = MpcConfig::new(5, 8, TerminalConditions::none(), grid);
        let cold = mpc_run(&sys, &[1.3], &cfg).unwrap();
        let xs = cold.closed_loop.states();
        for k in 0..cold.feedback_values.len() {
            let next = sys.step(&xs[k], &cold.feedback_values[k]);
            assert!(sup_distance(&next, &xs[k + 1]) <= CONSISTENCY_TOL, "step {k}");
        }
        // Snapping moves each state by at most the tolerance; x⁺ = 2x + u doubles it per step.
        let sim = simulate(&sys, &[1.3], &cold.feedback_values).unwrap();
        for (a, b) in sim.states().iter().zip(xs) {
            assert!(sup_distance(a, b) <= CONSISTENCY_TOL * 2f64.powi(9));
        }
        cfg.warm_start = true;
        let warm = mpc_run(&sys, &[1.3], &cfg).unwrap();
        assert_eq!(warm.feedback_values, cold.feedback_values);
    }

    #[test]
    fn feasibility_loss_carries_partial_run() {
        // Terminal point at 2 cannot be reached from −2 within one step.
        let (sys, grid) = inv(41);
        let cfg = MpcConfig::new(1, 3, TerminalConditions::equilibrium(vec![2.0]), grid);
        match mpc_run(&sys, &[-2.0], &cfg) {
            Err(Error::FeasibilityLoss { step, partial, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(partial.steps(), 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn terminal_cost_examples() {
        let (sys, grid) = inv(81);
        let eq = Equilibrium::new(&sys, vec![0.0], vec![0.0]);
        let trivial = terminal_cost_check(&sys, &eq, &TerminalConditions::equilibrium(vec![0.0]), &[vec![0.0]], &grid.control).unwrap();
        assert!(trivial.passed);
        assert_eq!(trivial.rows[0].witness, Some(vec![0.0]));

        let quad = TerminalConditions::none()
            .with_set(TerminalSet::Box { set: BoxSet::interval(-0.5, 0.5).unwrap() })
            .with_cost(Arc::new(|x: &[f64]| x[0] * x[0]));
        let rep = terminal_cost_check(&sys, &eq, &quad, &[vec![0.5]], &grid.control).unwrap();
        // Exhaustive oracle: max over u of 0.25 − u² − (1 + u)².
        let oracle = (0..81)
            .map(|j| -3.0 + 6.0 * j as f64 / 80.0)
            .filter(|u| (1.0 + u).abs() <= 0.5)
            .map(|u| 0.25 - u * u - (1.0 + u) * (1.0 + u))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(!rep.passed);
        assert!((rep.rows[0].margin - oracle).abs() < 1e-12);
        assert!(terminal_cost_check(&sys, &eq, &quad, &[], &grid.control).is_err());
    }

    #[test]
    fn lyapunov_guard_and_decrease() {
        // Point terminal sets need a grid on which 2x + u hits nodes exactly.
        let sys = preset("invariance").unwrap();
        let grid = Grid::uniform(&sys, 401, 601).unwrap();
        let eq = Equilibrium::new(&sys, vec![0.0], vec![0.0]);
        let storage = StorageCandidate::quadratic(vec![vec![-1.0]], vec![0.0], 2.0);
        let alpha = ComparisonFunction::quadratic(5.0 / 6.0).unwrap();
        let none = TerminalConditions::none();
        let run = mpc_run(&sys, &[2.0], &MpcConfig::new(3, 3, none.clone(), grid.clone())).unwrap();
        let rep = lyapunov_decrease_check(&sys, &storage, &alpha, &eq, &run, &none, &grid).unwrap();
        assert_eq!(rep.status, LyapunovStatus::NotApplicable);

        let term = TerminalConditions::equilibrium(vec![0.0]);
        let run = mpc_run(&sys, &[2.0], &MpcConfig::new(3, 3, term.clone(), grid.clone())).unwrap();
        let rep = lyapunov_decrease_check(&sys, &storage, &alpha, &eq, &run, &term, &grid).unwrap();
        assert_eq!(rep.status, LyapunovStatus::Passed, "{rep:?}");
        assert!(rep.steps[0].next_value < rep.steps[0].value);
    }

    #[test]
    fn slope_of_a_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0 * i as f64 + 1.0)).collect();
        assert!((least_squares_slope(&pts).unwrap() - 3.0).abs() < 1e-12);
        assert!(least_squares_slope(&pts[..1]).is_none());
    }

    #[test]
    fn transient_reference_is_a_lower_bound() {
        let (sys, grid) = inv(101);
        let run = mpc_run(&sys, &[2.0], &MpcConfig::new(5, 10, TerminalConditions::none(), grid.clone())).unwrap();
        let tr = transient_reference(&sys, &run, &[0.0], 10, &grid).unwrap();
        assert!(tr.gap >= -1e-9, "{tr:?}");
    }
}
