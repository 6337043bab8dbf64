//! Finite-horizon optimal control by backward dynamic programming on grids.
//!
//! The value recursion is `V_0 = F` on the terminal set (`+∞` elsewhere) and
//! `V_{k+1}(x) = min_u ℓ(x,u) + V_k(f(x,u))`, evaluated at every state node
//! with `V_k` interpolated at the successor. Successors outside `𝕏` and
//! infinite stage costs are infeasible. Because the problem is
//! time-invariant, the per-pair stage costs and interpolation stencils are
//! computed once per `(system, grid)` in a [`Discretization`] and reused by
//! every layer and every solve.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{combine, Grid, Interpolation, Lattice, SNAP_TOL};
use crate::system::{
    euclidean_distance, simulate, trajectory_cost, BoxSet, ControlSystem, Trajectory, BOX_TOL,
};

/// Relative gap under which two candidate values count as tied.
pub const TIE_TOL: f64 = 1e-12;
/// Upper bound on the number of sequences `brute_force_solve` enumerates.
pub const ENUMERATION_LIMIT: f64 = 1e7;

pub type TerminalCostFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Terminal constraint set `𝕏₀`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalSet {
    /// Singleton, matched on the grid within the snap tolerance.
    Point { state: Vec<f64> },
    Box { set: BoxSet },
    /// Closed Euclidean ball.
    Ball { center: Vec<f64>, radius: f64 },
}

impl TerminalSet {
    /// Membership of a continuous state.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Self::Point { state } => euclidean_distance(state, x) <= SNAP_TOL,
            Self::Box { set } => set.contains(x),
            Self::Ball { center, radius } => euclidean_distance(center, x) <= radius + BOX_TOL,
        }
    }

    fn node_mask(&self, lattice: &Lattice) -> Vec<bool> {
        match self {
            Self::Point { state } => {
                let mut mask = vec![false; lattice.len()];
                if let Some(idx) = lattice.node_index(state) {
                    mask[idx] = true;
                }
                mask
            }
            _ => (0..lattice.len()).map(|i| self.contains(&lattice.point(i))).collect(),
        }
    }

    fn check_inside(&self, system: &ControlSystem) -> Result<()> {
        let inside = match self {
            Self::Point { state } => system.state_box().contains(state),
            Self::Box { set } => {
                system.state_box().contains(set.lower()) && system.state_box().contains(set.upper())
            }
            Self::Ball { center, radius } => *radius >= 0.0 && system.state_box().contains(center),
        };
        if inside {
            Ok(())
        } else {
            Err(Error::Domain("terminal set".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    None,
    ConstraintSet,
    Cost,
    Both,
}

/// Optional terminal set `𝕏₀` and terminal cost `F`.
#[derive(Clone, Default)]
pub struct TerminalConditions {
    pub set: Option<TerminalSet>,
    pub cost: Option<TerminalCostFn>,
}

impl fmt::Debug for TerminalConditions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalConditions")
            .field("set", &self.set)
            .field("cost", &self.cost.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

impl TerminalConditions {
    pub fn none() -> Self {
        Self::default()
    }

    /// `x(T) = x_e` with `F ≡ 0`.
    pub fn equilibrium(state: Vec<f64>) -> Self {
        Self {
            set: Some(TerminalSet::Point { state }),
            cost: None,
        }
    }

    pub fn with_set(mut self, set: TerminalSet) -> Self {
        self.set = Some(set);
        self
    }

    pub fn with_cost(mut self, cost: TerminalCostFn) -> Self {
        self.cost = Some(cost);
        self
    }

    pub fn mode(&self) -> TerminalMode {
        match (&self.set, &self.cost) {
            (None, None) => TerminalMode::None,
            (Some(_), None) => TerminalMode::ConstraintSet,
            (None, Some(_)) => TerminalMode::Cost,
            (Some(_), Some(_)) => TerminalMode::Both,
        }
    }

    pub fn cost_at(&self, x: &[f64]) -> f64 {
        self.cost.as_ref().map_or(0.0, |f| f(x))
    }

    /// `F(x)` when `x ∈ 𝕏₀`, `+∞` otherwise.
    pub fn terminal_value(&self, x: &[f64]) -> f64 {
        match &self.set {
            Some(set) if !set.contains(x) => f64::INFINITY,
            _ => self.cost_at(x),
        }
    }

    /// `V_0` on the state nodes.
    fn initial_layer(&self, system: &ControlSystem, lattice: &Lattice) -> Result<Vec<f64>> {
        let mask = match &self.set {
            Some(set) => {
                set.check_inside(system)?;
                set.node_mask(lattice)
            }
            None => vec![true; lattice.len()],
        };
        if !mask.iter().any(|&m| m) {
            return Err(Error::Infeasible {
                layer: 0,
                detail: "terminal set contains no grid node".into(),
            });
        }
        mask.iter()
            .enumerate()
            .map(|(i, &inside)| {
                if !inside {
                    return Ok(f64::INFINITY);
                }
                let x = lattice.point(i);
                let v = self.cost_at(&x);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::InvalidArgument(format!(
                        "terminal cost is not finite at {x:?}"
                    )))
                }
            })
            .collect()
    }
}

/// Stage costs and successor stencils for every (state node, control node).
pub struct Discretization {
    system: ControlSystem,
    grid: Grid,
    interpolation: Interpolation,
    controls: Vec<Vec<f64>>,
    /// Row-major `[state][control]`; `+∞` marks an infeasible pair.
    cost: Vec<f64>,
    start: Vec<u32>,
    corner: Vec<u32>,
    weight: Vec<f64>,
}

impl fmt::Debug for Discretization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Discretization")
            .field("system", &self.system.name())
            .field("states", &self.grid.state.len())
            .field("controls", &self.controls.len())
            .field("interpolation", &self.interpolation)
            .finish()
    }
}

/// Per-state costs, stencil sizes, corners and weights, one entry per control.
type PairRow = (Vec<f64>, Vec<u32>, Vec<u32>, Vec<f64>);

impl Discretization {
    pub fn new(system: &ControlSystem, grid: &Grid, interpolation: Interpolation) -> Result<Self> {
        grid.check_matches(system)?;
        let ns = grid.state.len();
        let nc = grid.control.len();
        if (ns as u64) * (nc as u64) * (1u64 << grid.state.dim()) >= u32::MAX as u64 {
            return Err(Error::InvalidArgument(format!(
                "grid with {ns} states and {nc} controls is too large"
            )));
        }
        let controls = grid.control.points();
        let rows: Vec<PairRow> = (0..ns)
            .into_par_iter()
            .map(|i| {
                let x = grid.state.point(i);
                let mut costs = Vec::with_capacity(nc);
                let mut counts = Vec::with_capacity(nc);
                let mut corners = Vec::with_capacity(2 * nc);
                let mut weights = Vec::with_capacity(2 * nc);
                let mut buf = Vec::new();
                for u in &controls {
                    let c = system.cost(&x, u);
                    let y = system.step(&x, u);
                    if c < f64::INFINITY && grid.state.stencil_into(&y, interpolation, &mut buf) {
                        costs.push(c);
                        counts.push(buf.len() as u32);
                        for &(idx, w) in &buf {
                            corners.push(idx as u32);
                            weights.push(w);
                        }
                    } else {
                        costs.push(f64::INFINITY);
                        counts.push(0);
                    }
                }
                (costs, counts, corners, weights)
            })
            .collect();

        let mut cost = Vec::with_capacity(ns * nc);
        let mut start = Vec::with_capacity(ns * nc + 1);
        let mut corner = Vec::new();
        let mut weight = Vec::new();
        start.push(0u32);
        for (costs, counts, corners, weights) in rows {
            cost.extend(costs);
            let mut at = *start.last().unwrap();
            for n in counts {
                at += n;
                start.push(at);
            }
            corner.extend(corners);
            weight.extend(weights);
        }
        Ok(Self {
            system: system.clone(),
            grid: grid.clone(),
            interpolation,
            controls,
            cost,
            start,
            corner,
            weight,
        })
    }

    pub fn system(&self) -> &ControlSystem {
        &self.system
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn control(&self, j: usize) -> &[f64] {
        &self.controls[j]
    }

    pub fn controls(&self) -> &[Vec<f64>] {
        &self.controls
    }

    /// `ℓ(x_i,u_j) + V(f(x_i,u_j))` from the stored stencil.
    #[inline]
    fn q_value(&self, pair: usize, values: &[f64]) -> f64 {
        let c = self.cost[pair];
        if c == f64::INFINITY {
            return f64::INFINITY;
        }
        let (a, b) = (self.start[pair] as usize, self.start[pair + 1] as usize);
        let mut acc = 0.0;
        for k in a..b {
            let w = self.weight[k];
            if w > 0.0 {
                let v = values[self.corner[k] as usize];
                if v == f64::INFINITY {
                    return f64::INFINITY;
                }
                acc += w * v;
            }
        }
        c + acc
    }

    /// Stage cost and dominant successor node of a pair, `None` when the
    /// pair is infeasible.
    pub(crate) fn successor(&self, pair: usize) -> Option<(f64, usize)> {
        let c = self.cost[pair];
        let (a, b) = (self.start[pair] as usize, self.start[pair + 1] as usize);
        if c == f64::INFINITY || a == b {
            return None;
        }
        let k = (a..b).max_by(|&p, &q| self.weight[p].total_cmp(&self.weight[q]))?;
        Some((c, self.corner[k] as usize))
    }

    /// One Bellman layer: minimum and argmin at every state node.
    pub(crate) fn bellman(&self, values: &[f64]) -> (Vec<f64>, Vec<u32>) {
        let nc = self.controls.len();
        let out: Vec<(f64, u32)> = (0..self.grid.state.len())
            .into_par_iter()
            .map_init(
                || vec![0.0; nc],
                |q, i| {
                    for (j, slot) in q.iter_mut().enumerate() {
                        *slot = self.q_value(i * nc + j, values);
                    }
                    match select(q, 0.0) {
                        Some((j, v)) => (v, j as u32),
                        None => (f64::INFINITY, u32::MAX),
                    }
                },
            )
            .collect();
        out.into_iter().unzip()
    }

    /// Candidate values `ℓ(x,u_j) + V(f(x,u_j))` at an arbitrary state.
    pub fn candidates(&self, x: &[f64], values: &[f64]) -> Vec<f64> {
        let mut buf = Vec::new();
        self.controls
            .iter()
            .map(|u| {
                let c = self.system.cost(x, u);
                if c == f64::INFINITY {
                    return f64::INFINITY;
                }
                let y = self.system.step(x, u);
                if !self.grid.state.stencil_into(&y, self.interpolation, &mut buf) {
                    return f64::INFINITY;
                }
                let v = combine(values, &buf);
                if v == f64::INFINITY {
                    f64::INFINITY
                } else {
                    c + v
                }
            })
            .collect()
    }
}

/// Exact minimum of `q` and the smallest index within `slack` (plus the tie
/// tolerance) of it. `None` when every entry is infinite.
pub(crate) fn select(q: &[f64], slack: f64) -> Option<(usize, f64)> {
    let min = q.iter().copied().fold(f64::INFINITY, f64::min);
    if min == f64::INFINITY {
        return None;
    }
    let bound = min + slack + TIE_TOL * min.abs().max(1.0);
    let j = q.iter().position(|&v| v <= bound)?;
    Some((j, min))
}

/// `V_k` for `k = 0..=T` on the state nodes, with minimizing control indices.
#[derive(Clone, Debug)]
pub struct ValueTable {
    horizon: usize,
    state: Lattice,
    interpolation: Interpolation,
    values: Vec<Vec<f64>>,
    argmin: Vec<Vec<u32>>,
}

impl ValueTable {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn lattice(&self) -> &Lattice {
        &self.state
    }

    /// `V_k` on the state nodes.
    pub fn layer(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    /// Minimizing control index of `V_k` at node `i` (`k ≥ 1`).
    pub fn argmin(&self, k: usize, i: usize) -> Option<usize> {
        let j = self.argmin[k - 1][i];
        (j != u32::MAX).then_some(j as usize)
    }

    pub fn value_at(&self, k: usize, x: &[f64]) -> f64 {
        self.state.interpolate(&self.values[k], x, self.interpolation)
    }

    /// Largest gap between stored entries and a fresh Bellman evaluation.
    pub fn bellman_residual(&self, disc: &Discretization) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 1..=self.horizon {
            let (fresh, _) = disc.bellman(&self.values[k - 1]);
            for (a, b) in fresh.iter().zip(&self.values[k]) {
                let gap = if a == b { 0.0 } else { (a - b).abs() };
                worst = worst.max(if gap.is_nan() { f64::INFINITY } else { gap });
            }
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub state_points: Vec<usize>,
    pub control_points: Vec<usize>,
    pub interpolation: Interpolation,
    pub terminal_mode: TerminalMode,
    pub horizon: usize,
    /// `V_T(x0)` read from the value table.
    pub table_value: f64,
}

/// Optimal control sequence, its trajectory, and `J_T(x0,u*) + F(x*(T))`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OcpSolution {
    pub controls: Vec<Vec<f64>>,
    pub trajectory: Trajectory,
    pub value: f64,
    pub diagnostics: SolveDiagnostics,
}

impl OcpSolution {
    pub fn first_control(&self) -> &[f64] {
        &self.controls[0]
    }
}

/// Reusable solver over one `(system, grid)` discretization.
#[derive(Clone, Debug)]
pub struct DpSolver {
    disc: Arc<Discretization>,
    near_optimal_slack: f64,
}

impl DpSolver {
    pub fn new(system: &ControlSystem, grid: &Grid) -> Result<Self> {
        Self::with_interpolation(system, grid, Interpolation::Multilinear)
    }

    pub fn with_interpolation(system: &ControlSystem, grid: &Grid, mode: Interpolation) -> Result<Self> {
        Ok(Self {
            disc: Arc::new(Discretization::new(system, grid, mode)?),
            near_optimal_slack: 0.0,
        })
    }

    /// Accept any control within `delta` of the minimum during the forward
    /// pass (smallest index wins), producing `δ`-suboptimal trajectories.
    pub fn near_optimal(mut self, delta: f64) -> Self {
        self.near_optimal_slack = delta.max(0.0);
        self
    }

    pub fn discretization(&self) -> &Discretization {
        &self.disc
    }

    pub fn system(&self) -> &ControlSystem {
        &self.disc.system
    }

    pub fn grid(&self) -> &Grid {
        &self.disc.grid
    }

    pub fn value_table(&self, horizon: usize, terminal: &TerminalConditions) -> Result<ValueTable> {
        let disc = &*self.disc;
        let mut values = Vec::with_capacity(horizon + 1);
        let mut argmin = Vec::with_capacity(horizon);
        values.push(terminal.initial_layer(&disc.system, &disc.grid.state)?);
        for _ in 0..horizon {
            let (v, a) = disc.bellman(values.last().unwrap());
            values.push(v);
            argmin.push(a);
        }
        Ok(ValueTable {
            horizon,
            state: disc.grid.state.clone(),
            interpolation: disc.interpolation,
            values,
            argmin,
        })
    }

    pub fn solve(&self, x0: &[f64], horizon: usize, terminal: &TerminalConditions) -> Result<OcpSolution> {
        self.check_initial(x0, horizon)?;
        let table = self.value_table(horizon, terminal)?;
        self.solve_with_table(x0, horizon, &table, terminal)
    }

    fn check_initial(&self, x0: &[f64], horizon: usize) -> Result<()> {
        let system = &self.disc.system;
        if x0.len() != system.state_dim() {
            return Err(Error::Dimension("initial state".into()));
        }
        if !system.state_box().contains(x0) {
            return Err(Error::Domain(format!("initial state {x0:?}")));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Forward pass for any `horizon ≤ table.horizon()`; the table must
    /// come from this solver with the same terminal conditions.
    pub fn solve_with_table(
        &self,
        x0: &[f64],
        horizon: usize,
        table: &ValueTable,
        terminal: &TerminalConditions,
    ) -> Result<OcpSolution> {
        if horizon > table.horizon() {
            return Err(Error::InvalidArgument(format!(
                "horizon {horizon} exceeds table horizon {}",
                table.horizon()
            )));
        }
        self.check_initial(x0, horizon)?;
        let disc = &*self.disc;
        let lattice = &disc.grid.state;

        let table_value = table.value_at(horizon, x0);
        if table_value == f64::INFINITY {
            let layer = (1..=horizon)
                .find(|&k| table.value_at(k, x0) == f64::INFINITY)
                .unwrap_or(horizon);
            return Err(Error::Infeasible {
                layer,
                detail: format!("no admissible control sequence from {x0:?} over {layer} steps"),
            });
        }

        // In nearest mode decisions follow the snapped model.
        let snap = |x: &[f64]| -> Vec<f64> {
            match disc.interpolation {
                Interpolation::Nearest => lattice
                    .nearest_index(x)
                    .map(|i| lattice.point(i))
                    .unwrap_or_else(|| x.to_vec()),
                Interpolation::Multilinear => x.to_vec(),
            }
        };
        let mut controls = Vec::with_capacity(horizon);
        let mut x = snap(x0);
        for t in 0..horizon {
            let q = disc.candidates(&x, table.layer(horizon - t - 1));
            let Some((j, _)) = select(&q, self.near_optimal_slack) else {
                return Err(Error::Infeasible {
                    layer: t,
                    detail: format!("forward pass stalled at {x:?}"),
                });
            };
            let u = disc.controls[j].clone();
            x = snap(&disc.system.step(&x, &u));
            controls.push(u);
        }

        let trajectory = simulate(&disc.system, x0, &controls)?;
        let value = trajectory_cost(&disc.system, &trajectory)? + terminal.terminal_value(trajectory.terminal());
        Ok(OcpSolution {
            controls,
            trajectory,
            value,
            diagnostics: SolveDiagnostics {
                state_points: lattice.counts(),
                control_points: disc.grid.control.counts(),
                interpolation: disc.interpolation,
                terminal_mode: terminal.mode(),
                horizon,
                table_value,
            },
        })
    }
}

/// Solves `min J_T(x0, u) (+ F(x(T)))` subject to the box and terminal
/// constraints on the given grid, with multilinear interpolation.
pub fn solve(
    system: &ControlSystem,
    x0: &[f64],
    horizon: usize,
    grid: &Grid,
    terminal: &TerminalConditions,
) -> Result<OcpSolution> {
    DpSolver::new(system, grid)?.solve(x0, horizon, terminal)
}

pub fn value_table(
    system: &ControlSystem,
    horizon: usize,
    grid: &Grid,
    terminal: &TerminalConditions,
) -> Result<ValueTable> {
    DpSolver::new(system, grid)?.value_table(horizon, terminal)
}

/// Exhaustive minimum over all control-grid sequences of length `T`.
///
/// With [`Interpolation::Nearest`] every successor is snapped to its nearest
/// state node, which is the model `DpSolver` uses in that mode; otherwise
/// the exact dynamics are followed. Sequence costs are summed back to front.
pub fn brute_force_solve(
    system: &ControlSystem,
    x0: &[f64],
    horizon: usize,
    grid: &Grid,
    mode: Interpolation,
    terminal: &TerminalConditions,
) -> Result<OcpSolution> {
    grid.check_matches(system)?;
    let controls = grid.control.points();
    let sequences = (controls.len() as f64).powi(horizon as i32);
    if sequences > ENUMERATION_LIMIT {
        return Err(Error::EnumerationLimit {
            sequences,
            limit: ENUMERATION_LIMIT,
        });
    }
    if !system.state_box().contains(x0) {
        return Err(Error::Domain(format!("initial state {x0:?}")));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let lattice = &grid.state;
    let snap = |y: &[f64]| match mode {
        Interpolation::Nearest => lattice.nearest_index(y).map(|i| lattice.point(i)),
        Interpolation::Multilinear => Some(y.to_vec()),
    };
    let terminal_nodes = terminal.initial_layer(system, lattice)?;
    let terminal_value = |x: &[f64]| match mode {
        Interpolation::Nearest => lattice.interpolate(&terminal_nodes, x, mode),
        Interpolation::Multilinear => terminal.terminal_value(x),
    };

    fn best(
        system: &ControlSystem,
        controls: &[Vec<f64>],
        x: &[f64],
        k: usize,
        snap: &dyn Fn(&[f64]) -> Option<Vec<f64>>,
        terminal_value: &dyn Fn(&[f64]) -> f64,
    ) -> (f64, Vec<usize>) {
        if k == 0 {
            return (terminal_value(x), Vec::new());
        }
        let mut q = Vec::with_capacity(controls.len());
        let mut tails = Vec::with_capacity(controls.len());
        for u in controls {
            let c = system.cost(x, u);
            let y = system.step(x, u);
            let next = if c < f64::INFINITY && system.state_box().contains(&y) {
                snap(&y)
            } else {
                None
            };
            match next {
                Some(next) => {
                    let (rest, tail) = best(system, controls, &next, k - 1, snap, terminal_value);
                    q.push(if rest == f64::INFINITY { f64::INFINITY } else { c + rest });
                    tails.push(tail);
                }
                None => {
                    q.push(f64::INFINITY);
                    tails.push(Vec::new());
                }
            }
        }
        match select(&q, 0.0) {
            Some((j, v)) => {
                let mut seq = vec![j];
                seq.extend(std::mem::take(&mut tails[j]));
                (v, seq)
            }
            None => (f64::INFINITY, Vec::new()),
        }
    }

    let start = snap(x0).ok_or_else(|| Error::Domain(format!("initial state {x0:?}")))?;
    let (grid_value, seq) = best(system, &controls, &start, horizon, &snap, &terminal_value);
    if grid_value == f64::INFINITY {
        return Err(Error::Infeasible {
            layer: horizon,
            detail: "no enumerated sequence is admissible".into(),
        });
    }
    let chosen: Vec<Vec<f64>> = seq.iter().map(|&j| controls[j].clone()).collect();
    let trajectory = simulate(system, x0, &chosen)?;
    let value = trajectory_cost(system, &trajectory)? + terminal.terminal_value(trajectory.terminal());
    Ok(OcpSolution {
        controls: chosen,
        trajectory,
        value,
        diagnostics: SolveDiagnostics {
            state_points: lattice.counts(),
            control_points: grid.control.counts(),
            interpolation: mode,
            terminal_mode: terminal.mode(),
            horizon,
            table_value: grid_value,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::preset;

    fn inv_grid(state_points: usize, control_points: usize) -> (ControlSystem, Grid) {
        let sys = preset("invariance").unwrap();
        let grid = Grid::uniform(&sys, state_points, control_points).unwrap();
        (sys, grid)
    }

    #[test]
    fn zero_horizon_table_is_zero() {
        let (sys, grid) = inv_grid(41, 61);
        let table = value_table(&sys, 0, &grid, &TerminalConditions::none()).unwrap();
        assert!(table.layer(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_step_from_origin_is_free() {
        let (sys, grid) = inv_grid(41, 61);
        let table = value_table(&sys, 1, &grid, &TerminalConditions::none()).unwrap();
        assert_eq!(table.value_at(1, &[0.0]), 0.0);
    }

    #[test]
    fn one_step_to_origin_from_two_is_infeasible() {
        let (sys, grid) = inv_grid(41, 61);
        let term = TerminalConditions::equilibrium(vec![0.0]);
        let table = value_table(&sys, 1, &grid, &term).unwrap();
        assert_eq!(table.value_at(1, &[2.0]), f64::INFINITY);
        // widening 𝕌 to [−4, 4] admits u = −4 at cost 16
        let wide = ControlSystem::new(
            "wide",
            sys.state_box().clone(),
            BoxSet::interval(-4.0, 4.0).unwrap(),
            sys.dynamics_fn().clone(),
            sys.stage_cost_fn().clone(),
        );
        let grid = Grid::uniform(&wide, 41, 81).unwrap();
        let table = value_table(&wide, 1, &grid, &term).unwrap();
        assert_eq!(table.value_at(1, &[2.0]), 16.0);
    }

    #[test]
    fn terminal_constrained_example() {
        let (sys, grid) = inv_grid(2001, 601);
        let sol = solve(&sys, &[2.0], 3, &grid, &TerminalConditions::equilibrium(vec![0.0])).unwrap();
        let u: Vec<f64> = sol.controls.iter().map(|u| u[0]).collect();
        assert!((u[0] + 3.0).abs() < 1e-12);
        assert!((u[1] + 1.6).abs() < 1e-9);
        assert!((u[2] + 0.8).abs() < 1e-9);
        assert!((sol.value - 12.2).abs() < 1e-9);
        assert!(sol.trajectory.terminal()[0].abs() < 1e-9);
    }

    #[test]
    fn origin_stays_put() {
        let (sys, grid) = inv_grid(201, 61);
        for t in [1, 4, 9] {
            let sol = solve(&sys, &[0.0], t, &grid, &TerminalConditions::none()).unwrap();
            assert!(sol.controls.iter().all(|u| u[0] == 0.0));
            assert_eq!(sol.value, 0.0);
        }
    }

    #[test]
    fn solution_is_its_own_simulation() {
        let sys = preset("brock-mirman").unwrap();
        let grid = Grid::uniform(&sys, 401, 121).unwrap();
        let sol = solve(&sys, &[2.0], 6, &grid, &TerminalConditions::none()).unwrap();
        let again = simulate(&sys, &[2.0], &sol.controls).unwrap();
        assert_eq!(again, sol.trajectory);
        let cost = trajectory_cost(&sys, &sol.trajectory).unwrap();
        assert_eq!(cost, sol.value);
        // spending everything in the last step
        assert_eq!(sol.controls.last().unwrap()[0], 0.01);
    }

    #[test]
    fn domain_and_horizon_errors() {
        let (sys, grid) = inv_grid(41, 61);
        assert!(matches!(
            solve(&sys, &[2.5], 3, &grid, &TerminalConditions::none()),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            solve(&sys, &[0.0], 0, &grid, &TerminalConditions::none()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            solve(&sys, &[2.0], 1, &grid, &TerminalConditions::equilibrium(vec![0.0])),
            Err(Error::Infeasible { layer: 1, .. })
        ));
    }

    #[test]
    fn bellman_residual_vanishes() {
        let (sys, grid) = inv_grid(81, 31);
        let solver = DpSolver::new(&sys, &grid).unwrap();
        let table = solver.value_table(5, &TerminalConditions::none()).unwrap();
        assert!(table.bellman_residual(solver.discretization()) <= 1e-9);
    }

    #[test]
    fn brute_force_guard() {
        let (sys, grid) = inv_grid(41, 101);
        let err = brute_force_solve(&sys, &[0.0], 4, &grid, Interpolation::Nearest, &TerminalConditions::none())
            .unwrap_err();
        assert!(matches!(err, Error::EnumerationLimit { .. }));
    }

    #[test]
    fn brute_force_matches_nearest_mode_dp() {
        let (sys, grid) = inv_grid(9, 7);
        let solver = DpSolver::with_interpolation(&sys, &grid, Interpolation::Nearest).unwrap();
        let sol = solver.solve(&[1.0], 2, &TerminalConditions::none()).unwrap();
        let bf = brute_force_solve(&sys, &[1.0], 2, &grid, Interpolation::Nearest, &TerminalConditions::none())
            .unwrap();
        assert_eq!(sol.diagnostics.table_value, bf.diagnostics.table_value);
        assert_eq!(sol.controls, bf.controls);
    }

    #[test]
    fn brute_force_single_step_is_argmin() {
        let (sys, grid) = inv_grid(9, 7);
        let bf = brute_force_solve(&sys, &[0.5], 1, &grid, Interpolation::Multilinear, &TerminalConditions::none())
            .unwrap();
        assert_eq!(bf.controls, vec![vec![0.0]]);
    }
}
