//! Consequences of strict dissipativity checked on computed solutions.

use serde::Serialize;

use super::{DissipativityReport, StorageCandidate};
use crate::dp::{DpSolver, OcpSolution, TerminalConditions};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::system::{euclidean_distance, trajectory_cost, ComparisonFunction, ControlSystem, Equilibrium};

/// Slack below which the lower-bound chain is reported as broken.
pub const CERTIFICATE_TOL: f64 = 1e-6;

/// Both sides of
/// `J_T(x0,u*) ≥ Σ_{t<T} α(‖x*(t) − x^e‖) + T·ℓ^e − λ(x0) − D`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowerBoundCertificate {
    pub x0: Vec<f64>,
    pub horizon: usize,
    pub lhs: f64,
    pub alpha_sum: f64,
    pub rhs: f64,
    pub slack: f64,
}

pub fn turnpike_lower_bound_certificate(
    system: &ControlSystem,
    storage: &StorageCandidate,
    alpha: &ComparisonFunction,
    eq: &Equilibrium,
    report: &DissipativityReport,
    solution: &OcpSolution,
) -> Result<LowerBoundCertificate> {
    if !report.certified() {
        return Err(Error::Precondition(
            "the storage candidate is not certified strictly dissipative".into(),
        ));
    }
    let traj = &solution.trajectory;
    let horizon = traj.horizon();
    let lhs = trajectory_cost(system, traj)?;
    let alpha_sum: f64 = traj.states()[..horizon]
        .iter()
        .map(|x| alpha.eval(euclidean_distance(x, &eq.state)))
        .sum();
    let x0 = traj.initial().to_vec();
    let rhs = alpha_sum + horizon as f64 * eq.cost - storage.eval(&x0) - storage.lower_bound;
    let slack = lhs - rhs;
    if slack.is_nan() || slack < -CERTIFICATE_TOL {
        return Err(Error::InconsistencyAlarm { slack });
    }
    Ok(LowerBoundCertificate { x0, horizon, lhs, alpha_sum, rhs, slack })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SteadyStateRow {
    pub horizon: usize,
    pub value: f64,
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SteadyStateReport {
    pub eq_cost: f64,
    pub rows: Vec<SteadyStateRow>,
    /// `max (T·ℓ^e − V_T)⁺` over the shorter half of the horizons.
    pub transient: f64,
    /// `V_T/T ≥ ℓ^e − transient/T` on every row.
    pub trend_ok: bool,
}

/// `V_T(x0)/T` per horizon, compared against `ℓ^e`.
pub fn steady_state_optimality_check(
    system: &ControlSystem,
    eq: &Equilibrium,
    x0: &[f64],
    horizons: &[usize],
    grid: &Grid,
) -> Result<SteadyStateReport> {
    if horizons.is_empty() {
        return Err(Error::InvalidArgument("horizons must be nonempty".into()));
    }
    let mut sorted = horizons.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let solver = DpSolver::new(system, grid)?;
    let terminal = TerminalConditions::none();
    let table = solver.value_table(*sorted.last().unwrap(), &terminal)?;
    let rows = sorted
        .iter()
        .map(|&t| {
            let sol = solver.solve_with_table(x0, t, &table, &terminal)?;
            Ok(SteadyStateRow { horizon: t, value: sol.value, average: sol.value / t as f64 })
        })
        .collect::<Result<Vec<_>>>()?;
    let early = rows.len().div_ceil(2);
    let transient = rows[..early]
        .iter()
        .map(|r| (r.horizon as f64 * eq.cost - r.value).max(0.0))
        .fold(0.0, f64::max);
    let trend_ok = rows.iter().all(|r| {
        let tol = 1e-9 * (1.0 + r.value.abs());
        r.average >= eq.cost - (transient + tol) / r.horizon as f64
    });
    Ok(SteadyStateReport { eq_cost: eq.cost, rows, transient, trend_ok })
}
