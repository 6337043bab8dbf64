//! Turnpike measurements on optimal trajectories: the exceptional set
//! `𝒬 = {t : ‖x(t) − x^e‖ > ε}`, horizon sweeps, exponential envelopes
//! `C(e^{−σt} + e^{−σ(T−t)})`, and value/storage bounds.

use rayon::prelude::*;
use serde::Serialize;

use crate::dissipativity::StorageCandidate;
use crate::dp::{DpSolver, TerminalConditions};
use crate::error::{Error, Result};
use crate::export::{fmt_num, Csv};
use crate::grid::Grid;
use crate::system::{euclidean_distance, ComparisonFunction, ControlSystem, Equilibrium, Trajectory};

pub const SIGMA_POINTS: usize = 200;
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 10.0;

/// `0.1 · diam(𝕏)`.
pub fn default_epsilon(system: &ControlSystem) -> f64 {
    0.1 * system.state_box().diameter()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TurnpikeReport {
    pub epsilon: f64,
    pub q_set: Vec<usize>,
    pub q_count: usize,
    pub horizon: usize,
    pub initial_distance: f64,
    pub max_dist: f64,
    /// Length of the longest prefix `0, 1, …` inside `𝒬`.
    pub approach_arc_len: usize,
    /// Length of the longest suffix `…, T−1, T` inside `𝒬`.
    pub leaving_arc_len: usize,
}

pub fn q_measure(traj: &Trajectory, x_e: &[f64], epsilon: f64) -> Result<TurnpikeReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let dist: Vec<f64> = traj.states().iter().map(|x| euclidean_distance(x, x_e)).collect();
    let outside: Vec<bool> = dist.iter().map(|d| !(*d <= epsilon)).collect();
    let q_set: Vec<usize> = (0..outside.len()).filter(|&t| outside[t]).collect();
    Ok(TurnpikeReport {
        epsilon,
        q_count: q_set.len(),
        q_set,
        horizon: traj.horizon(),
        initial_distance: dist[0],
        max_dist: dist.iter().copied().fold(0.0, f64::max),
        approach_arc_len: outside.iter().take_while(|o| **o).count(),
        leaving_arc_len: outside.iter().rev().take_while(|o| **o).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub x0: Vec<f64>,
    pub horizon: usize,
    pub value: f64,
    pub report: TurnpikeReport,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TurnpikeSweep {
    /// Ordered by initial state, then horizon.
    pub rows: Vec<SweepRow>,
    pub max_q: usize,
    /// Per initial state, `|𝒬|` never exceeds its value at the smallest horizon.
    pub attained_at_smallest: bool,
    /// Per initial state, `|𝒬|` is the same at every horizon.
    pub constant_in_horizon: bool,
}

impl TurnpikeSweep {
    pub fn rows_for(&self, x0: &[f64]) -> impl Iterator<Item = &SweepRow> {
        let x0 = x0.to_vec();
        self.rows.iter().filter(move |r| r.x0 == x0)
    }

    /// `x0,T,epsilon,q_count,max_dist,leaving_arc_len,approach_arc_len`
    pub fn to_csv(&self) -> String {
        let mut csv = Csv::new(&["x0", "T", "epsilon", "q_count", "max_dist", "leaving_arc_len", "approach_arc_len"]);
        for r in &self.rows {
            let x0: Vec<String> = r.x0.iter().map(|v| fmt_num(*v)).collect();
            csv.raw_row([
                x0.join(" "),
                r.horizon.to_string(),
                fmt_num(r.report.epsilon),
                r.report.q_count.to_string(),
                fmt_num(r.report.max_dist),
                r.report.leaving_arc_len.to_string(),
                r.report.approach_arc_len.to_string(),
            ]);
        }
        csv.into_string()
    }
}

fn run_label(x0: &[f64], horizon: usize) -> String {
    format!("x0={x0:?} T={horizon}")
}

/// Solves every `(x0, T)` from one value table at the largest horizon and
/// measures `𝒬` on each optimal trajectory.
pub fn turnpike_constant(
    system: &ControlSystem,
    x_e: &[f64],
    epsilon: f64,
    horizons: &[usize],
    initials: &[Vec<f64>],
    grid: &Grid,
    terminal: &TerminalConditions,
) -> Result<TurnpikeSweep> {
    if horizons.is_empty() || initials.is_empty() {
        return Err(Error::InvalidArgument("horizons and initials must be nonempty".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let solver = DpSolver::new(system, grid)?;
    let t_max = *horizons.iter().max().unwrap();
    let table = solver.value_table(t_max, terminal)?;
    let mut sorted = horizons.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let jobs: Vec<(Vec<f64>, usize)> = initials
        .iter()
        .flat_map(|x0| sorted.iter().map(move |&t| (x0.clone(), t)))
        .collect();
    let rows = jobs
        .into_par_iter()
        .map(|(x0, t)| {
            let tag = |e: Error| Error::Run { run: run_label(&x0, t), source: Box::new(e) };
            let sol = solver.solve_with_table(&x0, t, &table, terminal).map_err(tag)?;
            let report = q_measure(&sol.trajectory, x_e, epsilon)?;
            Ok(SweepRow { x0, horizon: t, value: sol.value, report, trajectory: sol.trajectory })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut attained = true;
    let mut constant = true;
    for x0 in initials {
        let counts: Vec<usize> = rows.iter().filter(|r| &r.x0 == x0).map(|r| r.report.q_count).collect();
        attained &= counts.iter().all(|c| *c <= counts[0]);
        constant &= counts.iter().all(|c| *c == counts[0]);
    }
    Ok(TurnpikeSweep {
        max_q: rows.iter().map(|r| r.report.q_count).max().unwrap_or(0),
        rows,
        attained_at_smallest: attained,
        constant_in_horizon: constant,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeFit {
    pub c: f64,
    pub sigma: f64,
    pub satisfied: bool,
    /// Time of the largest `‖x(t) − x^e‖ − envelope(t)`.
    pub worst_t: usize,
    pub worst_excess: f64,
}

fn envelope(c: f64, sigma: f64, t: usize, horizon: usize) -> f64 {
    c * ((-sigma * t as f64).exp() + (-sigma * (horizon - t) as f64).exp())
}

/// Pointwise `‖x(t) − x^e‖ ≤ C(e^{−σt} + e^{−σ(T−t)})`, no tolerance.
pub fn envelope_check(traj: &Trajectory, x_e: &[f64], c: f64, sigma: f64) -> Result<EnvelopeFit> {
    if !(c > 0.0 && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("need C > 0 and sigma > 0, got C={c}, sigma={sigma}")));
    }
    let horizon = traj.horizon();
    let mut worst_t = 0;
    let mut worst = f64::NEG_INFINITY;
    for (t, x) in traj.states().iter().enumerate() {
        let excess = euclidean_distance(x, x_e) - envelope(c, sigma, t, horizon);
        if excess > worst || excess.is_nan() {
            worst = excess;
            worst_t = t;
        }
    }
    Ok(EnvelopeFit { c, sigma, satisfied: worst <= 0.0, worst_t, worst_excess: worst })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeParameters {
    pub c: f64,
    pub sigma: f64,
    /// `Σ_runs Σ_t C(e^{−σt} + e^{−σ(T−t)})` at the chosen pair.
    pub area: f64,
}

/// Log-spaced grid of `SIGMA_POINTS` rates in `[SIGMA_MIN, SIGMA_MAX]`.
pub fn sigma_grid() -> Vec<f64> {
    let (a, b) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    (0..SIGMA_POINTS)
        .map(|i| (a + (b - a) * i as f64 / (SIGMA_POINTS - 1) as f64).exp())
        .collect()
}

/// For each `σ` on the grid the smallest `C` covering every trajectory; the
/// pair with the tightest total envelope is returned.
pub fn envelope_fit(trajs: &[Trajectory], x_e: &[f64]) -> Result<EnvelopeParameters> {
    if trajs.len() < 2 {
        return Err(Error::InvalidArgument("envelope fit needs at least 2 trajectories".into()));
    }
    let dists: Vec<Vec<f64>> = trajs
        .iter()
        .map(|tr| tr.states().iter().map(|x| euclidean_distance(x, x_e)).collect())
        .collect();
    for d in &dists {
        if let Some(step) = d.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { step });
        }
    }
    let mut best: Option<EnvelopeParameters> = None;
    for sigma in sigma_grid() {
        let mut c: f64 = 0.0;
        for d in &dists {
            let horizon = d.len() - 1;
            for (t, v) in d.iter().enumerate() {
                c = c.max(v / envelope(1.0, sigma, t, horizon));
            }
        }
        if c == 0.0 {
            c = f64::MIN_POSITIVE;
        }
        // Division rounding can leave the bound a hair short.
        while dists.iter().any(|d| {
            let horizon = d.len() - 1;
            d.iter().enumerate().any(|(t, v)| *v > envelope(c, sigma, t, horizon))
        }) {
            c = c.next_up();
        }
        let area: f64 = dists
            .iter()
            .map(|d| (0..d.len()).map(|t| envelope(c, sigma, t, d.len() - 1)).sum::<f64>())
            .sum();
        if best.as_ref().is_none_or(|b| area < b.area) {
            best = Some(EnvelopeParameters { c, sigma, area });
        }
    }
    Ok(best.expect("nonempty sigma grid"))
}

/// `2⌈ln(2C/ε)/σ⌉ + 2`, the size of `𝒬` an envelope allows.
pub fn envelope_q_bound(c: f64, sigma: f64, epsilon: f64) -> usize {
    let steps = ((2.0 * c / epsilon).ln() / sigma).ceil().max(0.0);
    2 * steps as usize + 2
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueBoundRow {
    pub x0: Vec<f64>,
    pub horizon: usize,
    pub distance: f64,
    /// `|V_T(x0) − V_T(x^e)|`
    pub value_gap: f64,
    /// `|λ(x0)|`
    pub storage_abs: f64,
    pub covered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueBoundCertificate {
    pub gamma: ComparisonFunction,
    pub c_bound: f64,
    pub rows: Vec<ValueBoundRow>,
    pub all_covered: bool,
}

/// Smallest `c + C` with `c·r^q + C ≥ y` on every point, `c, C ≥ 0`.
fn fit_power_plus_constant(points: &[(f64, f64)], q: f64) -> (f64, f64) {
    let feasible = |c: f64, k: f64| {
        c >= 0.0 && k >= 0.0 && points.iter().all(|(r, y)| c * r.powf(q) + k >= y - 1e-12 * y.abs().max(1.0))
    };
    let ymax = points.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut cands = vec![(0.0, ymax)];
    let slope = points
        .iter()
        .filter(|(r, _)| *r > 0.0)
        .map(|(r, y)| y / r.powf(q))
        .fold(0.0, f64::max);
    let zero_dist = points.iter().filter(|(r, _)| *r == 0.0).map(|p| p.1).fold(0.0, f64::max);
    cands.push((slope, zero_dist));
    for (i, &(ri, yi)) in points.iter().enumerate() {
        for &(rj, yj) in &points[i + 1..] {
            let (a, b) = (ri.powf(q), rj.powf(q));
            if (a - b).abs() > 1e-15 {
                let c = (yi - yj) / (a - b);
                cands.push((c, yi - c * a));
            }
        }
    }
    cands
        .into_iter()
        .filter(|&(c, k)| feasible(c, k))
        .min_by(|a, b| (a.0 + a.1).total_cmp(&(b.0 + b.1)))
        .unwrap_or((slope, ymax))
}

/// Report-only data for `|V_T(x) − V_T(x^e)| ≤ γ(‖x − x^e‖) + C` and
/// `|λ(x)| ≤ γ(‖x − x^e‖) + C` with `γ(r) = c·r^q`.
pub fn value_bound_certificate(
    system: &ControlSystem,
    eq: &Equilibrium,
    storage: &StorageCandidate,
    horizons: &[usize],
    initials: &[Vec<f64>],
    grid: &Grid,
    exponent: f64,
) -> Result<ValueBoundCertificate> {
    storage.verify_lower_bound(&grid.state)?;
    if horizons.is_empty() || initials.is_empty() {
        return Err(Error::InvalidArgument("horizons and initials must be nonempty".into()));
    }
    let solver = DpSolver::new(system, grid)?;
    let terminal = TerminalConditions::none();
    let t_max = *horizons.iter().max().unwrap();
    let table = solver.value_table(t_max, &terminal)?;
    let mut rows = Vec::new();
    for &t in horizons {
        let at_eq = solver.solve_with_table(&eq.state, t, &table, &terminal)?.value;
        for x0 in initials {
            let v = solver
                .solve_with_table(x0, t, &table, &terminal)
                .map_err(|e| Error::Run { run: run_label(x0, t), source: Box::new(e) })?
                .value;
            rows.push(ValueBoundRow {
                x0: x0.clone(),
                horizon: t,
                distance: euclidean_distance(x0, &eq.state),
                value_gap: (v - at_eq).abs(),
                storage_abs: storage.eval(x0).abs(),
                covered: false,
            });
        }
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .flat_map(|r| [(r.distance, r.value_gap), (r.distance, r.storage_abs)])
        .collect();
    let (c, c_bound) = fit_power_plus_constant(&points, exponent);
    let gamma = ComparisonFunction::power(c.max(f64::MIN_POSITIVE), exponent)?;
    for r in &mut rows {
        let bound = gamma.eval(r.distance) + c_bound;
        let tol = 1e-9 * bound.abs().max(1.0);
        r.covered = r.value_gap <= bound + tol && r.storage_abs <= bound + tol;
    }
    let all_covered = rows.iter().all(|r| r.covered);
    Ok(ValueBoundCertificate { gamma, c_bound, rows, all_covered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::preset;

    fn traj(states: &[f64]) -> Trajectory {
        let s: Vec<Vec<f64>> = states.iter().map(|v| vec![*v]).collect();
        let u = vec![vec![0.0]; states.len() - 1];
        Trajectory::new(s, u).unwrap()
    }

    #[test]
    fn q_measure_basics() {
        let tr = traj(&[2.0, 0.5, 0.05, 0.0, 0.3]);
        let r = q_measure(&tr, &[0.0], 0.1).unwrap();
        assert_eq!(r.q_set, vec![0, 1, 4]);
        assert_eq!((r.approach_arc_len, r.leaving_arc_len), (2, 1));
        assert_eq!(q_measure(&tr, &[0.0], 5.0).unwrap().q_count, 0);
        assert_eq!(q_measure(&traj(&[0.0; 6]), &[0.0], 1e-9).unwrap().q_count, 0);
        assert!(q_measure(&tr, &[0.0], 0.0).is_err());
    }

    #[test]
    fn envelope_example() {
        let mut states = vec![2.0];
        states.extend(std::iter::repeat_n(0.0, 10));
        let fit = envelope_check(&traj(&states), &[0.0], 1.0, 1.0).unwrap();
        assert!(!fit.satisfied);
        assert_eq!(fit.worst_t, 0);
        assert!((2.0 - fit.worst_excess - (1.0 + (-10f64).exp())).abs() < 1e-15);
        assert!(envelope_check(&traj(&[0.0; 4]), &[0.0], 1e-3, 5.0).unwrap().satisfied);
    }

    #[test]
    fn fitted_envelope_covers_inputs() {
        let a = traj(&[2.0, 1.0, 0.5, 0.25, 0.25, 0.5]);
        let b = traj(&[1.0, 0.3, 0.1, 0.3]);
        let p = envelope_fit(&[a.clone(), b.clone()], &[0.0]).unwrap();
        assert!(envelope_check(&a, &[0.0], p.c, p.sigma).unwrap().satisfied);
        assert!(envelope_check(&b, &[0.0], p.c, p.sigma).unwrap().satisfied);
        assert!(envelope_fit(&[a], &[0.0]).is_err());
    }

    #[test]
    fn single_run_sweep_matches_q_measure() {
        let sys = preset("invariance").unwrap();
        let grid = Grid::uniform(&sys, 201, 201).unwrap();
        let sweep = turnpike_constant(&sys, &[0.0], 0.1, &[7], &[vec![2.0]], &grid, &TerminalConditions::none()).unwrap();
        assert_eq!(sweep.rows.len(), 1);
        let sol = crate::dp::solve(&sys, &[2.0], 7, &grid, &TerminalConditions::none()).unwrap();
        assert_eq!(sweep.rows[0].report, q_measure(&sol.trajectory, &[0.0], 0.1).unwrap());
        assert!(sweep.to_csv().starts_with("x0,T,epsilon,q_count,max_dist,leaving_arc_len,approach_arc_len\n"));
    }

    #[test]
    fn storage_branch_of_value_bound() {
        let sys = preset("invariance").unwrap();
        let eq = Equilibrium::new(&sys, vec![0.0], vec![0.0]);
        let grid = Grid::uniform(&sys, 101, 101).unwrap();
        let storage = StorageCandidate::quadratic(vec![vec![-1.0]], vec![0.0], 2.0);
        let cert = value_bound_certificate(&sys, &eq, &storage, &[3, 5], &[vec![0.0], vec![1.0]], &grid, 2.0).unwrap();
        assert!(cert.all_covered);
        assert!(cert.rows.iter().filter(|r| r.x0 == [0.0]).all(|r| r.value_gap == 0.0));
    }

    #[test]
    fn power_fit_is_exact_for_a_parabola() {
        let pts: Vec<(f64, f64)> = [0.0, 0.5, 1.0, 2.0].iter().map(|r| (*r, r * r / 2.0)).collect();
        let (c, k) = fit_power_plus_constant(&pts, 2.0);
        assert!((c - 0.5).abs() < 1e-12 && k.abs() < 1e-12);
    }
}
