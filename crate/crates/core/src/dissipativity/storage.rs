//! Available storage and required supply on a state grid.
//!
//! Both run on the auxiliary stage cost `c(x,u) = s(x,u) − α(‖x − x^e‖)`.
//! The available storage is `V = −W` with `W_0 = 0` and
//! `W_{k+1} = min(0, min_u c + W_k∘f)`, i.e. the best extractable surplus
//! over horizons up to `k+1`. The required supply pushes costs forward from
//! `x^e` along snapped successors and keeps the minimum over horizons.

use std::sync::Arc;

use serde::Serialize;

use super::{StorageCandidate, SupplyRate};
use crate::dp::Discretization;
use crate::error::{Error, Result};
use crate::export::{coord_names, Csv};
use crate::grid::{Grid, Interpolation, Lattice};
use crate::system::{ComparisonFunction, ControlSystem};

/// Largest table change still counted as converged.
pub const STORAGE_CONVERGENCE_TOL: f64 = 1e-8;
/// Magnitude beyond which a storage table is declared unbounded.
pub const STORAGE_DIVERGENCE_BOUND: f64 = 1e12;
pub const DEFAULT_STORAGE_HORIZON: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageStatus {
    Converged,
    NotConverged,
    Diverged,
}

#[derive(Clone, Debug, Serialize)]
pub struct StorageTable {
    #[serde(skip)]
    pub lattice: Lattice,
    /// One value per node; `+∞` marks unreached nodes (required supply).
    #[serde(skip)]
    pub values: Vec<f64>,
    pub status: StorageStatus,
    pub iterations: usize,
    pub last_change: f64,
    /// Smallest finite value.
    pub min: f64,
    /// Largest finite value.
    pub max: f64,
    pub reached: usize,
}

impl StorageTable {
    fn new(lattice: Lattice, values: Vec<f64>, status: StorageStatus, iterations: usize, last_change: f64) -> Self {
        let finite = values.iter().copied().filter(|v| v.is_finite());
        let (min, max, reached) = finite.fold((f64::INFINITY, f64::NEG_INFINITY, 0), |(lo, hi, n), v| {
            (lo.min(v), hi.max(v), n + 1)
        });
        Self { lattice, values, status, iterations, last_change, min, max, reached }
    }

    pub fn converged(&self) -> bool {
        self.status == StorageStatus::Converged
    }

    /// Bounded below by `−10¹²` on reached nodes.
    pub fn bounded(&self) -> bool {
        self.status != StorageStatus::Diverged && self.min > -STORAGE_DIVERGENCE_BOUND
    }

    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.lattice.interpolate(&self.values, x, Interpolation::Multilinear)
    }

    /// Tabulated storage with the smallest lower bound the table supports.
    pub fn candidate(&self) -> StorageCandidate {
        StorageCandidate::tabulated(self.lattice.clone(), self.values.clone(), (-self.min).max(0.0))
    }

    /// `x,lambda` (`x_0,…,lambda` in several dimensions).
    pub fn to_csv(&self) -> String {
        let mut header = coord_names("x", self.lattice.dim());
        header.push("lambda".into());
        let mut csv = Csv::new(&header);
        for (i, v) in self.values.iter().enumerate() {
            let mut row = self.lattice.point(i);
            row.push(*v);
            csv.num_row(row);
        }
        csv.into_string()
    }
}

fn auxiliary_system(system: &ControlSystem, supply: &SupplyRate, alpha: Option<&ComparisonFunction>) -> ControlSystem {
    let base = system.stage_cost_fn().clone();
    let supply = supply.clone();
    let alpha = alpha.cloned();
    system.with_stage_cost(
        format!("{}-supply", system.name()),
        Arc::new(move |x, u| {
            let c = base(x, u);
            if c.is_nan() || c == f64::INFINITY {
                return f64::INFINITY;
            }
            let margin = alpha
                .as_ref()
                .map_or(0.0, |a| a.eval(supply.distance(x, u, super::AlphaArgument::State)));
            c - supply.shift - margin
        }),
    )
}

fn max_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| if p == q { 0.0 } else { (p - q).abs() })
        .fold(0.0, f64::max)
}

/// `V(x) = sup_{T ≤ T_max, u} Σ (−s + α)` by value iteration.
pub fn available_storage(
    system: &ControlSystem,
    supply: &SupplyRate,
    alpha: Option<&ComparisonFunction>,
    grid: &Grid,
    t_max: usize,
) -> Result<StorageTable> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("storage horizon must be at least 1".into()));
    }
    let aux = auxiliary_system(system, supply, alpha);
    let disc = Discretization::new(&aux, grid, Interpolation::Multilinear)?;
    let mut w = vec![0.0; grid.state.len()];
    let mut status = StorageStatus::NotConverged;
    let mut change = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..t_max {
        let (fresh, _) = disc.bellman(&w);
        let next: Vec<f64> = fresh.into_iter().map(|v| v.min(0.0)).collect();
        change = max_change(&next, &w);
        w = next;
        iterations += 1;
        if w.iter().any(|v| *v < -STORAGE_DIVERGENCE_BOUND) {
            status = StorageStatus::Diverged;
            break;
        }
        if change < STORAGE_CONVERGENCE_TOL {
            status = StorageStatus::Converged;
            break;
        }
    }
    let values = w.into_iter().map(|v| if v == 0.0 { 0.0 } else { -v }).collect();
    Ok(StorageTable::new(grid.state.clone(), values, status, iterations, change))
}

/// `V(x) = inf Σ (s − α)` over snapped trajectories from `x^e` reaching
/// `x` within `T_max` steps; `+∞` where `x` is not reached.
pub fn required_supply(
    system: &ControlSystem,
    supply: &SupplyRate,
    alpha: Option<&ComparisonFunction>,
    grid: &Grid,
    t_max: usize,
) -> Result<StorageTable> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("storage horizon must be at least 1".into()));
    }
    let Some(start) = grid.state.node_index(&supply.eq_state) else {
        return Err(Error::Domain(format!(
            "equilibrium {:?} is not a node of the state grid",
            supply.eq_state
        )));
    };
    let aux = auxiliary_system(system, supply, alpha);
    let disc = Discretization::new(&aux, grid, Interpolation::Nearest)?;
    let ns = grid.state.len();
    let nc = disc.controls().len();
    let edges: Vec<Vec<(f64, u32)>> = (0..ns)
        .map(|i| {
            (0..nc)
                .filter_map(|j| disc.successor(i * nc + j).map(|(c, y)| (c, y as u32)))
                .collect()
        })
        .collect();

    let mut layer = vec![f64::INFINITY; ns];
    layer[start] = 0.0;
    let mut best = layer.clone();
    let mut status = StorageStatus::NotConverged;
    let mut change = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..t_max {
        let mut next = vec![f64::INFINITY; ns];
        for (i, &v) in layer.iter().enumerate() {
            if v == f64::INFINITY {
                continue;
            }
            for &(c, y) in &edges[i] {
                let cand = v + c;
                if cand < next[y as usize] {
                    next[y as usize] = cand;
                }
            }
        }
        let updated: Vec<f64> = best.iter().zip(&next).map(|(a, b)| a.min(*b)).collect();
        change = max_change(&updated, &best);
        best = updated;
        layer = next;
        iterations += 1;
        if best.iter().any(|v| *v < -STORAGE_DIVERGENCE_BOUND) {
            status = StorageStatus::Diverged;
            break;
        }
        if change < STORAGE_CONVERGENCE_TOL {
            status = StorageStatus::Converged;
            break;
        }
    }
    Ok(StorageTable::new(grid.state.clone(), best, status, iterations, change))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissipativity::{check_strict_dissipativity_with, CheckOptions};
    use crate::system::{preset, BoxSet, Equilibrium};

    fn setup(points: usize) -> (ControlSystem, Equilibrium, SupplyRate, Grid) {
        let sys = preset("invariance").unwrap();
        let eq = Equilibrium::new(&sys, vec![0.0], vec![0.0]);
        let supply = SupplyRate::from_equilibrium(&eq);
        let grid = Grid::uniform(&sys, points, points).unwrap();
        (sys, eq, supply, grid)
    }

    #[test]
    fn available_storage_without_margin_is_zero() {
        let (sys, _, supply, grid) = setup(41);
        let table = available_storage(&sys, &supply, None, &grid, 50).unwrap();
        assert!(table.converged());
        assert!(table.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn available_storage_tight_alpha_is_a_storage() {
        let (sys, eq, supply, grid) = setup(81);
        let alpha = ComparisonFunction::quadratic(5.0 / 6.0).unwrap();
        let table = available_storage(&sys, &supply, Some(&alpha), &grid, DEFAULT_STORAGE_HORIZON).unwrap();
        assert!(table.converged(), "{:?}", table.status);
        assert!(table.min >= 0.0);
        // Dominated by the shifted known storage −x²/2 + 2.
        for (i, v) in table.values.iter().enumerate() {
            let x = grid.state.point(i)[0];
            assert!(*v <= 2.0 - x * x / 2.0 + 1e-6, "V({x}) = {v}");
        }
        let report = check_strict_dissipativity_with(
            &sys,
            &table.candidate(),
            Some(&alpha),
            &eq,
            &grid,
            CheckOptions { tolerance: 1e-6, ..CheckOptions::default() },
        )
        .unwrap();
        assert!(report.certified(), "worst {}", report.worst_violation);
    }

    #[test]
    fn required_supply_bounds() {
        let (sys, _, supply, grid) = setup(41);
        let table = required_supply(&sys, &supply, None, &grid, 50).unwrap();
        assert_eq!(table.value_at(&[0.0]), 0.0);
        assert!(table.value_at(&[1.0]) <= 1.0);
        assert!(table.bounded());
    }

    #[test]
    fn required_supply_needs_equilibrium_node() {
        let (sys, _, mut supply, _) = setup(41);
        supply.eq_state = vec![0.0];
        let grid = Grid::uniform(&sys, 40, 41).unwrap();
        assert!(matches!(
            required_supply(&sys, &supply, None, &grid, 5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn storage_csv_header() {
        let (sys, _, supply, _) = setup(5);
        let grid = Grid::uniform(&sys, 5, 5).unwrap();
        let sys = sys.with_state_box(BoxSet::interval(-2.0, 2.0).unwrap()).unwrap();
        let table = available_storage(&sys, &supply, None, &grid, 1).unwrap();
        assert!(table.to_csv().starts_with("x,lambda\n"));
    }
}
