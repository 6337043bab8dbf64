//! Strict dissipativity with respect to the supply `s(x,u) = ℓ(x,u) − ℓ(x^e,u^e)`:
//! storage candidates, the one-step check
//! `λ(f(x,u)) ≤ λ(x) + s(x,u) − α(‖x − x^e‖)` on sampled pairs, rotated
//! costs, and storage functions computed by dynamic programming.

mod certificate;
mod equilibrium;
mod storage;

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

pub use certificate::{
    steady_state_optimality_check, turnpike_lower_bound_certificate, LowerBoundCertificate,
    SteadyStateReport, SteadyStateRow,
};
pub use equilibrium::{offer_linear_storage, optimal_equilibrium, probe_convexity, ConvexityProbe};
pub use storage::{
    available_storage, required_supply, StorageStatus, StorageTable, DEFAULT_STORAGE_HORIZON,
    STORAGE_CONVERGENCE_TOL, STORAGE_DIVERGENCE_BOUND,
};

use crate::dp::TerminalConditions;
use crate::error::{Error, Result};
use crate::grid::{Grid, Interpolation, Lattice};
use crate::system::{euclidean_distance, ComparisonFunction, ControlSystem, Equilibrium};

/// Slack on the declared storage lower bound.
pub const LOWER_BOUND_TOL: f64 = 1e-9;
/// Default violation tolerance of the one-step check.
pub const DISSIPATION_TOL: f64 = 1e-9;
/// Bisection steps used by [`fit_alpha`].
pub const ALPHA_BISECTION_STEPS: usize = 40;

pub type StorageFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum StorageKind {
    /// `pᵀx`
    Linear { p: Vec<f64> },
    /// `xᵀMx/2 + pᵀx`, `M` row-major.
    Quadratic { m: Vec<Vec<f64>>, p: Vec<f64> },
    /// Multilinear interpolation of node values; `+∞` outside the lattice.
    Tabulated { lattice: Lattice, values: Arc<Vec<f64>> },
    Callable(StorageFn),
}

impl fmt::Debug for StorageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { p } => f.debug_struct("Linear").field("p", p).finish(),
            Self::Quadratic { m, p } => f.debug_struct("Quadratic").field("m", m).field("p", p).finish(),
            Self::Tabulated { lattice, .. } => f.debug_struct("Tabulated").field("nodes", &lattice.len()).finish(),
            Self::Callable(_) => f.write_str("Callable"),
        }
    }
}

/// Storage function candidate `λ` with declared lower bound `λ ≥ −D`.
#[derive(Clone, Debug)]
pub struct StorageCandidate {
    pub kind: StorageKind,
    pub lower_bound: f64,
}

impl StorageCandidate {
    pub fn linear(p: Vec<f64>, lower_bound: f64) -> Self {
        Self { kind: StorageKind::Linear { p }, lower_bound }
    }

    pub fn quadratic(m: Vec<Vec<f64>>, p: Vec<f64>, lower_bound: f64) -> Self {
        Self { kind: StorageKind::Quadratic { m, p }, lower_bound }
    }

    pub fn tabulated(lattice: Lattice, values: Vec<f64>, lower_bound: f64) -> Self {
        Self {
            kind: StorageKind::Tabulated { lattice, values: Arc::new(values) },
            lower_bound,
        }
    }

    pub fn callable(f: StorageFn, lower_bound: f64) -> Self {
        Self { kind: StorageKind::Callable(f), lower_bound }
    }

    /// `λ ≡ 0`.
    pub fn zero(dim: usize) -> Self {
        Self::linear(vec![0.0; dim], 0.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            StorageKind::Linear { p } => dot(p, x),
            StorageKind::Quadratic { m, p } => {
                let quad: f64 = m.iter().zip(x).map(|(row, xi)| xi * dot(row, x)).sum();
                0.5 * quad + dot(p, x)
            }
            StorageKind::Tabulated { lattice, values } => {
                lattice.interpolate(values, x, Interpolation::Multilinear)
            }
            StorageKind::Callable(f) => f(x),
        }
    }

    /// Minimum of `λ` over the finite node values of `lattice`.
    pub fn grid_minimum(&self, lattice: &Lattice) -> f64 {
        (0..lattice.len())
            .map(|i| self.eval(&lattice.point(i)))
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min)
    }

    /// Verifies `min λ ≥ −D − 1e−9` on the lattice nodes.
    pub fn verify_lower_bound(&self, lattice: &Lattice) -> Result<f64> {
        let minimum = self.grid_minimum(lattice);
        if minimum < -self.lower_bound - LOWER_BOUND_TOL {
            return Err(Error::RejectedCandidate { minimum, bound: self.lower_bound });
        }
        Ok(minimum)
    }

    /// Replaces `D` by the smallest value the lattice supports.
    pub fn with_fitted_bound(mut self, lattice: &Lattice) -> Self {
        self.lower_bound = (-self.grid_minimum(lattice)).max(0.0);
        self
    }

    /// Node values on a lattice (`x,lambda` tables).
    pub fn tabulate(&self, lattice: &Lattice) -> Vec<(Vec<f64>, f64)> {
        (0..lattice.len())
            .map(|i| {
                let x = lattice.point(i);
                let v = self.eval(&x);
                (x, v)
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// What the comparison function is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaArgument {
    /// `α(‖x − x^e‖)`
    #[default]
    State,
    /// `α(‖(x,u) − (x^e,u^e)‖)`
    StateControl,
}

/// `s(x,u) = ℓ(x,u) − ℓ(x^e,u^e)` anchored at an equilibrium.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupplyRate {
    pub shift: f64,
    pub eq_state: Vec<f64>,
    pub eq_control: Vec<f64>,
}

impl SupplyRate {
    pub fn from_equilibrium(eq: &Equilibrium) -> Self {
        Self {
            shift: eq.cost,
            eq_state: eq.state.clone(),
            eq_control: eq.control.clone(),
        }
    }

    pub fn eval(&self, system: &ControlSystem, x: &[f64], u: &[f64]) -> f64 {
        system.cost(x, u) - self.shift
    }

    /// Distance fed to `α`.
    pub fn distance(&self, x: &[f64], u: &[f64], argument: AlphaArgument) -> f64 {
        match argument {
            AlphaArgument::State => euclidean_distance(x, &self.eq_state),
            AlphaArgument::StateControl => {
                let dx = euclidean_distance(x, &self.eq_state);
                let du = euclidean_distance(u, &self.eq_control);
                (dx * dx + du * du).sqrt()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    CertifiedOnGrid,
    Refuted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    Plain,
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub tolerance: f64,
    pub argument: AlphaArgument,
    /// Skip pairs where `λ` is not finite at `x` or at `f(x,u)` (storage
    /// tables defined on a reached subset only).
    pub finite_storage_only: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            tolerance: DISSIPATION_TOL,
            argument: AlphaArgument::State,
            finite_storage_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorstPair {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DissipativityReport {
    pub mode: CheckMode,
    pub alpha: Option<ComparisonFunction>,
    pub checked_pairs: usize,
    /// Pairs whose successor leaves `𝕏`.
    pub skipped_pairs: usize,
    /// Pairs dropped because `λ` is not finite there.
    pub skipped_nonfinite: usize,
    pub worst_violation: f64,
    pub worst_pair: Option<WorstPair>,
    pub tolerance: f64,
    pub verdict: Verdict,
}

impl DissipativityReport {
    pub fn certified(&self) -> bool {
        self.verdict == Verdict::CertifiedOnGrid
    }

    /// `{mode, alpha: {c, q}, pairs, worst_violation, worst_pair, verdict}`
    pub fn to_json(&self) -> serde_json::Value {
        let alpha = match &self.alpha {
            Some(ComparisonFunction::PowerLaw { c, q }) => serde_json::json!({ "c": c, "q": q }),
            Some(other) => serde_json::to_value(other).unwrap_or(serde_json::Value::Null),
            None => serde_json::json!({ "c": 0.0, "q": 1.0 }),
        };
        serde_json::json!({
            "mode": self.mode,
            "alpha": alpha,
            "pairs": self.checked_pairs,
            "worst_violation": finite_or_null(self.worst_violation),
            "worst_pair": self.worst_pair,
            "verdict": self.verdict,
        })
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::String(format!("{v}"))
    }
}

/// `λ(f(x,u)) − λ(x) − s(x,u) + α(·)` at one pair; positive means violated.
pub fn violation_at(
    system: &ControlSystem,
    storage: &StorageCandidate,
    alpha: Option<&ComparisonFunction>,
    eq: &Equilibrium,
    x: &[f64],
    u: &[f64],
) -> f64 {
    let supply = SupplyRate::from_equilibrium(eq);
    pair_violation(system, storage, alpha, &supply, AlphaArgument::State, x, u)
}

fn pair_violation(
    system: &ControlSystem,
    storage: &StorageCandidate,
    alpha: Option<&ComparisonFunction>,
    supply: &SupplyRate,
    argument: AlphaArgument,
    x: &[f64],
    u: &[f64],
) -> f64 {
    let s = supply.eval(system, x, u);
    if s == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    let y = system.step(x, u);
    let margin = alpha.map_or(0.0, |a| a.eval(supply.distance(x, u, argument)));
    storage.eval(&y) - storage.eval(x) - s + margin
}

enum PairOutcome {
    Skipped,
    NonFinite,
    Checked(f64),
}

/// One-step strict dissipativity check on all sampled `(x,u)` pairs; `alpha =
/// None` checks the plain inequality.
pub fn check_strict_dissipativity(
    system: &ControlSystem,
    storage: &StorageCandidate,
    alpha: Option<&ComparisonFunction>,
    eq: &Equilibrium,
    samples: &Grid,
) -> Result<DissipativityReport> {
    check_strict_dissipativity_with(system, storage, alpha, eq, samples, CheckOptions::default())
}

pub fn check_strict_dissipativity_with(
    system: &ControlSystem,
    storage: &StorageCandidate,
    alpha: Option<&ComparisonFunction>,
    eq: &Equilibrium,
    samples: &Grid,
    options: CheckOptions,
) -> Result<DissipativityReport> {
    samples.check_matches(system)?;
    storage.verify_lower_bound(&samples.state)?;
    let supply = SupplyRate::from_equilibrium(eq);
    let controls = samples.control.points();

    let outcomes: Vec<(usize, PairOutcome)> = (0..samples.state.len() * controls.len())
        .into_par_iter()
        .map(|pair| {
            let x = samples.state.point(pair / controls.len());
            let u = &controls[pair % controls.len()];
            let y = system.step(&x, u);
            if !system.state_box().contains(&y) {
                return (pair, PairOutcome::Skipped);
            }
            if options.finite_storage_only
                && !(storage.eval(&x).is_finite() && storage.eval(&y).is_finite())
            {
                return (pair, PairOutcome::NonFinite);
            }
            let v = pair_violation(system, storage, alpha, &supply, options.argument, &x, u);
            if v.is_nan() {
                (pair, PairOutcome::NonFinite)
            } else {
                (pair, PairOutcome::Checked(v))
            }
        })
        .collect();

    let mut report = DissipativityReport {
        mode: if alpha.is_some() { CheckMode::Strict } else { CheckMode::Plain },
        alpha: alpha.cloned(),
        checked_pairs: 0,
        skipped_pairs: 0,
        skipped_nonfinite: 0,
        worst_violation: f64::NEG_INFINITY,
        worst_pair: None,
        tolerance: options.tolerance,
        verdict: Verdict::CertifiedOnGrid,
    };
    for (pair, outcome) in outcomes {
        match outcome {
            PairOutcome::Skipped => report.skipped_pairs += 1,
            PairOutcome::NonFinite => report.skipped_nonfinite += 1,
            PairOutcome::Checked(v) => {
                report.checked_pairs += 1;
                if v > report.worst_violation || report.worst_pair.is_none() {
                    report.worst_violation = v;
                    report.worst_pair = Some(WorstPair {
                        x: samples.state.point(pair / controls.len()),
                        u: controls[pair % controls.len()].clone(),
                    });
                }
            }
        }
    }
    if report.worst_violation > options.tolerance {
        report.verdict = Verdict::Refuted;
    }
    Ok(report)
}

/// Largest `c` (by bisection) such that `α(r) = c·r^q` passes the check.
/// `None` when even the plain inequality fails.
pub fn fit_alpha(
    system: &ControlSystem,
    storage: &StorageCandidate,
    eq: &Equilibrium,
    samples: &Grid,
    exponent: f64,
) -> Result<Option<ComparisonFunction>> {
    samples.check_matches(system)?;
    storage.verify_lower_bound(&samples.state)?;
    let supply = SupplyRate::from_equilibrium(eq);
    let controls = samples.control.points();
    // (slack of the plain inequality, r^q) per admissible pair
    let rows: Vec<(f64, f64)> = (0..samples.state.len() * controls.len())
        .into_par_iter()
        .filter_map(|pair| {
            let x = samples.state.point(pair / controls.len());
            let u = &controls[pair % controls.len()];
            let y = system.step(&x, u);
            if !system.state_box().contains(&y) {
                return None;
            }
            let slack = -pair_violation(system, storage, None, &supply, AlphaArgument::State, &x, u);
            (!slack.is_nan()).then(|| (slack, supply.distance(&x, u, AlphaArgument::State).powf(exponent)))
        })
        .collect();
    let passes = |c: f64| rows.iter().all(|(slack, rq)| c * rq - slack <= DISSIPATION_TOL);
    if !passes(0.0) {
        return Ok(None);
    }
    let mut hi = 1.0;
    let mut doublings = 0;
    while passes(hi) {
        hi *= 2.0;
        doublings += 1;
        if doublings > 1000 {
            return Err(Error::InvalidArgument("comparison coefficient is unbounded".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..ALPHA_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if passes(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo <= 0.0 {
        return Ok(None);
    }
    ComparisonFunction::power(lo, exponent).map(Some)
}

/// `ℓ̃(x,u) = ℓ(x,u) − ℓ(x^e,u^e) + λ(x) − λ(f(x,u))`, exactly `0` at the
/// equilibrium pair.
pub fn rotated_cost(system: &ControlSystem, storage: &StorageCandidate, eq: &Equilibrium) -> ControlSystem {
    let base = system.stage_cost_fn().clone();
    let dynamics = system.dynamics_fn().clone();
    let storage = storage.clone();
    let (xe, ue, shift) = (eq.state.clone(), eq.control.clone(), eq.cost);
    system.with_stage_cost(
        format!("{}-rotated", system.name()),
        Arc::new(move |x, u| {
            if x == xe.as_slice() && u == ue.as_slice() {
                return 0.0;
            }
            let c = base(x, u);
            if c.is_nan() || c == f64::INFINITY {
                return f64::INFINITY;
            }
            c - shift + storage.eval(x) - storage.eval(&dynamics(x, u))
        }),
    )
}

/// `F̃ = F + λ` on the same terminal set.
pub fn rotated_terminal(terminal: &TerminalConditions, storage: &StorageCandidate) -> TerminalConditions {
    let storage = storage.clone();
    let base = terminal.cost.clone();
    TerminalConditions {
        set: terminal.set.clone(),
        cost: Some(Arc::new(move |x| base.as_ref().map_or(0.0, |f| f(x)) + storage.eval(x))),
    }
}
