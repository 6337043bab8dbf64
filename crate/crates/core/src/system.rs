//! Problem data: control systems `x⁺ = f(x, u)` with stage cost and box
//! constraints, trajectories, equilibria and comparison functions.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};

/// Dynamics map `(x, u) -> x⁺`.
pub type DynamicsFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
/// Stage cost `(x, u) -> ℓ(x, u)`; `+∞` marks an undefined cost.
pub type CostFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Tolerance for dynamic consistency of a trajectory (sup-norm).
pub const CONSISTENCY_TOL: f64 = 1e-9;
/// Slack allowed when testing membership in a box.
pub const BOX_TOL: f64 = 1e-9;

pub const PRESET_NAMES: [&str; 2] = ["brock-mirman", "invariance"];

/// Axis-aligned closed box `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Dimension(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidArgument(format!(
                    "box axis {i} is empty or unbounded: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        self.contains_with(v, BOX_TOL)
    }

    pub fn contains_with(&self, v: &[f64], tol: f64) -> bool {
        v.len() == self.dim()
            && v
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x >= lo - tol && *x <= hi + tol)
    }

    /// Euclidean diameter.
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| (hi - lo) * (hi - lo))
            .sum::<f64>()
            .sqrt()
    }

    /// True when `v` lies in the interior (every coordinate strictly inside).
    pub fn interior_contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x > *lo && *x < *hi)
    }
}

/// A discrete-time control system `(f, ℓ, 𝕏, 𝕌)`.
#[derive(Clone)]
pub struct ControlSystem {
    name: String,
    dynamics: DynamicsFn,
    stage_cost: CostFn,
    state_box: BoxSet,
    control_box: BoxSet,
}

impl fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSystem")
            .field("name", &self.name)
            .field("state_box", &self.state_box)
            .field("control_box", &self.control_box)
            .finish_non_exhaustive()
    }
}

impl ControlSystem {
    pub fn new(
        name: impl Into<String>,
        state_box: BoxSet,
        control_box: BoxSet,
        dynamics: DynamicsFn,
        stage_cost: CostFn,
    ) -> Self {
        Self {
            name: name.into(),
            dynamics,
            stage_cost,
            state_box,
            control_box,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_box.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.control_box.dim()
    }

    pub fn state_box(&self) -> &BoxSet {
        &self.state_box
    }

    pub fn control_box(&self) -> &BoxSet {
        &self.control_box
    }

    pub fn dynamics_fn(&self) -> &DynamicsFn {
        &self.dynamics
    }

    pub fn stage_cost_fn(&self) -> &CostFn {
        &self.stage_cost
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (self.dynamics)(x, u)
    }

    /// Stage cost with NaN folded into `+∞`.
    pub fn cost(&self, x: &[f64], u: &[f64]) -> f64 {
        let c = (self.stage_cost)(x, u);
        if c.is_nan() {
            f64::INFINITY
        } else {
            c
        }
    }

    /// Same dynamics and constraints, different stage cost.
    pub fn with_stage_cost(&self, name: impl Into<String>, stage_cost: CostFn) -> Self {
        Self {
            name: name.into(),
            stage_cost,
            ..self.clone()
        }
    }

    /// Same dynamics and cost on a different state box.
    pub fn with_state_box(&self, state_box: BoxSet) -> Result<Self> {
        if state_box.dim() != self.state_dim() {
            return Err(Error::Dimension("replacement state box".into()));
        }
        Ok(Self {
            state_box,
            ..self.clone()
        })
    }

    /// Stage cost shifted by a constant, `ℓ − c`.
    pub fn shifted(&self, c: f64) -> Self {
        let base = self.stage_cost.clone();
        self.with_stage_cost(
            format!("{}-shifted", self.name),
            Arc::new(move |x, u| base(x, u) - c),
        )
    }
}

/// Time-indexed states `x(0..=T)` with aligned controls `u(0..T)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, controls: Vec<Vec<f64>>) -> Result<Self> {
        if states.len() != controls.len() + 1 {
            return Err(Error::MalformedTrajectory(format!(
                "{} states for {} controls",
                states.len(),
                controls.len()
            )));
        }
        Ok(Self { states, controls })
    }

    pub fn constant(x: &[f64], u: &[f64], horizon: usize) -> Self {
        Self {
            states: vec![x.to_vec(); horizon + 1],
            controls: vec![u.to_vec(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn controls(&self) -> &[Vec<f64>] {
        &self.controls
    }

    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn terminal(&self) -> &[f64] {
        &self.states[self.states.len() - 1]
    }

    /// Sub-trajectory over `[from, to]`.
    pub fn window(&self, from: usize, to: usize) -> Self {
        Self {
            states: self.states[from..=to].to_vec(),
            controls: self.controls[from..to].to_vec(),
        }
    }

    /// Sup-norm consistency check; returns the first offending step.
    pub fn check_consistency(&self, system: &ControlSystem) -> Result<()> {
        for (t, u) in self.controls.iter().enumerate() {
            let next = system.step(&self.states[t], u);
            let residual = sup_distance(&next, &self.states[t + 1]);
            if !(residual <= CONSISTENCY_TOL) {
                return Err(Error::InconsistentTrajectory { step: t, residual });
            }
        }
        Ok(())
    }
}

/// Optimal equilibrium `(x^e, u^e)` with its cost and multiplier.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Equilibrium {
    pub state: Vec<f64>,
    pub control: Vec<f64>,
    pub cost: f64,
    /// Multiplier `p` of the constraint `f(x,u) − x = 0` in `ℓ + pᵀ(f(x,u) − x)`.
    pub multiplier: Option<Vec<f64>>,
    /// Set when refinement failed and a grid pair was returned instead.
    pub degraded: bool,
}

impl Equilibrium {
    pub fn new(system: &ControlSystem, state: Vec<f64>, control: Vec<f64>) -> Self {
        let cost = system.cost(&state, &control);
        Self {
            state,
            control,
            cost,
            multiplier: None,
            degraded: false,
        }
    }

    pub fn fixed_point_residual(&self, system: &ControlSystem) -> f64 {
        euclidean_distance(&system.step(&self.state, &self.control), &self.state)
    }
}

/// A class-𝒦∞ candidate.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComparisonFunction {
    /// `c · r^q`, `c > 0`, `q ≥ 1`.
    PowerLaw { c: f64, q: f64 },
    /// Piecewise linear through `(0,0), (r₁,v₁), …`, extended linearly past the
    /// last knot.
    Tabulated { r: Vec<f64>, values: Vec<f64> },
}

impl ComparisonFunction {
    pub fn power(c: f64, q: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) || !(q >= 1.0 && q.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "power law needs c > 0 and q >= 1, got c={c}, q={q}"
            )));
        }
        Ok(Self::PowerLaw { c, q })
    }

    pub fn quadratic(c: f64) -> Result<Self> {
        Self::power(c, 2.0)
    }

    pub fn tabulated(r: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if r.len() != values.len() || r.len() < 2 {
            return Err(Error::InvalidArgument(
                "tabulated comparison function needs at least two knots".into(),
            ));
        }
        if r[0] != 0.0 || values[0] != 0.0 {
            return Err(Error::InvalidArgument("first knot must be (0, 0)".into()));
        }
        let increasing = r.windows(2).all(|w| w[1] > w[0])
            && values.windows(2).all(|w| w[1] > w[0]);
        if !increasing {
            return Err(Error::InvalidArgument(
                "tabulated comparison function must be strictly increasing".into(),
            ));
        }
        Ok(Self::Tabulated { r, values })
    }

    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Self::PowerLaw { c, q } => c * r.max(0.0).powf(*q),
            Self::Tabulated { r: knots, values } => {
                let r = r.max(0.0);
                let k = knots.partition_point(|&k| k <= r);
                let i = k.clamp(1, knots.len() - 1);
                let (r0, r1) = (knots[i - 1], knots[i]);
                let (v0, v1) = (values[i - 1], values[i]);
                v0 + (v1 - v0) * (r - r0) / (r1 - r0)
            }
        }
    }
}

pub fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs `x(t+1) = f(x(t), u(t))` from `x0`. Admissibility is not enforced.
pub fn simulate(system: &ControlSystem, x0: &[f64], controls: &[Vec<f64>]) -> Result<Trajectory> {
    if x0.len() != system.state_dim() {
        return Err(Error::Dimension(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            system.state_dim()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("initial state is not finite".into()));
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.to_vec());
    for (t, u) in controls.iter().enumerate() {
        if u.len() != system.control_dim() || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("control at step {t} is malformed")));
        }
        let next = system.step(&states[t], u);
        if next.len() != system.state_dim() {
            return Err(Error::Dimension(format!("dynamics output at step {t}")));
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { step: t });
        }
        states.push(next);
    }
    Trajectory::new(states, controls.to_vec())
}

/// `Σ_{t<T} ℓ(x(t), u(t))`, `+∞` if any term is.
pub fn trajectory_cost(system: &ControlSystem, traj: &Trajectory) -> Result<f64> {
    traj.check_consistency(system)?;
    Ok(traj
        .controls()
        .iter()
        .enumerate()
        .map(|(t, u)| system.cost(&traj.states()[t], u))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepAdmissibility {
    pub t: usize,
    pub state_ok: bool,
    /// `None` for the final state, which carries no control.
    pub control_ok: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub steps: Vec<StepAdmissibility>,
    pub admissible: bool,
}

impl AdmissibilityReport {
    pub fn first_violation(&self) -> Option<usize> {
        self.steps
            .iter()
            .find(|s| !s.state_ok || s.control_ok == Some(false))
            .map(|s| s.t)
    }
}

pub fn check_admissible(system: &ControlSystem, traj: &Trajectory) -> AdmissibilityReport {
    let steps: Vec<_> = traj
        .states()
        .iter()
        .enumerate()
        .map(|(t, x)| StepAdmissibility {
            t,
            state_ok: system.state_box().contains(x),
            control_ok: traj
                .controls()
                .get(t)
                .map(|u| system.control_box().contains(u)),
        })
        .collect();
    let admissible = steps
        .iter()
        .all(|s| s.state_ok && s.control_ok != Some(false));
    AdmissibilityReport { steps, admissible }
}

/// Scalar affine dynamics `x⁺ = a x + b u + c` with cost
/// `q₂ x² + r₂ u² + q₁ x + r₁ u`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarAffine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub q2: f64,
    pub r2: f64,
    pub q1: f64,
    pub r1: f64,
}

impl ScalarAffine {
    pub fn into_system(self, name: impl Into<String>, state_box: BoxSet, control_box: BoxSet) -> ControlSystem {
        let ScalarAffine { a, b, c, q2, r2, q1, r1 } = self;
        ControlSystem::new(
            name,
            state_box,
            control_box,
            Arc::new(move |x, u| vec![a * x[0] + b * u[0] + c]),
            Arc::new(move |x, u| q2 * x[0] * x[0] + r2 * u[0] * u[0] + q1 * x[0] + r1 * u[0]),
        )
    }
}

/// Growth model `x⁺ = u`, `ℓ = −log(A x^β − u)`; `+∞` when the consumption
/// `A x^β − u` is not positive.
pub fn power_growth(
    name: impl Into<String>,
    scale: f64,
    exponent: f64,
    state_box: BoxSet,
    control_box: BoxSet,
) -> ControlSystem {
    ControlSystem::new(
        name,
        state_box,
        control_box,
        Arc::new(|_x, u| vec![u[0]]),
        Arc::new(move |x, u| {
            let consumption = scale * x[0].powf(exponent) - u[0];
            if consumption > 0.0 {
                -consumption.ln()
            } else {
                f64::INFINITY
            }
        }),
    )
}

/// The two worked examples: `brock-mirman` and `invariance`.
pub fn preset(name: &str) -> Result<ControlSystem> {
    match name {
        "brock-mirman" => Ok(power_growth(
            "brock-mirman",
            5.0,
            0.34,
            BoxSet::interval(0.0, 10.0)?,
            BoxSet::interval(0.01, 10.0)?,
        )),
        "invariance" => Ok(ScalarAffine {
            a: 2.0,
            b: 1.0,
            c: 0.0,
            q2: 0.0,
            r2: 1.0,
            q1: 0.0,
            r1: 0.0,
        }
        .into_system(
            "invariance",
            BoxSet::interval(-2.0, 2.0)?,
            BoxSet::interval(-3.0, 3.0)?,
        )),
        other => Err(Error::UnknownPreset {
            name: other.to_string(),
            valid: PRESET_NAMES.to_vec(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64) -> Vec<f64> {
        vec![x]
    }

    #[test]
    fn simulate_invariance_one_step() {
        let sys = preset("invariance").unwrap();
        let traj = simulate(&sys, &[2.0], &[v(-3.0)]).unwrap();
        assert_eq!(traj.states(), &[v(2.0), v(1.0)]);
    }

    #[test]
    fn simulate_empty_controls() {
        let sys = preset("brock-mirman").unwrap();
        let traj = simulate(&sys, &[3.0], &[]).unwrap();
        assert_eq!(traj.horizon(), 0);
        assert_eq!(traj.states(), &[v(3.0)]);
    }

    #[test]
    fn simulate_growth_holds_at_control() {
        let sys = preset("brock-mirman").unwrap();
        let traj = simulate(&sys, &[2.2345], &[v(2.2345), v(2.2345)]).unwrap();
        assert!(traj.states().iter().all(|x| x[0] == 2.2345));
    }

    #[test]
    fn simulate_reports_overflow_step() {
        let sys = ScalarAffine { a: 1e300, b: 0.0, c: 0.0, q2: 0.0, r2: 0.0, q1: 0.0, r1: 0.0 }
            .into_system("blowup", BoxSet::interval(-1.0, 1.0).unwrap(), BoxSet::interval(-1.0, 1.0).unwrap());
        let err = simulate(&sys, &[1.0], &[v(0.0), v(0.0)]).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { step: 1 }));
    }

    #[test]
    fn cost_of_short_invariance_run() {
        let sys = preset("invariance").unwrap();
        let traj = Trajectory::new(vec![v(0.0), v(1.0), v(2.0)], vec![v(1.0), v(0.0)]).unwrap();
        assert_eq!(trajectory_cost(&sys, &traj).unwrap(), 1.0);
        let empty = Trajectory::new(vec![v(0.5)], vec![]).unwrap();
        assert_eq!(trajectory_cost(&sys, &empty).unwrap(), 0.0);
    }

    #[test]
    fn cost_rejects_inconsistent_trajectory() {
        let sys = preset("invariance").unwrap();
        let traj = Trajectory::new(vec![v(0.0), v(1.0), v(3.0)], vec![v(1.0), v(0.0)]).unwrap();
        let err = trajectory_cost(&sys, &traj).unwrap_err();
        assert!(matches!(err, Error::InconsistentTrajectory { step: 1, .. }));
    }

    #[test]
    fn admissibility_reports() {
        let inv = preset("invariance").unwrap();
        let ok = Trajectory::new(vec![v(2.0), v(1.0)], vec![v(-3.0)]).unwrap();
        assert!(check_admissible(&inv, &ok).admissible);

        let bad = Trajectory::new(vec![v(2.0), v(4.0)], vec![v(0.0)]).unwrap();
        let report = check_admissible(&inv, &bad);
        assert!(!report.admissible);
        assert_eq!(report.first_violation(), Some(1));
        assert!(!report.steps[1].state_ok);

        let bm = preset("brock-mirman").unwrap();
        let low = Trajectory::new(vec![v(2.0), v(0.005)], vec![v(0.005)]).unwrap();
        let report = check_admissible(&bm, &low);
        assert!(!report.admissible);
        assert_eq!(report.steps[0].control_ok, Some(false));
    }

    #[test]
    fn presets_carry_their_boxes() {
        let inv = preset("invariance").unwrap();
        assert_eq!(inv.state_box().lower(), &[-2.0]);
        assert_eq!(inv.control_box().upper(), &[3.0]);
        let bm = preset("brock-mirman").unwrap();
        assert_eq!(bm.state_box().upper(), &[10.0]);
        assert_eq!(bm.control_box().lower(), &[0.01]);
        assert_eq!(bm.cost(&[0.0], &[10.0]), f64::INFINITY);
    }

    #[test]
    fn unknown_preset_lists_names() {
        let err = preset("ramsey").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("brock-mirman") && msg.contains("invariance"));
    }

    #[test]
    fn comparison_functions() {
        let a = ComparisonFunction::quadratic(5.0 / 6.0).unwrap();
        assert_eq!(a.eval(0.0), 0.0);
        assert!((a.eval(1.0) - 5.0 / 6.0).abs() < 1e-15);
        assert!(ComparisonFunction::power(0.0, 2.0).is_err());
        assert!(ComparisonFunction::power(1.0, 0.5).is_err());

        let t = ComparisonFunction::tabulated(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(t.eval(0.5), 0.5);
        assert_eq!(t.eval(1.5), 2.0);
        assert_eq!(t.eval(3.0), 5.0);
        assert!(ComparisonFunction::tabulated(vec![0.0, 1.0], vec![0.0, 0.0]).is_err());
    }
}
