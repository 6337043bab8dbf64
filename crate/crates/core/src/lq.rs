//! Linear-quadratic criteria: strict dissipativity of
//! `x⁺ = Ax + Bu`, `ℓ = xᵀQx + uᵀRu + qᵀx + rᵀu` from the unobservable
//! eigenvalues of `(A, C)` with `Q = CᵀC`, and the nonlinear detectability
//! inequalities on sampled pairs.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::dissipativity::StorageFn;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::system::{euclidean_distance, ComparisonFunction, ControlSystem, Equilibrium};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-8;
/// Eigenvalues of `Q` kept when factoring `Q = CᵀC`.
pub const FACTOR_TOL: f64 = 1e-12;
/// Eigen-residual above which an accuracy warning is attached.
pub const RESIDUAL_WARN: f64 = 1e-6;
/// Distance from the unit circle under which `|μ| = 1` is assumed.
pub const UNIT_CIRCLE_TOL: f64 = 1e-9;
const DETECTABILITY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UnobservableEigenvalue {
    pub re: f64,
    pub im: f64,
    pub mult: usize,
}

impl UnobservableEigenvalue {
    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    /// Ordered by `(|μ|, arg μ)`.
    pub eigenvalues: Vec<UnobservableEigenvalue>,
    pub warning: Option<String>,
}

fn check_square(a: &DMatrix<f64>) -> Result<usize> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::Dimension(format!("A is {}x{}", a.nrows(), a.ncols())));
    }
    Ok(a.nrows())
}

/// Eigenvalues of `A` grouped into clusters with algebraic multiplicity.
fn clustered_eigenvalues(a: &DMatrix<f64>) -> Vec<(Complex64, usize)> {
    let n = a.nrows();
    let scale = a.norm().max(1.0);
    // Defective eigenvalues split by about sqrt(eps).
    let tol = 1e-6 * scale;
    let eig: Vec<Complex64> = a.clone().complex_eigenvalues().iter().copied().collect();
    let mut clusters: Vec<(Vec<Complex64>, Complex64)> = Vec::new();
    for mu in eig {
        match clusters.iter_mut().find(|(_, c)| (c - mu).norm() <= tol) {
            Some((members, centre)) => {
                members.push(mu);
                *centre = members.iter().sum::<Complex64>() / members.len() as f64;
            }
            None => clusters.push((vec![mu], mu)),
        }
    }
    debug_assert_eq!(clusters.iter().map(|c| c.0.len()).sum::<usize>(), n);
    clusters
        .into_iter()
        .map(|(members, mut centre)| {
            // Conjugate-symmetric clusters of a real matrix have a real centre.
            if centre.im.abs() <= tol {
                centre.im = 0.0;
            }
            (centre, members.len())
        })
        .collect()
}

fn complexify(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

fn numerical_rank(singular: &[f64]) -> usize {
    let top = singular.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    singular.iter().filter(|s| **s > RANK_TOL * top).count()
}

fn sort_spectrum(list: &mut [UnobservableEigenvalue]) {
    let key = |e: &UnobservableEigenvalue| {
        let arg = e.im.atan2(e.re);
        (e.modulus(), if arg < 0.0 { arg + 2.0 * PI } else { arg })
    };
    list.sort_by(|a, b| {
        let (ma, aa) = key(a);
        let (mb, ab) = key(b);
        ma.total_cmp(&mb).then(aa.total_cmp(&ab))
    });
}

/// Eigenvalues `μ` of `A` with `rank [μI − A; C] < n`.
pub fn unobservable_eigenvalues(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Spectrum> {
    let n = check_square(a)?;
    if c.ncols() != n {
        return Err(Error::Dimension(format!("C has {} columns, A is {n}x{n}", c.ncols())));
    }
    let ac = complexify(a);
    let cc = complexify(c);
    let scale = a.norm().max(1.0);
    let mut out = Vec::new();
    let mut worst_residual: f64 = 0.0;
    for (mu, mult) in clustered_eigenvalues(a) {
        let shifted = DMatrix::from_diagonal_element(n, n, mu) - &ac;
        let sv = shifted.clone().singular_values();
        worst_residual = worst_residual.max(sv.iter().copied().fold(f64::INFINITY, f64::min) / scale);
        let mut stacked = DMatrix::zeros(n + cc.nrows(), n);
        stacked.view_mut((0, 0), (n, n)).copy_from(&shifted);
        if cc.nrows() > 0 {
            stacked.view_mut((n, 0), (cc.nrows(), n)).copy_from(&cc);
        }
        let sv: Vec<f64> = stacked.singular_values().iter().copied().collect();
        if numerical_rank(&sv) < n {
            out.push(UnobservableEigenvalue { re: mu.re, im: mu.im, mult });
        }
    }
    sort_spectrum(&mut out);
    let warning = (worst_residual > RESIDUAL_WARN)
        .then(|| format!("eigenvalue residual {worst_residual:e} exceeds {RESIDUAL_WARN:e}"));
    Ok(Spectrum { eigenvalues: out, warning })
}

/// Spectrum of `A` restricted to the kernel of `[C; CA; …; CA^{n−1}]`.
pub fn kalman_unobservable_eigenvalues(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Spectrum> {
    let n = check_square(a)?;
    if c.ncols() != n {
        return Err(Error::Dimension(format!("C has {} columns, A is {n}x{n}", c.ncols())));
    }
    let p = c.nrows();
    if p == 0 {
        return unobservable_eigenvalues(a, &DMatrix::zeros(1, n));
    }
    let mut obs = DMatrix::zeros(n * p, n);
    let mut block = c.clone();
    for k in 0..n {
        obs.view_mut((k * p, 0), (p, n)).copy_from(&block);
        block = &block * a;
    }
    // Pad so the SVD returns a full right basis.
    let rows = obs.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (obs.nrows(), n)).copy_from(&obs);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Precondition("SVD did not converge".into()))?;
    let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let null: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| top == 0.0 || **s <= RANK_TOL * top)
        .map(|(i, _)| vt.row(i).transpose())
        .collect();
    if null.is_empty() {
        return Ok(Spectrum { eigenvalues: Vec::new(), warning: None });
    }
    let basis = DMatrix::from_columns(&null);
    let restricted = basis.transpose() * a * &basis;
    let mut eig: Vec<UnobservableEigenvalue> = clustered_eigenvalues(&restricted)
        .into_iter()
        .map(|(mu, mult)| UnobservableEigenvalue { re: mu.re, im: mu.im, mult })
        .collect();
    sort_spectrum(&mut eig);
    Ok(Spectrum { eigenvalues: eig, warning: None })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintMode {
    /// `𝕏 = ℝⁿ`
    Unconstrained,
    /// Bounded `𝕏` with `x^e` in its interior; `x^e` is computed when absent.
    BoundedInterior {
        lower: Vec<f64>,
        upper: Vec<f64>,
        equilibrium: Option<Vec<f64>>,
    },
}

impl ConstraintMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Unconstrained => "unconstrained",
            Self::BoundedInterior { .. } => "bounded_interior",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub r_lin: DVector<f64>,
    /// Cross term `xᵀSu`; must be absent or zero.
    pub s: Option<DMatrix<f64>>,
    pub mode: ConstraintMode,
}

impl LqProblem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>, mode: ConstraintMode) -> Self {
        let (n, m) = (a.nrows(), b.ncols());
        Self {
            a,
            b,
            q,
            r,
            q_lin: DVector::zeros(n),
            r_lin: DVector::zeros(m),
            s: None,
            mode,
        }
    }

    /// Scalar `x⁺ = a x + b u`, `ℓ = q x² + r u²`.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64, mode: ConstraintMode) -> Self {
        let one = |v| DMatrix::from_element(1, 1, v);
        Self::new(one(a), one(b), one(q), one(r), mode)
    }

    pub fn validate(&self) -> Result<()> {
        let n = check_square(&self.a)?;
        let m = self.b.ncols();
        if self.b.nrows() != n || m == 0 {
            return Err(Error::Dimension(format!("B is {}x{}", self.b.nrows(), m)));
        }
        if self.q.shape() != (n, n) || self.r.shape() != (m, m) {
            return Err(Error::Dimension("Q must be n x n and R m x m".into()));
        }
        if self.q_lin.len() != n || self.r_lin.len() != m {
            return Err(Error::Dimension("linear cost terms have the wrong length".into()));
        }
        if let Some(s) = &self.s {
            if s.iter().any(|v| *v != 0.0) {
                return Err(Error::Unsupported(
                    "cross terms xᵀSu must first be removed by a change of control variables".into(),
                ));
            }
        }
        for (name, mat) in [("Q", &self.q), ("R", &self.r)] {
            let scale = mat.norm().max(1.0);
            if (mat - mat.transpose()).norm() > 1e-12 * scale {
                return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
            }
        }
        let qmin = self.q.clone().symmetric_eigen().eigenvalues.min();
        if qmin < -FACTOR_TOL * self.q.norm().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "Q is not positive semidefinite (eigenvalue {qmin})"
            )));
        }
        let rmin = self.r.clone().symmetric_eigen().eigenvalues.min();
        if rmin <= FACTOR_TOL * self.r.norm().max(1.0) {
            return Err(Error::Unsupported(format!(
                "the criteria require R positive definite (smallest eigenvalue {rmin})"
            )));
        }
        if let ConstraintMode::BoundedInterior { lower, upper, equilibrium } = &self.mode {
            if lower.len() != n || upper.len() != n || lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
                return Err(Error::InvalidArgument("state box must be n-dimensional with lower < upper".into()));
            }
            if equilibrium.as_ref().is_some_and(|e| e.len() != n) {
                return Err(Error::Dimension("equilibrium has the wrong length".into()));
            }
        }
        Ok(())
    }

    /// `C` with `Q = CᵀC` from the eigenvalues of `Q` above the threshold.
    pub fn factor_c(&self) -> DMatrix<f64> {
        let n = self.q.nrows();
        let eig = self.q.clone().symmetric_eigen();
        let rows: Vec<_> = (0..n)
            .filter(|&i| eig.eigenvalues[i] > FACTOR_TOL)
            .map(|i| eig.eigenvectors.column(i).transpose() * eig.eigenvalues[i].sqrt())
            .collect();
        if rows.is_empty() {
            DMatrix::zeros(1, n)
        } else {
            DMatrix::from_rows(&rows)
        }
    }

    /// Minimizer of `ℓ` on `{(x,u): Ax + Bu = x}` from the KKT system
    /// (minimum-norm solution when singular).
    pub fn steady_state(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let dim = 2 * n + m;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (n, n)).copy_from(&(&self.q * 2.0));
        k.view_mut((n, n), (m, m)).copy_from(&(&self.r * 2.0));
        let a_minus = &self.a - DMatrix::identity(n, n);
        k.view_mut((0, n + m), (n, n)).copy_from(&a_minus.transpose());
        k.view_mut((n, n + m), (m, n)).copy_from(&self.b.transpose());
        k.view_mut((n + m, 0), (n, n)).copy_from(&a_minus);
        k.view_mut((n + m, n), (n, m)).copy_from(&self.b);
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-&self.q_lin));
        rhs.rows_mut(n, m).copy_from(&(-&self.r_lin));
        let sol = k
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Precondition(format!("steady-state KKT solve failed: {e}")))?;
        Ok((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
    }

    /// `(f, ℓ, 𝕏, 𝕌)` on boxes, for grid-based cross-checks.
    pub fn to_system(&self, name: &str, state_box: crate::system::BoxSet, control_box: crate::system::BoxSet) -> ControlSystem {
        let (a, b, q, r, ql, rl) = (
            self.a.clone(),
            self.b.clone(),
            self.q.clone(),
            self.r.clone(),
            self.q_lin.clone(),
            self.r_lin.clone(),
        );
        let (a2, b2) = (a.clone(), b.clone());
        ControlSystem::new(
            name,
            state_box,
            control_box,
            Arc::new(move |x: &[f64], u: &[f64]| {
                let x = DVector::from_column_slice(x);
                let u = DVector::from_column_slice(u);
                (&a2 * x + &b2 * u).iter().copied().collect()
            }),
            Arc::new(move |x: &[f64], u: &[f64]| {
                let x = DVector::from_column_slice(x);
                let u = DVector::from_column_slice(u);
                x.dot(&(&q * &x)) + u.dot(&(&r * &u)) + ql.dot(&x) + rl.dot(&u)
            }),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// every unobservable `|μ| < 1`
    Detectability,
    /// every unobservable `|μ| ≠ 1`
    BoundaryAvoidance,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LqVerdict {
    pub mode: &'static str,
    pub unobservable: Vec<UnobservableEigenvalue>,
    pub strictly_dissipative: bool,
    pub criterion: Criterion,
    pub equilibrium: Option<Vec<f64>>,
    pub warning: Option<String>,
}

impl LqVerdict {
    /// `{mode, unobservable: [{re, im, mult}], verdict}`
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode,
            "unobservable": self.unobservable,
            "verdict": {
                "strictly_dissipative": self.strictly_dissipative,
                "criterion": self.criterion,
            },
        })
    }
}

pub fn lq_strict_dissipativity(problem: &LqProblem) -> Result<LqVerdict> {
    problem.validate()?;
    let spectrum = unobservable_eigenvalues(&problem.a, &problem.factor_c())?;
    let (criterion, equilibrium) = match &problem.mode {
        ConstraintMode::Unconstrained => (Criterion::Detectability, None),
        ConstraintMode::BoundedInterior { lower, upper, equilibrium } => {
            let xe = match equilibrium {
                Some(x) => x.clone(),
                None => problem.steady_state()?.0.iter().copied().collect(),
            };
            let interior = xe
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (l, u))| *x > *l && *x < *u);
            if !interior {
                return Err(Error::Unsupported(format!(
                    "equilibrium {xe:?} is not in the interior of the state box"
                )));
            }
            (Criterion::BoundaryAvoidance, Some(xe))
        }
    };
    let strictly_dissipative = spectrum.eigenvalues.iter().all(|e| {
        let m = e.modulus();
        match criterion {
            Criterion::Detectability => m < 1.0 - UNIT_CIRCLE_TOL,
            Criterion::BoundaryAvoidance => (m - 1.0).abs() > UNIT_CIRCLE_TOL,
        }
    });
    Ok(LqVerdict {
        mode: problem.mode.name(),
        unobservable: spectrum.eigenvalues,
        strictly_dissipative,
        criterion,
        equilibrium,
        warning: spectrum.warning,
    })
}

/// `W ≥ 0` with `W ≤ α1(‖x − x^e‖)` and
/// `W(f(x,u)) − W(x) ≤ −α2(‖x − x^e‖) + α3(ℓ(x,u))`.
#[derive(Clone)]
pub struct DetectabilityWitness {
    pub w: StorageFn,
    pub alpha1: ComparisonFunction,
    pub alpha2: ComparisonFunction,
    pub alpha3: ComparisonFunction,
}

impl fmt::Debug for DetectabilityWitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DetectabilityWitness")
            .field("alpha1", &self.alpha1)
            .field("alpha2", &self.alpha2)
            .field("alpha3", &self.alpha3)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectabilityReport {
    pub checked_states: usize,
    pub checked_pairs: usize,
    pub skipped_pairs: usize,
    /// `min W` over state samples.
    pub min_w: f64,
    /// `max W − α1` over state samples.
    pub worst_upper_margin: f64,
    /// `max W∘f − W + α2 − α3∘ℓ` over admissible pairs.
    pub worst_decrease_margin: f64,
    pub worst_pair: Option<(Vec<f64>, Vec<f64>)>,
    pub passed: bool,
}

pub fn check_detectability(
    system: &ControlSystem,
    eq: &Equilibrium,
    witness: &DetectabilityWitness,
    samples: &Grid,
) -> Result<DetectabilityReport> {
    samples.check_matches(system)?;
    let ce = system.cost(&eq.state, &eq.control);
    if ce.abs() > DETECTABILITY_TOL {
        return Err(Error::Precondition(format!("stage cost at the equilibrium is {ce}, not 0")));
    }
    let states = samples.state.points();
    let controls = samples.control.points();
    let nc = controls.len();

    let pairs: Vec<Option<(f64, f64)>> = (0..states.len() * nc)
        .into_par_iter()
        .map(|pair| {
            let (x, u) = (&states[pair / nc], &controls[pair % nc]);
            let l = system.cost(x, u);
            let y = system.step(x, u);
            if !system.state_box().contains(&y) || l == f64::INFINITY {
                return None;
            }
            let r = euclidean_distance(x, &eq.state);
            let margin = (witness.w)(&y) - (witness.w)(x) + witness.alpha2.eval(r) - witness.alpha3.eval(l.max(0.0));
            Some((l, margin))
        })
        .collect();
    if let Some((pair, (l, _))) = pairs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|v| (i, v)))
        .find(|(_, (l, _))| *l < -DETECTABILITY_TOL)
    {
        return Err(Error::Precondition(format!(
            "stage cost {l} < 0 at x={:?}, u={:?}",
            states[pair / nc],
            controls[pair % nc]
        )));
    }

    let mut min_w = f64::INFINITY;
    let mut worst_upper = f64::NEG_INFINITY;
    for x in &states {
        let w = (witness.w)(x);
        min_w = min_w.min(w);
        worst_upper = worst_upper.max(w - witness.alpha1.eval(euclidean_distance(x, &eq.state)));
    }
    let mut worst = f64::NEG_INFINITY;
    let mut worst_pair = None;
    let mut checked = 0;
    for (pair, p) in pairs.iter().enumerate() {
        if let Some((_, margin)) = p {
            checked += 1;
            if *margin > worst || worst_pair.is_none() {
                worst = *margin;
                worst_pair = Some((states[pair / nc].clone(), controls[pair % nc].clone()));
            }
        }
    }
    let passed = min_w >= -DETECTABILITY_TOL && worst_upper <= DETECTABILITY_TOL && worst <= DETECTABILITY_TOL;
    Ok(DetectabilityReport {
        checked_states: states.len(),
        checked_pairs: checked,
        skipped_pairs: pairs.len() - checked,
        min_w,
        worst_upper_margin: worst_upper,
        worst_decrease_margin: worst,
        worst_pair,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissipativity::{rotated_cost, StorageCandidate};
    use crate::system::preset;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    fn moduli(s: &Spectrum) -> Vec<f64> {
        s.eigenvalues.iter().map(|e| e.modulus()).collect()
    }

    #[test]
    fn scalar_cases() {
        let s = unobservable_eigenvalues(&m(1, 1, &[2.0]), &m(1, 1, &[0.0])).unwrap();
        assert_eq!(s.eigenvalues.len(), 1);
        assert!((s.eigenvalues[0].re - 2.0).abs() < 1e-12 && s.eigenvalues[0].mult == 1);
        let s = unobservable_eigenvalues(&m(1, 1, &[2.0]), &m(1, 1, &[1.0])).unwrap();
        assert!(s.eigenvalues.is_empty());
    }

    #[test]
    fn hidden_mode() {
        let a = m(2, 2, &[0.5, 0.0, 0.0, 3.0]);
        let c = m(1, 2, &[1.0, 0.0]);
        let s = unobservable_eigenvalues(&a, &c).unwrap();
        assert_eq!(moduli(&s).len(), 1);
        assert!((s.eigenvalues[0].re - 3.0).abs() < 1e-12);
        let k = kalman_unobservable_eigenvalues(&a, &c).unwrap();
        assert!((k.eigenvalues[0].re - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_and_jordan_block() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let a = m(3, 3, &[1.2 * c, -1.2 * s, 0.0, 1.2 * s, 1.2 * c, 0.0, 0.0, 0.0, 0.4]);
        let cm = m(1, 3, &[0.0, 0.0, 1.0]);
        let spectrum = unobservable_eigenvalues(&a, &cm).unwrap();
        assert_eq!(spectrum.eigenvalues.len(), 2);
        assert!(spectrum.eigenvalues[0].im != 0.0);
        assert!(spectrum.eigenvalues.iter().all(|e| (e.modulus() - 1.2).abs() < 1e-10));

        let jordan = m(2, 2, &[0.9, 1.0, 0.0, 0.9]);
        let spectrum = unobservable_eigenvalues(&jordan, &m(1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(spectrum.eigenvalues.len(), 1);
        assert_eq!(spectrum.eigenvalues[0].mult, 2);
        // Observing the chain's head is enough to see both.
        let spectrum = unobservable_eigenvalues(&jordan, &m(1, 2, &[1.0, 0.0])).unwrap();
        assert!(spectrum.eigenvalues.is_empty());
    }

    #[test]
    fn classification_of_the_invariance_example() {
        let bounded = ConstraintMode::BoundedInterior { lower: vec![-2.0], upper: vec![2.0], equilibrium: None };
        let v = lq_strict_dissipativity(&LqProblem::scalar(2.0, 1.0, 0.0, 1.0, bounded.clone())).unwrap();
        assert!(v.strictly_dissipative);
        assert_eq!(v.equilibrium, Some(vec![0.0]));
        let v = lq_strict_dissipativity(&LqProblem::scalar(2.0, 1.0, 0.0, 1.0, ConstraintMode::Unconstrained)).unwrap();
        assert!(!v.strictly_dissipative);
        for mode in [bounded, ConstraintMode::Unconstrained] {
            let v = lq_strict_dissipativity(&LqProblem::scalar(1.0, 1.0, 0.0, 1.0, mode)).unwrap();
            assert!(!v.strictly_dissipative);
        }
    }

    #[test]
    fn refusals() {
        let p = LqProblem::scalar(2.0, 1.0, 0.0, 0.0, ConstraintMode::Unconstrained);
        assert!(matches!(lq_strict_dissipativity(&p), Err(Error::Unsupported(_))));
        let mut p = LqProblem::scalar(2.0, 1.0, 0.0, 1.0, ConstraintMode::Unconstrained);
        p.s = Some(m(1, 1, &[0.5]));
        assert!(matches!(lq_strict_dissipativity(&p), Err(Error::Unsupported(_))));
        let edge = ConstraintMode::BoundedInterior { lower: vec![0.0], upper: vec![2.0], equilibrium: None };
        assert!(matches!(
            lq_strict_dissipativity(&LqProblem::scalar(2.0, 1.0, 0.0, 1.0, edge)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn verdict_json_shape() {
        let v = lq_strict_dissipativity(&LqProblem::scalar(2.0, 1.0, 0.0, 1.0, ConstraintMode::Unconstrained)).unwrap();
        let j = v.to_json();
        assert_eq!(j["mode"], "unconstrained");
        assert_eq!(j["unobservable"][0]["mult"], 1);
        assert_eq!(j["verdict"]["strictly_dissipative"], false);
    }

    fn witness(w: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, a3: f64) -> DetectabilityWitness {
        DetectabilityWitness {
            w: Arc::new(w),
            alpha1: ComparisonFunction::quadratic(1.0).unwrap(),
            alpha2: ComparisonFunction::quadratic(5.0 / 6.0).unwrap(),
            alpha3: ComparisonFunction::power(a3, 1.0).unwrap(),
        }
    }

    #[test]
    fn rotated_invariance_detectability() {
        let sys = preset("invariance").unwrap();
        let eq = Equilibrium::new(&sys, vec![0.0], vec![0.0]);
        let rot = rotated_cost(&sys, &StorageCandidate::quadratic(vec![vec![-1.0]], vec![0.0], 2.0), &eq);
        let grid = Grid::uniform(&sys, 81, 81).unwrap();
        // W(f) − W = ℓ̃ − u², so α3(r) = r leaves −u² ≤ −(5/6)x², false at u = 0.
        let tight = check_detectability(&rot, &eq, &witness(|x| x[0] * x[0] / 2.0, 1.0), &grid).unwrap();
        assert!(!tight.passed);
        assert!(tight.worst_decrease_margin > 0.5);
        let relaxed = check_detectability(&rot, &eq, &witness(|x| x[0] * x[0] / 2.0, 2.0), &grid).unwrap();
        assert!(relaxed.passed, "{relaxed:?}");
    }

    #[test]
    fn zero_witness_and_precondition() {
        let sys = preset("invariance").unwrap();
        let eq = Equilibrium::new(&sys, vec![0.0], vec![0.0]);
        let grid = Grid::uniform(&sys, 21, 21).unwrap();
        let rot = rotated_cost(&sys, &StorageCandidate::quadratic(vec![vec![-1.0]], vec![0.0], 2.0), &eq);
        let mut w = witness(|_| 0.0, 2.0);
        w.alpha2 = ComparisonFunction::quadratic(0.5).unwrap();
        assert!(check_detectability(&rot, &eq, &w, &grid).unwrap().passed);
        let shifted = sys.shifted(-1.0);
        assert!(matches!(
            check_detectability(&shifted, &eq, &w, &grid),
            Err(Error::Precondition(_))
        ));
    }
}
