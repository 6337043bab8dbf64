//! Optimal equilibrium `min ℓ(x,u) s.t. f(x,u) = x`: grid search, then a
//! finite-difference Newton iteration on the KKT system of the Lagrangian
//! `L = ℓ(x,u) + pᵀ(f(x,u) − x)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::StorageCandidate;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::system::{euclidean_norm, ControlSystem, Equilibrium, CONSISTENCY_TOL};

const NEWTON_ITERATIONS: usize = 60;
const STATIONARITY_TOL: f64 = 1e-9;

/// Pairs `(x,u)` stacked into `z`.
struct Kkt<'a> {
    system: &'a ControlSystem,
    n: usize,
}

impl Kkt<'_> {
    fn split<'z>(&self, z: &'z [f64]) -> (&'z [f64], &'z [f64]) {
        z.split_at(self.n)
    }

    fn cost(&self, z: &[f64]) -> f64 {
        let (x, u) = self.split(z);
        self.system.cost(x, u)
    }

    /// `g(z) = f(x,u) − x`
    fn residual(&self, z: &[f64]) -> Vec<f64> {
        let (x, u) = self.split(z);
        let mut g = self.system.step(x, u);
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi -= xi;
        }
        g
    }

    fn lagrangian(&self, z: &[f64], p: &[f64]) -> f64 {
        let g = self.residual(z);
        self.cost(z) + p.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
    }

    fn gradient(&self, f: &dyn Fn(&[f64]) -> f64, z: &[f64]) -> Option<DVector<f64>> {
        let mut grad = DVector::zeros(z.len());
        let mut w = z.to_vec();
        for i in 0..z.len() {
            let h = 1e-6 * z[i].abs().max(1.0);
            w[i] = z[i] + h;
            let fp = f(&w);
            w[i] = z[i] - h;
            let fm = f(&w);
            w[i] = z[i];
            if !(fp.is_finite() && fm.is_finite()) {
                return None;
            }
            grad[i] = (fp - fm) / (2.0 * h);
        }
        Some(grad)
    }

    /// Rows are `∂g_i/∂z`.
    fn jacobian(&self, z: &[f64]) -> Option<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(self.n, z.len());
        let mut w = z.to_vec();
        for j in 0..z.len() {
            let h = 1e-6 * z[j].abs().max(1.0);
            w[j] = z[j] + h;
            let gp = self.residual(&w);
            w[j] = z[j] - h;
            let gm = self.residual(&w);
            w[j] = z[j];
            for i in 0..self.n {
                let d = (gp[i] - gm[i]) / (2.0 * h);
                if !d.is_finite() {
                    return None;
                }
                jac[(i, j)] = d;
            }
        }
        Some(jac)
    }

    fn hessian(&self, z: &[f64], p: &[f64]) -> Option<DMatrix<f64>> {
        let dim = z.len();
        let mut hess = DMatrix::zeros(dim, dim);
        let mut w = z.to_vec();
        let l = |w: &[f64]| self.lagrangian(w, p);
        for i in 0..dim {
            let hi = 1e-4 * z[i].abs().max(1.0);
            for j in i..dim {
                let hj = 1e-4 * z[j].abs().max(1.0);
                let mut eval = |si: f64, sj: f64| {
                    w[i] += si * hi;
                    w[j] += sj * hj;
                    let v = l(&w);
                    w[i] = z[i];
                    w[j] = z[j];
                    v
                };
                let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * hi * hj);
                if !v.is_finite() {
                    return None;
                }
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        Some(hess)
    }

    /// Least-squares multiplier for `∇ℓ + Jᵀp = 0`.
    fn multiplier(&self, z: &[f64]) -> Option<Vec<f64>> {
        let grad = self.gradient(&|w| self.cost(w), z)?;
        let jac = self.jacobian(z)?;
        let jt = jac.transpose();
        let p = jt.svd(true, true).solve(&(-grad), 1e-12).ok()?;
        Some(p.iter().copied().collect())
    }

    /// `(‖∇_z L‖, ‖g‖)`
    fn kkt_norms(&self, z: &[f64], p: &[f64]) -> Option<(f64, f64)> {
        let grad = self.gradient(&|w| self.lagrangian(w, p), z)?;
        Some((grad.norm(), euclidean_norm(&self.residual(z))))
    }
}

/// Grid search over near-fixed-point pairs, then KKT refinement. Falls back
/// to the best grid pair with `degraded = true` when Newton fails.
pub fn optimal_equilibrium(system: &ControlSystem, grid: &Grid) -> Result<Equilibrium> {
    grid.check_matches(system)?;
    if grid.state.is_empty() || grid.control.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    let n = system.state_dim();
    let diag = |steps: Vec<f64>| steps.iter().map(|h| h * h).sum::<f64>().sqrt();
    let tol = diag(grid.state.axes().iter().map(|a| a.step()).collect())
        + diag(grid.control.axes().iter().map(|a| a.step()).collect())
        + CONSISTENCY_TOL;
    let controls = grid.control.points();

    let best = (0..grid.state.len())
        .into_par_iter()
        .filter_map(|i| {
            let x = grid.state.point(i);
            let mut local: Option<(f64, f64, usize)> = None;
            for (j, u) in controls.iter().enumerate() {
                let c = system.cost(&x, u);
                if !c.is_finite() {
                    continue;
                }
                let r = crate::system::euclidean_distance(&system.step(&x, u), &x);
                if r > tol {
                    continue;
                }
                if local.is_none_or(|(bc, br, _)| (c, r) < (bc, br)) {
                    local = Some((c, r, j));
                }
            }
            local.map(|(c, r, j)| (c, r, i, j))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then((a.2, a.3).cmp(&(b.2, b.3))));
    let Some((_, _, i, j)) = best else {
        return Err(Error::Infeasible {
            layer: 0,
            detail: "no fixed point of the dynamics with finite cost on the grid".into(),
        });
    };
    let mut z0 = grid.state.point(i);
    z0.extend_from_slice(&controls[j]);

    let kkt = Kkt { system, n };
    if let Some((z, p)) = newton(&kkt, &z0) {
        let (x, u) = z.split_at(n);
        let mut eq = Equilibrium::new(system, x.to_vec(), u.to_vec());
        eq.multiplier = Some(p);
        return Ok(eq);
    }
    let (x, u) = z0.split_at(n);
    let mut eq = Equilibrium::new(system, x.to_vec(), u.to_vec());
    eq.multiplier = kkt.multiplier(&z0);
    eq.degraded = true;
    Ok(eq)
}

fn newton(kkt: &Kkt<'_>, z0: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let system = kkt.system;
    let n = kkt.n;
    let dim = z0.len();
    let inside = |z: &[f64]| {
        let (x, u) = z.split_at(n);
        system.state_box().contains(x) && system.control_box().contains(u)
    };
    let mut z = z0.to_vec();
    let mut p = kkt.multiplier(&z)?;
    let merit = |z: &[f64], p: &[f64]| kkt.kkt_norms(z, p).map(|(a, b)| a + b);
    let mut current = merit(&z, &p)?;

    for _ in 0..NEWTON_ITERATIONS {
        let (stat, feas) = kkt.kkt_norms(&z, &p)?;
        if stat <= STATIONARITY_TOL && feas <= CONSISTENCY_TOL * 1e-3 {
            break;
        }
        let grad_l = kkt.gradient(&|w| kkt.lagrangian(w, &p), &z)?;
        let hess = kkt.hessian(&z, &p)?;
        let jac = kkt.jacobian(&z)?;
        let g = DVector::from_vec(kkt.residual(&z));

        let mut mat = DMatrix::zeros(dim + n, dim + n);
        mat.view_mut((0, 0), (dim, dim)).copy_from(&hess);
        mat.view_mut((0, dim), (dim, n)).copy_from(&jac.transpose());
        mat.view_mut((dim, 0), (n, dim)).copy_from(&jac);
        let mut rhs = DVector::zeros(dim + n);
        rhs.rows_mut(0, dim).copy_from(&(-grad_l));
        rhs.rows_mut(dim, n).copy_from(&(-g));
        let step = mat.lu().solve(&rhs)?;

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let zt: Vec<f64> = (0..dim).map(|i| z[i] + t * step[i]).collect();
            let pt: Vec<f64> = (0..n).map(|i| p[i] + t * step[dim + i]).collect();
            if inside(&zt) {
                if let Some(m) = merit(&zt, &pt) {
                    if m < current || m <= STATIONARITY_TOL {
                        z = zt;
                        p = pt;
                        current = m;
                        accepted = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let (stat, _) = kkt.kkt_norms(&z, &p)?;
    let (x, u) = z.split_at(n);
    let residual = crate::system::euclidean_distance(&system.step(x, u), x);
    if residual <= CONSISTENCY_TOL && stat <= 1e-6 && inside(&z) {
        // Re-estimate p at the final point; the Newton iterate lags one step.
        let p = kkt.multiplier(&z).unwrap_or(p);
        Some((z, p))
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexityProbe {
    pub sampled_points: usize,
    /// Largest `ℓ((a+b)/2) − (ℓ(a)+ℓ(b))/2` over finite pairs.
    pub worst_midpoint_gap: f64,
    /// Largest `‖f((a+b)/2) − (f(a)+f(b))/2‖`.
    pub worst_affine_residual: f64,
    pub convex_cost: bool,
    pub affine_dynamics: bool,
}

/// Midpoint tests of convexity of `ℓ` and affinity of `f` on a coarse
/// sub-grid of `𝕏×𝕌` (at most about 400 points).
pub fn probe_convexity(system: &ControlSystem) -> ConvexityProbe {
    let dim = system.state_dim() + system.control_dim();
    let per_axis = ((400f64).powf(1.0 / dim as f64).floor() as usize).max(2);
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for (lo, hi) in system
        .state_box()
        .lower()
        .iter()
        .zip(system.state_box().upper())
        .chain(system.control_box().lower().iter().zip(system.control_box().upper()))
    {
        axes.push(
            (0..per_axis)
                .map(|k| lo + (hi - lo) * k as f64 / (per_axis - 1) as f64)
                .collect(),
        );
    }
    let total = per_axis.pow(dim as u32);
    let points: Vec<Vec<f64>> = (0..total)
        .map(|mut idx| {
            let mut z = vec![0.0; dim];
            for d in (0..dim).rev() {
                z[d] = axes[d][idx % per_axis];
                idx /= per_axis;
            }
            z
        })
        .collect();
    let n = system.state_dim();
    let evals: Vec<(f64, Vec<f64>)> = points
        .iter()
        .map(|z| (system.cost(&z[..n], &z[n..]), system.step(&z[..n], &z[n..])))
        .collect();

    let (gap, aff) = (0..total)
        .into_par_iter()
        .map(|a| {
            let mut gap = f64::NEG_INFINITY;
            let mut aff: f64 = 0.0;
            for b in a + 1..total {
                let mid: Vec<f64> = points[a].iter().zip(&points[b]).map(|(p, q)| 0.5 * (p + q)).collect();
                let fm = system.step(&mid[..n], &mid[n..]);
                let dev: Vec<f64> = fm
                    .iter()
                    .zip(evals[a].1.iter().zip(&evals[b].1))
                    .map(|(m, (p, q))| m - 0.5 * (p + q))
                    .collect();
                let scale = 1.0 + euclidean_norm(&fm);
                aff = aff.max(euclidean_norm(&dev) / scale);
                let (ca, cb) = (evals[a].0, evals[b].0);
                if ca.is_finite() && cb.is_finite() {
                    let cm = system.cost(&mid[..n], &mid[n..]);
                    let g = (cm - 0.5 * (ca + cb)) / (1.0 + ca.abs().max(cb.abs()));
                    gap = gap.max(if g.is_nan() { f64::INFINITY } else { g });
                }
            }
            (gap, aff)
        })
        .reduce(|| (f64::NEG_INFINITY, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));

    ConvexityProbe {
        sampled_points: total,
        worst_midpoint_gap: gap,
        worst_affine_residual: aff,
        convex_cost: gap <= 1e-9,
        affine_dynamics: aff <= 1e-9,
    }
}

/// `λ(x) = −pᵀx` for affine dynamics and convex cost, with `D` taken from
/// the vertices of `𝕏`. `None` when the probe or the multiplier is missing.
pub fn offer_linear_storage(system: &ControlSystem, eq: &Equilibrium) -> Option<StorageCandidate> {
    let p = eq.multiplier.as_ref()?;
    let probe = probe_convexity(system);
    if !(probe.convex_cost && probe.affine_dynamics) {
        return None;
    }
    let q: Vec<f64> = p.iter().map(|v| -v).collect();
    let bx = system.state_box();
    // A linear function attains its minimum over a box at the coordinatewise
    // vertex picked by the sign of each coefficient.
    let min: f64 = q
        .iter()
        .enumerate()
        .map(|(d, &c)| if c >= 0.0 { c * bx.lower()[d] } else { c * bx.upper()[d] })
        .sum();
    Some(StorageCandidate::linear(q, (-min).max(0.0)))
}
