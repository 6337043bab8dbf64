//! Property suites for invariants that hold on every instance, not just the
//! presets.

use nalgebra::DMatrix;
use proptest::prelude::*;

use turnpike_core::dissipativity::{
    available_storage, check_strict_dissipativity, check_strict_dissipativity_with, turnpike_lower_bound_certificate,
    AlphaArgument, CheckMode, CheckOptions, StorageCandidate, SupplyRate,
};
use turnpike_core::dp::{DpSolver, TerminalConditions};
use turnpike_core::grid::{Grid, Interpolation};
use turnpike_core::lq::{kalman_unobservable_eigenvalues, unobservable_eigenvalues, Spectrum};
use turnpike_core::system::{
    check_admissible, preset, simulate, trajectory_cost, BoxSet, ComparisonFunction, ControlSystem, Equilibrium,
    ScalarAffine, Trajectory,
};
use turnpike_core::turnpike::{envelope_check, envelope_q_bound, q_measure};

fn affine() -> impl Strategy<Value = ControlSystem> {
    (-2.0..2.0f64, 0.2..1.5f64, -0.3..0.3f64, 0.0..2.0f64, 0.1..2.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(
        |(a, b, c, q2, r2, q1, r1)| {
            ScalarAffine { a, b, c, q2, r2, q1, r1 }.into_system(
                "affine",
                BoxSet::interval(-2.0, 2.0).unwrap(),
                BoxSet::interval(-1.0, 1.0).unwrap(),
            )
        },
    )
}

fn invariance() -> (ControlSystem, Equilibrium) {
    let sys = preset("invariance").unwrap();
    let eq = Equilibrium::new(&sys, vec![0.0], vec![0.0]);
    (sys, eq)
}

fn same_spectrum(a: &Spectrum, b: &Spectrum, tol: f64) -> bool {
    let mult = |s: &Spectrum| s.eigenvalues.iter().map(|e| e.mult).sum::<usize>();
    if mult(a) != mult(b) {
        return false;
    }
    // Compare as multisets by matching each eigenvalue of `a` in `b`.
    a.eigenvalues.iter().all(|e| {
        b.eigenvalues
            .iter()
            .any(|f| (e.re - f.re).abs() <= tol && (e.im - f.im).abs() <= tol && e.mult == f.mult)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shifting_the_cost_keeps_the_optimizer(sys in affine(), shift in -5.0..5.0f64, t in 1usize..5, i0 in 0usize..21) {
        let grid = Grid::uniform(&sys, 21, 9).unwrap();
        let x0 = [grid.state.axes()[0].node(i0)];
        let base = DpSolver::with_interpolation(&sys, &grid, Interpolation::Nearest).unwrap();
        let moved = DpSolver::with_interpolation(&sys.shifted(shift), &grid, Interpolation::Nearest).unwrap();
        match (base.solve(&x0, t, &TerminalConditions::none()), moved.solve(&x0, t, &TerminalConditions::none())) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a.controls, &b.controls);
                let gap = a.diagnostics.table_value - b.diagnostics.table_value;
                prop_assert!((gap - t as f64 * shift).abs() <= 1e-9 * (1.0 + a.diagnostics.table_value.abs()));
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "feasibility differs: {:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn grid_values_obey_the_principle_of_optimality(sys in affine(), t in 2usize..6, i0 in 0usize..21) {
        let grid = Grid::uniform(&sys, 21, 9).unwrap();
        let solver = DpSolver::with_interpolation(&sys, &grid, Interpolation::Nearest).unwrap();
        let table = solver.value_table(t, &TerminalConditions::none()).unwrap();
        let x0 = grid.state.point(i0);
        let v = table.value_at(t, &x0);
        prop_assume!(v.is_finite());
        let u = grid.control.point(table.argmin(t, i0).unwrap());
        let next = grid.state.point(grid.state.nearest_index(&sys.step(&x0, &u)).unwrap());
        let tail = table.value_at(t - 1, &next);
        prop_assert_eq!(v, sys.cost(&x0, &u) + tail);
    }

    #[test]
    fn trajectory_cost_is_additive(sys in affine(), us in prop::collection::vec(-1.0..1.0f64, 2..8), split in 0usize..8) {
        let controls: Vec<Vec<f64>> = us.iter().map(|u| vec![*u]).collect();
        let traj = simulate(&sys, &[0.1], &controls).unwrap();
        prop_assume!(check_admissible(&sys, &traj).admissible);
        let tau = split.min(traj.horizon());
        let whole = trajectory_cost(&sys, &traj).unwrap();
        let parts = trajectory_cost(&sys, &traj.window(0, tau)).unwrap()
            + trajectory_cost(&sys, &traj.window(tau, traj.horizon())).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-12 * (1.0 + whole.abs()));
    }

    #[test]
    fn q_count_shrinks_as_epsilon_grows(xs in prop::collection::vec(-3.0..3.0f64, 2..30), e1 in 0.01..2.0f64, grow in 0.0..2.0f64) {
        let states: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
        let controls = vec![vec![0.0]; states.len() - 1];
        let traj = Trajectory::new(states, controls).unwrap();
        let small = q_measure(&traj, &[0.0], e1).unwrap();
        let large = q_measure(&traj, &[0.0], e1 + grow).unwrap();
        prop_assert!(large.q_count <= small.q_count);
        prop_assert!(large.q_set.iter().all(|t| small.q_set.contains(t)));
        prop_assert!(small.approach_arc_len + small.leaving_arc_len <= small.q_count + traj.horizon() + 1);
    }

    #[test]
    fn envelope_implies_q_bound(
        c in 0.1..5.0f64,
        sigma in 0.05..3.0f64,
        horizon in 1usize..60,
        eps in 0.01..1.0f64,
        shrink in prop::collection::vec(0.0..1.0f64, 61),
    ) {
        // Any trajectory under the envelope.
        let states: Vec<Vec<f64>> = (0..=horizon)
            .map(|t| {
                let env = c * ((-sigma * t as f64).exp() + (-sigma * (horizon - t) as f64).exp());
                vec![shrink[t] * env]
            })
            .collect();
        let traj = Trajectory::new(states, vec![vec![0.0]; horizon]).unwrap();
        prop_assert!(envelope_check(&traj, &[0.0], c, sigma).unwrap().satisfied);
        let report = q_measure(&traj, &[0.0], eps).unwrap();
        prop_assert!(report.q_count <= envelope_q_bound(c, sigma, eps));
    }

    #[test]
    fn unobservable_spectrum_ignores_output_scaling(
        entries in prop::collection::vec(-2.0..2.0f64, 9),
        crow in prop::collection::vec(-1.0..1.0f64, 3),
        scale in prop::sample::select(vec![-3.0, -0.5, 0.25, 2.0, 10.0]),
    ) {
        let a = DMatrix::from_row_slice(3, 3, &entries);
        let c = DMatrix::from_row_slice(1, 3, &crow);
        let base = unobservable_eigenvalues(&a, &c).unwrap();
        let scaled = unobservable_eigenvalues(&a, &(&c * scale)).unwrap();
        prop_assert!(same_spectrum(&base, &scaled, 1e-6), "{base:?} vs {scaled:?}");
    }

    #[test]
    fn pbh_agrees_with_kalman_decomposition(
        diag in prop::collection::vec(prop::sample::select(vec![-1.5, -0.5, 0.3, 0.9, 2.0]), 3),
        mask in prop::collection::vec(any::<bool>(), 3),
    ) {
        // Distinct-enough diagonal modes, observed exactly where the mask says.
        let mut d = diag.clone();
        d.sort_by(f64::total_cmp);
        d.dedup();
        prop_assume!(d.len() == 3);
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag.clone()));
        let c = DMatrix::from_row_slice(1, 3, &mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect::<Vec<_>>());
        let pbh = unobservable_eigenvalues(&a, &c).unwrap();
        let kalman = kalman_unobservable_eigenvalues(&a, &c).unwrap();
        prop_assert!(same_spectrum(&pbh, &kalman, 1e-6), "{pbh:?} vs {kalman:?}");
        let hidden = mask.iter().filter(|m| !**m).count();
        prop_assert_eq!(pbh.eigenvalues.iter().map(|e| e.mult).sum::<usize>(), hidden);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn certificate_slack_is_nonnegative_on_certified_runs(x0 in -2.0..2.0f64, t in 1usize..12) {
        let (sys, eq) = invariance();
        let grid = Grid::uniform(&sys, 101, 121).unwrap();
        let storage = StorageCandidate::quadratic(vec![vec![-1.0]], vec![0.0], 2.0);
        let alpha = ComparisonFunction::quadratic(5.0 / 6.0).unwrap();
        let report = check_strict_dissipativity(&sys, &storage, Some(&alpha), &eq, &grid).unwrap();
        prop_assert!(report.certified());
        let x0 = [grid.state.point(grid.state.nearest_index(&[x0]).unwrap())[0]];
        let sol = DpSolver::new(&sys, &grid).unwrap().solve(&x0, t, &TerminalConditions::none()).unwrap();
        let cert = turnpike_lower_bound_certificate(&sys, &storage, &alpha, &eq, &report, &sol).unwrap();
        prop_assert!(cert.slack >= -1e-6);
    }

    #[test]
    fn converged_available_storage_certifies_itself(c in 0.1..0.8f64) {
        let (sys, eq) = invariance();
        let grid = Grid::uniform(&sys, 81, 121).unwrap();
        let alpha = ComparisonFunction::quadratic(c).unwrap();
        let table = available_storage(&sys, &SupplyRate::from_equilibrium(&eq), Some(&alpha), &grid, 200).unwrap();
        prop_assume!(table.converged());
        // Grid-point storage values are checked on the grid they were built on.
        let options = CheckOptions { tolerance: 1e-6, argument: AlphaArgument::State, finite_storage_only: true };
        let report = check_strict_dissipativity_with(&sys, &table.candidate(), Some(&alpha), &eq, &grid, options).unwrap();
        prop_assert!(report.certified(), "worst {}", report.worst_violation);
    }

    #[test]
    fn positive_definite_supply_certifies_zero_storage(q2 in 0.1..2.0f64, r2 in 0.1..2.0f64, a in -1.5..1.5f64) {
        // ℓ = q₂x² + r₂u² at the origin equilibrium dominates q₂‖x‖².
        let sys = ScalarAffine { a, b: 1.0, c: 0.0, q2, r2, q1: 0.0, r1: 0.0 }.into_system(
            "pd",
            BoxSet::interval(-1.0, 1.0).unwrap(),
            BoxSet::interval(-1.0, 1.0).unwrap(),
        );
        let eq = Equilibrium::new(&sys, vec![0.0], vec![0.0]);
        let grid = Grid::uniform(&sys, 41, 41).unwrap();
        let alpha = ComparisonFunction::quadratic(q2).unwrap();
        let report = check_strict_dissipativity(&sys, &StorageCandidate::zero(1), Some(&alpha), &eq, &grid).unwrap();
        prop_assert_eq!(report.mode, CheckMode::Strict);
        prop_assert!(report.certified());
    }
}
