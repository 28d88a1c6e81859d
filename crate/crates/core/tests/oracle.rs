mod common;

use common::{grid_minimum, small_qp};
use deeplde::oracle::{solve_reference, verify_prop2, verify_prop2_at};
use deeplde::problems::{generate_instance, ObjectiveKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn reference_matches_grid_on_small_qps() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..20 {
        let inst = small_qp(i);
        let d: Vec<f64> = (0..inst.n_eq).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sol = solve_reference(&inst, &d).unwrap();
        let grid = grid_minimum(&inst, &d, 2.0);
        assert!(
            (sol.objective_value - grid).abs() <= 1e-3,
            "instance {i}: oracle {} grid {grid}",
            sol.objective_value
        );
        assert!(sol.kkt_residual <= 1e-6);
    }
}

#[test]
fn reference_points_are_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in [ObjectiveKind::Quadratic, ObjectiveKind::SinNonconvex, ObjectiveKind::NonlinearEq] {
        for seed in 0..3 {
            let inst = generate_instance(15, 6, 8, kind, seed).unwrap();
            let d: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sol = solve_reference(&inst, &d).unwrap();
            assert!(inst.eq_residual(&d, &sol.y_star).unwrap().iter().all(|v| v.abs() <= 1e-7));
            assert!(inst.ineq_violation(&sol.y_star).unwrap().iter().all(|&v| v <= 1e-7));
            assert!((inst.objective(&sol.y_star).unwrap() - sol.objective_value).abs() <= 1e-12);
        }
    }
}

#[test]
fn monte_carlo_matches_diagonal_form_for_linear_h() {
    let inst = generate_instance(10, 5, 3, ObjectiveKind::Quadratic, 21).unwrap();
    let d = [0.2, -0.4, 0.6, 0.1, -0.9];
    let rep = verify_prop2(&inst, &d, 1e-3, 100_000, 3).unwrap();
    assert!(rep.relative_gap <= 0.02, "{rep:?}");
    // Twice the sampling standard error covers the gap with high probability.
    assert!((rep.mc_estimate - rep.closed_form_diag).abs() <= 4.0 * rep.standard_error + 1e-15);
    assert!(rep.closed_form_nuclear > 0.0);
}

#[test]
fn monte_carlo_matches_for_nonlinear_h_at_small_sigma() {
    let inst = generate_instance(10, 5, 3, ObjectiveKind::NonlinearEq, 22).unwrap();
    let d = [0.3, 0.1, -0.2, 0.5, -0.5];
    let rep = verify_prop2(&inst, &d, 1e-4, 100_000, 4).unwrap();
    assert!(rep.relative_gap <= 0.02, "{rep:?}");
}

#[test]
fn expectation_is_linear_in_sigma() {
    let inst = generate_instance(8, 4, 2, ObjectiveKind::Quadratic, 23).unwrap();
    let d = [0.1, 0.2, 0.3, 0.4];
    let y = solve_reference(&inst, &d).unwrap().y_star;
    let a = verify_prop2_at(&inst, &d, &y, 1e-3, 50_000, 5).unwrap();
    let b = verify_prop2_at(&inst, &d, &y, 2e-3, 50_000, 6).unwrap();
    let se = (b.standard_error.powi(2) + 4.0 * a.standard_error.powi(2)).sqrt();
    assert!((b.mc_estimate - 2.0 * a.mc_estimate).abs() <= 3.0 * se);
}

#[test]
fn perturbed_optimum_violates_equalities() {
    for kind in [ObjectiveKind::Quadratic, ObjectiveKind::SinNonconvex, ObjectiveKind::NonlinearEq] {
        let inst = generate_instance(8, 4, 3, kind, 24).unwrap();
        let d = [0.5, -0.5, 0.25, 0.0];
        let rep = verify_prop2(&inst, &d, 1e-3, 10_000, 7).unwrap();
        assert!(rep.mc_estimate > 3.0 * rep.standard_error, "{kind:?}: {rep:?}");
    }
}

#[test]
fn prop2_is_deterministic_per_seed() {
    let inst = generate_instance(6, 3, 2, ObjectiveKind::Quadratic, 25).unwrap();
    let d = [0.1, 0.0, -0.1];
    let a = verify_prop2(&inst, &d, 1e-3, 10_000, 8).unwrap();
    let b = verify_prop2(&inst, &d, 1e-3, 10_000, 8).unwrap();
    assert_eq!(a, b);
}
