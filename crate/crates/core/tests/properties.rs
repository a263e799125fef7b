use bilevel_core::critical::{find_critical_points, ScanOptions};
use bilevel_core::diagnostics::{hessian_phi_k_at_crit, rate_fit};
use bilevel_core::linalg::is_symmetric;
use bilevel_core::lld::{gradient_step, inverse_orbit, lld_run, lld_run_jac, prox_inverse};
use bilevel_core::problem::{check_derivatives, quadratic_sc_with, tilt_problem};
use bilevel_core::{builtin_problem, TiltVector, BUILTIN_PROBLEMS};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(x)
}

fn problem_name() -> impl Strategy<Value = &'static str> {
    prop::sample::select(BUILTIN_PROBLEMS.to_vec())
}

fn unit() -> impl Strategy<Value = f64> {
    0.0..1.0f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tilts_compose_additively(a in -1.0..1.0f64, b in -1.0..1.0f64, x in -2.0..2.0f64, y in -2.0..2.0f64) {
        let p = builtin_problem("double_well_tilt").unwrap();
        let twice = tilt_problem(&tilt_problem(&p, &TiltVector::new(v(&[a])).unwrap()).unwrap(), &TiltVector::new(v(&[b])).unwrap()).unwrap();
        let once = tilt_problem(&p, &TiltVector::new(v(&[a + b])).unwrap()).unwrap();
        let (xv, yv) = (v(&[x]), v(&[y]));
        prop_assert_eq!(twice.g_grad_y(&xv, &yv), once.g_grad_y(&xv, &yv));
        prop_assert!((once.g(&xv, &yv) - (p.g(&xv, &yv) - (a + b) * y)).abs() <= 1e-12 * (1.0 + p.g(&xv, &yv).abs()));
        prop_assert_eq!(once.g_hess_yy(&xv, &yv), p.g_hess_yy(&xv, &yv));
    }

    #[test]
    fn lld_semigroup(name in problem_name(), ux in unit(), uz in unit(), i in 0usize..6, j in 0usize..6) {
        let p = builtin_problem(name).unwrap();
        let alpha = 0.5 / p.lipschitz_g.value;
        let x = p.x_box().from_unit(&[ux]);
        let z = p.y_box().from_unit(&[uz]);
        let first = lld_run(&p, &x, &z, alpha, i, false).unwrap().y_final;
        let split = lld_run(&p, &x, &first, alpha, j, false).unwrap().y_final;
        let whole = lld_run(&p, &x, &z, alpha, i + j, false).unwrap().y_final;
        prop_assert_eq!(split, whole);
    }

    #[test]
    fn jacobian_chain_rule(ux in unit(), uz in unit(), i in 1usize..5, j in 1usize..5) {
        let p = builtin_problem("double_well_tilt").unwrap();
        let alpha = 0.05;
        let x = p.x_box().from_unit(&[ux]);
        let z = p.y_box().from_unit(&[uz]);
        let a = lld_run_jac(&p, &x, &z, alpha, i).unwrap();
        let b = lld_run_jac(&p, &x, &a.y_final, alpha, j).unwrap();
        let whole = lld_run_jac(&p, &x, &z, alpha, i + j).unwrap();
        let c = b.c_k.as_ref().unwrap() * a.c_k.as_ref().unwrap();
        let d = b.c_k.as_ref().unwrap() * a.d_k.as_ref().unwrap() + b.d_k.as_ref().unwrap();
        prop_assert!((c - whole.c_k.unwrap()).amax() <= 1e-12);
        prop_assert!((d - whole.d_k.unwrap()).amax() <= 1e-12);
    }

    #[test]
    fn prox_inverts_a_gradient_step(name in problem_name(), ux in unit(), uw in unit()) {
        let p = builtin_problem(name).unwrap();
        let alpha = 0.5 / p.lipschitz_g.value;
        let x = p.x_box().from_unit(&[ux]);
        let w = p.y_box().from_unit(&[uw]);
        let u = gradient_step(&p, &x, &w, alpha);
        let z = prox_inverse(&p, &x, &u, alpha, 1e-12, 10_000).unwrap();
        prop_assert!((gradient_step(&p, &x, &z, alpha) - &u).norm() <= 1e-10);
        // contraction of the fixed-point map makes the preimage unique
        prop_assert!((z - w).norm() <= 1e-9);
    }

    #[test]
    fn hessians_are_symmetric(name in problem_name(), ux in unit(), uy in unit()) {
        let p = builtin_problem(name).unwrap();
        let x = p.x_box().from_unit(&[ux]);
        let y = p.y_box().from_unit(&[uy]);
        prop_assert!(is_symmetric(&p.f_hess(&x, &y), 1e-14));
        prop_assert!(is_symmetric(&p.g_hess_yy(&x, &y), 1e-14));
    }

    #[test]
    fn oracles_match_finite_differences(name in problem_name(), ux in unit(), uy in unit()) {
        let p = builtin_problem(name).unwrap();
        let x = p.x_box().from_unit(&[ux]);
        let y = p.y_box().from_unit(&[uy]);
        let report = check_derivatives(&p, &[(x, y)], 1e-5).unwrap();
        if report.flagged() == 0 {
            prop_assert!(report.worst() <= 1e-5, "{:?}", report.max_errors);
        }
    }

    #[test]
    fn congruence_preserves_inertia(m in prop::collection::vec(-2.0..2.0f64, 4), k in 0usize..12, alpha in 0.01..0.2f64) {
        // L_g = ‖I‖ = 1 for every coupling, so any α < 1 is admissible
        let p = quadratic_sc_with(DMatrix::from_row_slice(2, 2, &m));
        let (x, y) = (DVector::zeros(2), DVector::zeros(2));
        let z = inverse_orbit(&p, &x, &y, alpha, k, 1e-14, 1e9).unwrap().pop().unwrap_or(y);
        let h = hessian_phi_k_at_crit(&p, &x, &z, alpha, k, 1e-10).unwrap();
        prop_assert!(is_symmetric(&h.matrix, 1e-12));
        prop_assert_eq!(h.inertia, h.f_inertia);
    }

    #[test]
    fn rate_fit_recovers_planted_rate(rho in 0.3..0.97f64, c in 0.1..10.0f64, noise in prop::collection::vec(-0.01..0.01f64, 30)) {
        let series: Vec<f64> = noise.iter().enumerate().map(|(j, e)| c * rho.powi(j as i32) * (1.0 + e)).collect();
        let fit = rate_fit(&series).unwrap();
        prop_assert!((fit.rho_hat - rho).abs() <= 0.02 * rho, "{} vs {}", fit.rho_hat, rho);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn critical_points_are_distinct_and_reproducible(ux in unit(), seed in any::<u64>()) {
        let p = builtin_problem("double_well_tilt").unwrap();
        let x = p.x_box().from_unit(&[ux]);
        let opts = ScanOptions { seed, ..Default::default() };
        let a = find_critical_points(&p, &x, &p.y_box(), opts.n_starts, opts.seed, opts.tol).unwrap();
        let b = find_critical_points(&p, &x, &p.y_box(), opts.n_starts, opts.seed, opts.tol).unwrap();
        prop_assert_eq!(a.len(), 3);
        for (c, d) in a.iter().zip(&b) {
            prop_assert_eq!(&c.y, &d.y);
            prop_assert!(c.grad_norm <= opts.tol);
        }
        for w in a.windows(2) {
            prop_assert!((&w[1].y - &w[0].y).norm() > 10.0 * opts.tol);
        }
    }
}
