//! The k-step lower-level gradient map `𝒜ᵏ(x, z)`, forward propagation of
//! its Jacobians, the gradient of `φᵏ(x, z) = f(x, 𝒜ᵏ(x, z))`, and the
//! inverse of a single gradient step.
//!
//! Jacobians follow the forward recursions
//!
//! ```text
//! A_j = I − α ∂²_yy g(x, y_j),   B_j = −α ∂²_yx g(x, y_j)
//! C_{j+1} = A_j C_j,             D_{j+1} = A_j D_j + B_j
//! ```
//!
//! with `C_0 = I` and `D_0 = 0`, so only the current pair is kept.

use std::collections::BTreeSet;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::BilevelProblem;

/// Iterate norms above this count as divergence.
pub const DIVERGENCE_NORM: f64 = 1e8;
/// Default distance to a C¹-only kink below which Hessians are refused.
pub const DEFAULT_KINK_MARGIN: f64 = 1e-3;
pub const DEFAULT_PROX_TOL: f64 = 1e-10;
pub const DEFAULT_PROX_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone)]
pub struct LldResult {
    pub y_final: DVector<f64>,
    /// `y_0, …, y_k` when requested.
    pub trajectory: Option<Vec<DVector<f64>>>,
    /// `∂𝒜ᵏ/∂x`, `m × n`.
    pub d_k: Option<DMatrix<f64>>,
    /// `∂𝒜ᵏ/∂z`, `m × m`.
    pub c_k: Option<DMatrix<f64>>,
    pub k: usize,
    pub alpha_g: f64,
}

/// Value and gradients of `φᵏ` at `(x, z)`.
#[derive(Debug, Clone)]
pub struct PhiGradient {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub grad_z: DVector<f64>,
    /// `𝒜ᵏ(x, z)`, reused by callers that also need the inner iterate.
    pub y_final: DVector<f64>,
}

impl PhiGradient {
    /// Norm of the stacked gradient `(∇_x φᵏ, ∇_z φᵏ)`.
    pub fn norm(&self) -> f64 {
        (self.grad_x.norm_squared() + self.grad_z.norm_squared()).sqrt()
    }
}

/// Options for the Jacobian-propagating variants.
#[derive(Debug, Clone, Copy)]
pub struct JacobianOptions {
    pub kink_margin: f64,
}

impl Default for JacobianOptions {
    fn default() -> Self {
        Self { kink_margin: DEFAULT_KINK_MARGIN }
    }
}

fn check_step_size(p: &BilevelProblem, alpha_g: f64) -> Result<()> {
    if !(alpha_g > 0.0) || !alpha_g.is_finite() {
        return Err(Error::InvalidInput(format!("alpha_g must be positive, got {alpha_g}")));
    }
    let product = alpha_g * p.lipschitz_g.value;
    if product >= 1.0 {
        if p.lipschitz_g.exact {
            return Err(Error::StepSize { alpha_g, lipschitz: p.lipschitz_g.value });
        }
        // once per (problem, step): the check runs on every lower-level call
        static WARNED: Mutex<BTreeSet<(String, u64)>> = Mutex::new(BTreeSet::new());
        let fresh = WARNED.lock().map(|mut seen| seen.insert((p.name.clone(), alpha_g.to_bits()))).unwrap_or(true);
        if fresh {
            log::warn!("{}: alpha_g * L_g = {product} >= 1 with an estimated L_g; continuing", p.name);
        }
    }
    Ok(())
}

fn diverged(y: &DVector<f64>) -> bool {
    y.iter().any(|v| !v.is_finite()) || y.norm() > DIVERGENCE_NORM
}

/// One gradient step `z − α ∇_y g(x, z)`.
pub fn gradient_step(p: &BilevelProblem, x: &DVector<f64>, z: &DVector<f64>, alpha_g: f64) -> DVector<f64> {
    z - p.g_grad_y(x, z) * alpha_g
}

/// `k` fixed-step gradient steps on `g(x, ·)` from `z`.
pub fn lld_run(
    p: &BilevelProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    alpha_g: f64,
    k: usize,
    keep_trajectory: bool,
) -> Result<LldResult> {
    p.check_dims(x, z)?;
    check_step_size(p, alpha_g)?;
    let mut y = z.clone();
    let mut trajectory = keep_trajectory.then(|| {
        let mut t = Vec::with_capacity(k + 1);
        t.push(y.clone());
        t
    });
    for step in 1..=k {
        let next = gradient_step(p, x, &y, alpha_g);
        if diverged(&next) {
            return Err(Error::Divergence { step, last_finite: y });
        }
        y = next;
        if let Some(t) = trajectory.as_mut() {
            t.push(y.clone());
        }
    }
    Ok(LldResult { y_final: y, trajectory, d_k: None, c_k: None, k, alpha_g })
}

/// [`lld_run`] plus the Jacobians `C_k = ∂𝒜ᵏ/∂z` and `D_k = ∂𝒜ᵏ/∂x`.
pub fn lld_run_jac(
    p: &BilevelProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    alpha_g: f64,
    k: usize,
) -> Result<LldResult> {
    lld_run_jac_with(p, x, z, alpha_g, k, JacobianOptions::default())
}

pub fn lld_run_jac_with(
    p: &BilevelProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    alpha_g: f64,
    k: usize,
    opts: JacobianOptions,
) -> Result<LldResult> {
    p.check_dims(x, z)?;
    check_step_size(p, alpha_g)?;
    let (n, m) = (p.n, p.m);
    let mut y = z.clone();
    let mut c = DMatrix::<f64>::identity(m, m);
    let mut d = DMatrix::<f64>::zeros(m, n);
    for step in 0..k {
        if p.near_kink(x, &y, opts.kink_margin) {
            return Err(Error::Kink { step, margin: opts.kink_margin });
        }
        let a = DMatrix::<f64>::identity(m, m) - p.g_hess_yy(x, &y) * alpha_g;
        let b = p.g_hess_yx(x, &y) * (-alpha_g);
        c = &a * c;
        d = &a * d + b;
        let next = gradient_step(p, x, &y, alpha_g);
        if diverged(&next) {
            return Err(Error::Divergence { step: step + 1, last_finite: y });
        }
        y = next;
    }
    Ok(LldResult { y_final: y, trajectory: None, d_k: Some(d), c_k: Some(c), k, alpha_g })
}

/// `φᵏ(x, z)` together with `∇_x φᵏ = ∇_x f + D_kᵀ ∇_y f` and
/// `∇_z φᵏ = C_kᵀ ∇_y f`, all at `(x, 𝒜ᵏ(x, z))`.
pub fn grad_phi_k(
    p: &BilevelProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    alpha_g: f64,
    k: usize,
) -> Result<PhiGradient> {
    grad_phi_k_with(p, x, z, alpha_g, k, JacobianOptions::default())
}

pub fn grad_phi_k_with(
    p: &BilevelProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    alpha_g: f64,
    k: usize,
    opts: JacobianOptions,
) -> Result<PhiGradient> {
    let run = lld_run_jac_with(p, x, z, alpha_g, k, opts)?;
    let y = run.y_final;
    let (fx, fy) = p.f_grad_split(x, &y);
    let d = run.d_k.expect("jacobian run stores D_k");
    let c = run.c_k.expect("jacobian run stores C_k");
    Ok(PhiGradient {
        value: p.f(x, &y),
        grad_x: fx + d.transpose() * &fy,
        grad_z: c.transpose() * fy,
        y_final: y,
    })
}

/// `φᵏ(x, z)` only.
pub fn phi_k(p: &BilevelProblem, x: &DVector<f64>, z: &DVector<f64>, alpha_g: f64, k: usize) -> Result<f64> {
    let run = lld_run(p, x, z, alpha_g, k, false)?;
    Ok(p.f(x, &run.y_final))
}

/// Solves `z − α ∇_y g(x, z) = u`, i.e. evaluates `prox_{−α g_x}(u)`, by the
/// fixed-point iteration `z ← u + α ∇_y g(x, z)`.
pub fn prox_inverse(
    p: &BilevelProblem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    alpha_g: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    p.check_dims(x, u)?;
    check_step_size(p, alpha_g)?;
    let residual = |z: &DVector<f64>| (gradient_step(p, x, z, alpha_g) - u).norm();
    let mut z = u.clone();
    let mut r = residual(&z);
    for _ in 0..max_iter {
        if r <= tol {
            return Ok(z);
        }
        z = u + p.g_grad_y(x, &z) * alpha_g;
        if diverged(&z) {
            return Err(Error::NonConvergence { iterations: max_iter, residual: f64::INFINITY });
        }
        r = residual(&z);
    }
    if r <= tol {
        Ok(z)
    } else {
        Err(Error::NonConvergence { iterations: max_iter, residual: r })
    }
}

/// Backward orbit `y^{−1}, …, y^{−k}` with `𝒜ʲ(x, y^{−j}) = y^⋆`.
///
/// Stops with a divergence error when an orbit point exceeds `escape_norm`.
pub fn inverse_orbit(
    p: &BilevelProblem,
    x_star: &DVector<f64>,
    y_star: &DVector<f64>,
    alpha_g: f64,
    k: usize,
    tol: f64,
    escape_norm: f64,
) -> Result<Vec<DVector<f64>>> {
    let mut orbit = Vec::with_capacity(k);
    let mut current = y_star.clone();
    for step in 1..=k {
        let prev = prox_inverse(p, x_star, &current, alpha_g, tol, DEFAULT_PROX_MAX_ITER)?;
        if prev.norm() > escape_norm {
            return Err(Error::Divergence { step, last_finite: current });
        }
        orbit.push(prev.clone());
        current = prev;
    }
    Ok(orbit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{builtin_problem, quadratic_sc_with};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn quadratic_closed_form() {
        let p = builtin_problem("quadratic_sc").unwrap();
        let r = lld_run(&p, &v(&[0.0]), &v(&[1.0]), 0.5, 3, true).unwrap();
        assert_eq!(r.y_final[0], 0.125);
        assert_eq!(r.trajectory.unwrap().len(), 4);
    }

    #[test]
    fn zero_steps() {
        let p = builtin_problem("double_well_tilt").unwrap();
        let z = v(&[0.37]);
        let r = lld_run_jac(&p, &v(&[0.5]), &z, 0.05, 0).unwrap();
        assert_eq!(r.y_final, z);
        assert_eq!(r.c_k.unwrap(), DMatrix::identity(1, 1));
        assert_eq!(r.d_k.unwrap(), DMatrix::zeros(1, 1));
    }

    #[test]
    fn huber_attracted_to_plus_one() {
        let p = builtin_problem("huber_instability").unwrap();
        let r = lld_run(&p, &v(&[0.0]), &v(&[0.9]), 0.1, 200, false).unwrap();
        assert!((r.y_final[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_jacobians_geometric() {
        // A_j = 0.5, B_j = 0.5: C_3 = 0.125, D_3 = 0.5 (1 + 0.5 + 0.25) = 0.875
        let p = builtin_problem("quadratic_sc").unwrap();
        let r = lld_run_jac(&p, &v(&[0.3]), &v(&[-1.0]), 0.5, 3).unwrap();
        assert!((r.c_k.unwrap()[(0, 0)] - 0.125).abs() < 1e-15);
        assert!((r.d_k.unwrap()[(0, 0)] - 0.875).abs() < 1e-15);
    }

    #[test]
    fn phi_gradient_scalar_chain_rule() {
        let p = quadratic_sc_with(DMatrix::identity(1, 1));
        // this check uses f = ½y² + ½x² at x = 0, so ∇_x f = 0
        let g = grad_phi_k(&p, &v(&[0.0]), &v(&[1.0]), 0.5, 1).unwrap();
        assert_eq!(g.y_final[0], 0.5);
        assert_eq!(g.value, 0.125);
        assert_eq!(g.grad_z[0], 0.25);
        assert_eq!(g.grad_x[0], 0.25);
    }

    #[test]
    fn phi_gradient_vanishes_at_fixed_stationary_point() {
        let p = builtin_problem("quadratic_sc").unwrap();
        let g = grad_phi_k(&p, &v(&[0.0]), &v(&[0.0]), 0.5, 7).unwrap();
        assert_eq!(g.grad_x[0], 0.0);
        assert_eq!(g.grad_z[0], 0.0);
    }

    #[test]
    fn prox_inverse_cases() {
        let p = builtin_problem("quadratic_sc").unwrap();
        let z = prox_inverse(&p, &v(&[0.0]), &v(&[0.25]), 0.5, 1e-12, 1000).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-11);

        // ∇_y g vanishes at u = Mx, so u is its own preimage
        let p2 = quadratic_sc_with(DMatrix::identity(1, 1));
        let x = v(&[0.7]);
        let u = v(&[0.7]);
        let z = prox_inverse(&p2, &x, &u, 0.5, 1e-12, 10).unwrap();
        assert_eq!(z, u);
    }

    #[test]
    fn prox_inverse_reports_non_convergence() {
        let p = builtin_problem("quadratic_sc").unwrap();
        let err = prox_inverse(&p, &v(&[0.0]), &v(&[0.25]), 0.5, 1e-14, 2).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }

    #[test]
    fn exact_lipschitz_violation_is_an_error() {
        let p = builtin_problem("quadratic_sc").unwrap();
        assert!(matches!(
            lld_run(&p, &v(&[0.0]), &v(&[1.0]), 1.5, 3, false),
            Err(Error::StepSize { .. })
        ));
        // estimated constant only warns
        let h = builtin_problem("huber_instability").unwrap();
        assert!(lld_run(&h, &v(&[0.0]), &v(&[0.5]), 0.1, 3, false).is_ok());
    }

    #[test]
    fn divergence_error_carries_last_iterate() {
        // exact L_g = 1 rejects α ≥ 1, so mark the constant as an estimate to
        // let the iteration blow up: y ← (1 − α) y with α = 5 multiplies by −4
        let mut p = builtin_problem("quadratic_sc").unwrap();
        p.lipschitz_g.exact = false;
        match lld_run(&p, &v(&[0.0]), &v(&[1.0]), 5.0, 100, false) {
            Err(Error::Divergence { step, last_finite }) => {
                assert!(step > 1);
                assert!(last_finite[0].is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn kink_rule() {
        let p = builtin_problem("huber_instability").unwrap();
        let z = v(&[std::f64::consts::SQRT_2 + 1e-4]);
        assert!(matches!(lld_run_jac(&p, &v(&[0.0]), &z, 0.05, 3), Err(Error::Kink { step: 0, .. })));
    }

    #[test]
    fn inverse_orbit_toward_local_max() {
        let p = builtin_problem("huber_instability").unwrap();
        let orbit = inverse_orbit(&p, &v(&[0.0]), &v(&[0.5]), 0.1, 30, 1e-12, 1e6).unwrap();
        let mut prev = 0.5;
        for y in &orbit {
            assert!(y[0] > 0.0 && y[0] < prev);
            prev = y[0];
        }
        assert!(prev < 0.01);
    }

    #[test]
    fn inverse_orbit_constant_at_critical_point() {
        let p = builtin_problem("huber_instability").unwrap();
        let orbit = inverse_orbit(&p, &v(&[0.0]), &v(&[1.0]), 0.1, 5, 1e-12, 1e6).unwrap();
        assert!(orbit.iter().all(|y| y[0] == 1.0));
    }

    #[test]
    fn inverse_orbit_escapes_on_huber_escape() {
        // outside |y| ≤ √2: y^{-j} = 2 / 0.8^j exactly
        let p = builtin_problem("huber_escape").unwrap();
        let orbit = inverse_orbit(&p, &v(&[0.0]), &v(&[2.0]), 0.1, 10, 1e-12, 1e6).unwrap();
        for (j, y) in orbit.iter().enumerate() {
            let expected = 2.0 / 0.8_f64.powi(j as i32 + 1);
            assert!((y[0] - expected).abs() < 1e-9 * expected);
        }
        let err = inverse_orbit(&p, &v(&[0.0]), &v(&[2.0]), 0.1, 100, 1e-12, 1100.0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }
}
