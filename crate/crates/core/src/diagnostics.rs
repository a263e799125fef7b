//! Experiments on the unrolled surrogate: Hessian congruence at critical
//! points, sharpness growth along inverse orbits, exit times from
//! neighbourhoods of strong minimizers, rate fits and figure data.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::critical::{self, Classification, ContinuationOptions};
use crate::error::{Error, Result};
use crate::export::Table;
use crate::linalg::{largest_singular_value, Inertia, SymmetricEigen};
use crate::lld::{self, grad_phi_k, lld_run, lld_run_jac};
use crate::problem::{builtin_problem, linspace, BilevelProblem, Bounds};
use crate::solvers::{dpbg, SolverConfig, Trajectory};

/// Relative cutoff for zero eigenvalues when counting inertia.
pub const INERTIA_RTOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct CritHessian {
    /// `V_kᵀ ∇²f(x, 𝒜ᵏ(x, z)) V_k`.
    pub matrix: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub inertia: Inertia,
    /// Inertia of `∇²f(x, 𝒜ᵏ(x, z))` itself.
    pub f_inertia: Inertia,
    pub op_norm: f64,
    /// `‖C_k‖₂`.
    pub c_k_norm: f64,
}

/// Hessian of `φᵏ` at a critical point through the congruence with `∇²f`,
/// `V_k = [[I, 0], [D_k, C_k]]`. Valid only where `∇f(x, 𝒜ᵏ(x, z)) = 0`.
pub fn hessian_phi_k_at_crit(
    p: &BilevelProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    alpha_g: f64,
    k: usize,
    crit_tol: f64,
) -> Result<CritHessian> {
    let run = lld_run_jac(p, x, z, alpha_g, k)?;
    let grad_norm = p.f_grad(x, &run.y_final).norm();
    if !(grad_norm <= crit_tol) {
        return Err(Error::NotCritical { grad_norm, tol: crit_tol });
    }
    let (n, m) = (p.n, p.m);
    let c = run.c_k.expect("jacobian run stores C_k");
    let d = run.d_k.expect("jacobian run stores D_k");
    let mut v = DMatrix::<f64>::zeros(n + m, n + m);
    v.view_mut((0, 0), (n, n)).fill_with_identity();
    v.view_mut((n, 0), (m, n)).copy_from(&d);
    v.view_mut((n, n), (m, m)).copy_from(&c);
    let hf = p.f_hess(x, &run.y_final);
    let h = v.transpose() * &hf * &v;
    let matrix = (&h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(&matrix);
    let f_eig = SymmetricEigen::new(&hf);
    Ok(CritHessian {
        inertia: Inertia::from_values(&eig.values, INERTIA_RTOL),
        f_inertia: Inertia::from_values(&f_eig.values, INERTIA_RTOL),
        op_norm: eig.spectral_radius(),
        c_k_norm: largest_singular_value(&c),
        eigenvalues: eig.values,
        matrix,
    })
}

// ---------------------------------------------------------------------------
// Rate fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub rho_hat: f64,
    /// `log(series_0)` on the fitted line.
    pub log_intercept: f64,
    pub r_squared: f64,
}

impl RateFit {
    pub fn log_slope(&self) -> f64 {
        self.rho_hat.ln()
    }
}

/// Least-squares line through `(t_j, y_j)`; returns slope, intercept, r².
fn line_fit(t: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let stt: f64 = t.iter().map(|a| (a - tm).powi(2)).sum();
    let sty: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let syy: f64 = y.iter().map(|b| (b - ym).powi(2)).sum();
    let slope = sty / stt;
    let intercept = ym - slope * tm;
    let ss_res: f64 = t.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    // a flat series is fitted exactly
    let r2 = if syy <= f64::EPSILON * ym.abs().max(1.0) { 1.0 } else { 1.0 - ss_res / syy };
    (slope, intercept, r2)
}

/// Fits `log s_j = a + j·log ρ̂` by least squares.
pub fn rate_fit(series: &[f64]) -> Result<RateFit> {
    let t: Vec<f64> = (0..series.len()).map(|j| j as f64).collect();
    rate_fit_at(&t, series)
}

/// [`rate_fit`] with explicit abscissae.
pub fn rate_fit_at(t: &[f64], series: &[f64]) -> Result<RateFit> {
    if series.len() < 3 || t.len() != series.len() {
        return Err(Error::InvalidInput(format!(
            "rate fit needs at least 3 points with matching abscissae, got {} and {}",
            series.len(),
            t.len()
        )));
    }
    if let Some(bad) = series.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!("rate fit needs positive finite values, got {bad}")));
    }
    let logs: Vec<f64> = series.iter().map(|v| v.ln()).collect();
    let (slope, intercept, r_squared) = line_fit(t, &logs);
    Ok(RateFit { rho_hat: slope.exp(), log_intercept: intercept, r_squared })
}

/// `‖𝒜ʲ(x, z) − y*‖` for `j = 0..=k`.
pub fn convergence_profile(
    p: &BilevelProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    alpha_g: f64,
    k: usize,
    y_star: &DVector<f64>,
) -> Result<Vec<f64>> {
    let run = lld_run(p, x, z, alpha_g, k, true)?;
    Ok(run.trajectory.expect("trajectory requested").iter().map(|y| (y - y_star).norm()).collect())
}

// ---------------------------------------------------------------------------
// Sharpness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessPoint {
    pub k: usize,
    /// `‖∇²φᵏ(x*, y^{−k})‖_op`; NaN once the orbit has escaped.
    pub op_norm: f64,
    /// `‖y^{−k}‖`; NaN when the inverse could not be computed.
    pub orbit_norm: f64,
    /// Some orbit point left the box.
    pub escaped: bool,
    /// The orbit passed the divergence threshold or the inverse failed.
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct SharpnessCurve {
    pub points: Vec<SharpnessPoint>,
    /// Slope of `log ‖∇²φᵏ‖` against `k` over the non-escaped points.
    pub log_slope: Option<f64>,
}

impl SharpnessCurve {
    pub fn to_table(&self) -> Table {
        let mut t = Table::with_columns("sharpness", &["k", "hessian_op_norm", "orbit_norm", "escaped", "diverged"]);
        for pt in &self.points {
            t.push(vec![pt.k as f64, pt.op_norm, pt.orbit_norm, pt.escaped as u8 as f64, pt.diverged as u8 as f64]);
        }
        t
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SharpnessOptions {
    pub crit_tol: f64,
    pub prox_tol: f64,
}

impl Default for SharpnessOptions {
    fn default() -> Self {
        Self { crit_tol: 1e-8, prox_tol: 1e-13 }
    }
}

/// Follows the inverse orbit of a critical point `(x*, y*)` of `f` and
/// measures `‖∇²φᵏ‖` at `(x*, y^{−k})` for every requested `k`.
///
/// The orbit is pushed to the largest `k` once; an orbit point outside `box_`
/// sets the escape flag from that `k` on, and passing `100·(1 + radius)`
/// ends the orbit.
pub fn sharpness_curve(
    p: &BilevelProblem,
    x_star: &DVector<f64>,
    y_star: &DVector<f64>,
    alpha_g: f64,
    k_values: &[usize],
    box_: &Bounds,
    opts: SharpnessOptions,
) -> Result<SharpnessCurve> {
    p.check_dims(x_star, y_star)?;
    let grad_norm = p.f_grad(x_star, y_star).norm();
    if grad_norm > opts.crit_tol {
        return Err(Error::NotCritical { grad_norm, tol: opts.crit_tol });
    }
    let cp = critical::classify(p, x_star, y_star);
    if cp.grad_norm <= opts.crit_tol && cp.classification == Classification::LocalMin {
        return Err(Error::Precondition(format!(
            "y* = {:?} is a local minimum of the lower level; sharpness needs a spurious critical point",
            y_star.as_slice()
        )));
    }
    let k_max = k_values.iter().copied().max().unwrap_or(0);
    let escape_norm = 100.0 * (1.0 + box_.radius());

    // orbit[j] = y^{−j}; stops early on divergence
    let mut orbit = vec![y_star.clone()];
    let mut first_exit: Option<usize> = None;
    for j in 1..=k_max {
        let prev = orbit.last().expect("orbit starts at y*");
        match lld::prox_inverse(p, x_star, prev, alpha_g, opts.prox_tol, lld::DEFAULT_PROX_MAX_ITER) {
            Ok(y) if y.norm() <= escape_norm => {
                if first_exit.is_none() && !box_.contains(&y) {
                    first_exit = Some(j);
                }
                orbit.push(y);
            }
            Ok(_) | Err(_) => break,
        }
    }
    if first_exit.is_none() && !box_.contains(y_star) {
        first_exit = Some(0);
    }

    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let points: Vec<SharpnessPoint> = ks
        .par_iter()
        .map(|&k| {
            let escaped = first_exit.is_some_and(|e| e <= k);
            let Some(z) = orbit.get(k) else {
                return Ok(SharpnessPoint { k, op_norm: f64::NAN, orbit_norm: f64::NAN, escaped: true, diverged: true });
            };
            let op_norm = if escaped {
                f64::NAN
            } else {
                hessian_phi_k_at_crit(p, x_star, z, alpha_g, k, opts.crit_tol.max(1e-9))?.op_norm
            };
            Ok(SharpnessPoint { k, op_norm, orbit_norm: z.norm(), escaped, diverged: false })
        })
        .collect::<Result<_>>()?;

    let (t, s): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|pt| !pt.escaped && pt.op_norm > 0.0)
        .map(|pt| (pt.k as f64, pt.op_norm))
        .unzip();
    let log_slope = rate_fit_at(&t, &s).ok().map(|f| f.log_slope());
    Ok(SharpnessCurve { points, log_slope })
}

// ---------------------------------------------------------------------------
// Pseudo-stability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitPoint {
    pub k: usize,
    /// First `ℓ` with `‖x_ℓ − x*‖ + ‖z_ℓ − z*‖ > δ`; `None` if censored.
    pub exit_iteration: Option<usize>,
    pub initial_distance: f64,
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub points: Vec<ExitPoint>,
    pub delta: f64,
    pub alpha_f: f64,
    pub l_max: usize,
    /// Slope of `log(exit)` against `k` over uncensored points.
    pub log_slope: Option<f64>,
}

impl StabilityReport {
    pub fn to_table(&self) -> Table {
        let mut t = Table::with_columns("stability", &["k", "exit_iteration", "censored", "delta", "alpha_f", "initial_distance"]);
        for pt in &self.points {
            t.push(vec![
                pt.k as f64,
                pt.exit_iteration.map_or(self.l_max as f64, |e| e as f64),
                pt.exit_iteration.is_none() as u8 as f64,
                self.delta,
                self.alpha_f,
                pt.initial_distance,
            ]);
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct StabilityOptions {
    pub delta: f64,
    pub alpha_f: f64,
    pub alpha_g: f64,
    pub k_values: Vec<usize>,
    pub l_max: usize,
    /// Added to every coordinate of `x*` and `z*` for the start.
    pub init_offset: f64,
    /// Tolerance on `‖∇φ(x*)‖` for the strong-minimizer check.
    pub grad_tol: f64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            delta: 0.3,
            alpha_f: 0.05,
            alpha_g: 0.1,
            k_values: (2..=20).collect(),
            l_max: 1_000_000,
            init_offset: 0.05,
            grad_tol: 1e-6,
        }
    }
}

/// Checks that `(x*, z*)` is a strong local minimizer of `x ↦ f(x, y(x))`
/// along the branch through `z*`: lower-level non-degenerate minimum,
/// vanishing implicit gradient, and a positive semidefinite reduced Hessian
/// by central differences of the implicit gradient.
///
/// Semidefiniteness is accepted so that problems in which `x` does not enter
/// at all still qualify.
pub fn verify_strong_minimizer(p: &BilevelProblem, x: &DVector<f64>, z: &DVector<f64>, grad_tol: f64) -> Result<()> {
    let cont = ContinuationOptions::default();
    let cp = critical::classify(p, x, z);
    if cp.classification != Classification::LocalMin || cp.grad_norm > 1e2 * cont.tol {
        return Err(Error::Precondition(format!(
            "z* = {:?} is not a non-degenerate lower-level minimum ({}, gradient {:e})",
            z.as_slice(),
            cp.classification.as_str(),
            cp.grad_norm
        )));
    }
    let g0 = critical::implicit_grad_phi(p, x, z, 1e2 * cont.tol)?;
    if g0.grad.norm() > grad_tol {
        return Err(Error::Precondition(format!("implicit gradient {:e} exceeds {grad_tol:e}", g0.grad.norm())));
    }
    let h = 1e-5;
    let n = p.n;
    let mut hess = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let mut grads = Vec::with_capacity(2);
        for sign in [1.0, -1.0] {
            let mut xs = x.clone();
            xs[i] += sign * h;
            let ys = critical::track_point(p, x, z, &xs, 0, &cont)?;
            grads.push(critical::implicit_grad_phi(p, &xs, &ys, 1e2 * cont.tol)?.grad);
        }
        hess.set_column(i, &((&grads[0] - &grads[1]) / (2.0 * h)));
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    let eig = SymmetricEigen::new(&sym);
    let floor = -1e-6 * (1.0 + eig.spectral_radius());
    if eig.values.iter().any(|v| *v < floor) {
        return Err(Error::Precondition(format!("reduced Hessian is indefinite: {:?}", eig.values.as_slice())));
    }
    Ok(())
}

fn exit_time(p: &BilevelProblem, x_star: &DVector<f64>, z_star: &DVector<f64>, k: usize, opts: &StabilityOptions) -> Result<ExitPoint> {
    let mut x = x_star.add_scalar(opts.init_offset);
    let mut z = z_star.add_scalar(opts.init_offset);
    let distance = |x: &DVector<f64>, z: &DVector<f64>| (x - x_star).norm() + (z - z_star).norm();
    let initial_distance = distance(&x, &z);
    for l in 1..=opts.l_max {
        let g = grad_phi_k(p, &x, &z, opts.alpha_g, k)?;
        let next_x = &x - &g.grad_x * opts.alpha_f;
        let next_z = &z - &g.grad_z * opts.alpha_f;
        if next_x == x && next_z == z {
            // a floating-point fixed point: every later iterate is identical
            break;
        }
        x = next_x;
        z = next_z;
        if !(distance(&x, &z) <= opts.delta) {
            return Ok(ExitPoint { k, exit_iteration: Some(l), initial_distance });
        }
    }
    Ok(ExitPoint { k, exit_iteration: None, initial_distance })
}

/// DPBG exit times from the `δ`-ball around a strong minimizer, one run per
/// `k`, started at `(x* + offset, z* + offset)`.
pub fn stability_exit_time(p: &BilevelProblem, x_star: &DVector<f64>, z_star: &DVector<f64>, opts: &StabilityOptions) -> Result<StabilityReport> {
    p.check_dims(x_star, z_star)?;
    if opts.k_values.is_empty() || opts.l_max == 0 {
        return Err(Error::InvalidInput("stability needs k values and l_max ≥ 1".into()));
    }
    let start_distance = opts.init_offset.abs() * ((p.n as f64).sqrt() + (p.m as f64).sqrt());
    if !(opts.delta > start_distance) {
        return Err(Error::InvalidInput(format!(
            "delta = {} does not exceed the initial distance {start_distance}",
            opts.delta
        )));
    }
    verify_strong_minimizer(p, x_star, z_star, opts.grad_tol)?;
    let mut ks = opts.k_values.clone();
    ks.sort_unstable();
    ks.dedup();
    let points: Vec<ExitPoint> = ks.par_iter().map(|&k| exit_time(p, x_star, z_star, k, opts)).collect::<Result<_>>()?;
    let (t, e): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter_map(|pt| pt.exit_iteration.map(|e| (pt.k as f64, e as f64)))
        .unzip();
    let log_slope = rate_fit_at(&t, &e).ok().map(|f| f.log_slope());
    Ok(StabilityReport { points, delta: opts.delta, alpha_f: opts.alpha_f, l_max: opts.l_max, log_slope })
}

// ---------------------------------------------------------------------------
// Figure data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// Flat plateaus and a sharp dip for the unstable Huber problem.
    Fig2,
    /// Argmin drifting outward for the escaping Huber problem.
    Fig3,
}

impl Figure {
    pub const NAMES: [&'static str; 2] = ["fig2", "fig3"];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fig2" => Ok(Self::Fig2),
            "fig3" => Ok(Self::Fig3),
            _ => Err(Error::UnknownName { kind: "figure", name: name.into(), valid: Self::NAMES.map(String::from).to_vec() }),
        }
    }

    pub fn problem(&self) -> &'static str {
        match self {
            Self::Fig2 => "huber_instability",
            Self::Fig3 => "huber_escape",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureOptions {
    pub alpha_g: f64,
    pub alpha_f: f64,
    pub k_values: Vec<usize>,
    pub z_lo: f64,
    pub z_hi: f64,
    pub grid_points: usize,
    pub x: f64,
    pub dpbg_k: usize,
    pub z0: f64,
    pub iterations: usize,
    /// Kink margin for the DPBG run; 0 takes one-sided Hessians at the
    /// Huber kinks, as differentiating through the iteration would.
    pub kink_margin: f64,
}

impl FigureOptions {
    pub fn defaults(fig: Figure) -> Self {
        match fig {
            Figure::Fig2 => Self {
                alpha_g: 0.1,
                alpha_f: 0.05,
                k_values: vec![3, 6, 9, 12],
                z_lo: -2.0,
                z_hi: 2.0,
                grid_points: 401,
                x: 0.0,
                dpbg_k: 9,
                z0: -1.5,
                iterations: 3000,
                kink_margin: 0.0,
            },
            // a smaller inner step keeps every argmin inside [−2, 6]
            Figure::Fig3 => Self {
                alpha_g: 0.04,
                alpha_f: 0.05,
                k_values: vec![3, 6, 9, 12],
                z_lo: -2.0,
                z_hi: 6.0,
                grid_points: 801,
                x: 0.0,
                dpbg_k: 9,
                z0: 0.5,
                iterations: 3000,
                kink_margin: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct FigureBundle {
    pub figure: Figure,
    /// `z` then one `phi_k_<k>` column per `k`.
    pub profile: Table,
    pub trace: Trajectory,
}

impl FigureBundle {
    pub fn tables(&self) -> Vec<Table> {
        let mut trace = self.trace.to_table();
        trace.name = "dpbg_trace".into();
        vec![self.profile.clone(), trace]
    }
}

/// Landscape profiles of `z ↦ φᵏ(x, z)` and one DPBG run.
pub fn figure_data(fig: Figure, opts: &FigureOptions) -> Result<FigureBundle> {
    if opts.grid_points < 2 || !(opts.z_hi > opts.z_lo) {
        return Err(Error::InvalidInput("figure grid needs at least two points and z_hi > z_lo".into()));
    }
    let p = builtin_problem(fig.problem())?;
    let x = DVector::from_element(1, opts.x);
    let zs = linspace(opts.z_lo, opts.z_hi, opts.grid_points);
    let mut columns = vec!["z".to_string()];
    columns.extend(opts.k_values.iter().map(|k| format!("phi_k_{k}")));
    let mut profile = Table::new("profile", columns);
    let rows: Vec<Vec<f64>> = zs
        .par_iter()
        .map(|&z| {
            let zv = DVector::from_element(1, z);
            let mut row = vec![z];
            for &k in &opts.k_values {
                row.push(lld::phi_k(&p, &x, &zv, opts.alpha_g, k)?);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    for r in rows {
        profile.push(r);
    }
    let cfg = SolverConfig {
        alpha_f: opts.alpha_f,
        alpha_g: opts.alpha_g,
        k: opts.dpbg_k,
        iterations: opts.iterations,
        kink_margin: opts.kink_margin,
        ..Default::default()
    };
    let trace = dpbg(&p, &cfg, &x, &DVector::from_element(1, opts.z0))?;
    Ok(FigureBundle { figure: fig, profile, trace })
}
