//! Critical points of `g_x`, their Morse classification, continuation of
//! critical branches `x ↦ y⁽ⁱ⁾(x)`, and the implicit value-function gradient.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::SymmetricEigen;
use crate::problem::{tilt_problem, BilevelProblem, Bounds, TiltVector};
use crate::seeding;

/// Relative eigenvalue margin below which a Hessian counts as degenerate.
pub const DEGENERACY_RTOL: f64 = 1e-6;
pub const DEFAULT_CRIT_TOL: f64 = 1e-10;

const NEWTON_MAX_ITER: usize = 200;
const POLISH_ITER: usize = 100;
const LINE_SEARCH_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Classification {
    LocalMin,
    Saddle,
    LocalMax,
    Degenerate,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::LocalMin => "local_min",
            Self::Saddle => "saddle",
            Self::LocalMax => "local_max",
            Self::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CriticalPoint {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub grad_norm: f64,
    /// Ascending spectrum of `∂²_yy g(x, y)`.
    pub eigenvalues: DVector<f64>,
    pub morse_index: usize,
    pub classification: Classification,
}

impl CriticalPoint {
    pub fn min_abs_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()))
    }

    pub fn is_degenerate(&self) -> bool {
        self.classification == Classification::Degenerate
    }
}

fn is_degenerate(eig: &SymmetricEigen) -> bool {
    eig.min_abs() <= DEGENERACY_RTOL * (1.0 + eig.spectral_radius())
}

/// Classifies `(x, y)` from the spectrum of `∂²_yy g`. Does not check
/// stationarity beyond recording the gradient norm.
pub fn classify(p: &BilevelProblem, x: &DVector<f64>, y: &DVector<f64>) -> CriticalPoint {
    let eig = SymmetricEigen::new(&p.g_hess_yy(x, y));
    let morse_index = eig.negative_count();
    let classification = if is_degenerate(&eig) {
        Classification::Degenerate
    } else if morse_index == 0 {
        Classification::LocalMin
    } else if morse_index == p.m {
        Classification::LocalMax
    } else {
        Classification::Saddle
    };
    CriticalPoint {
        x: x.clone(),
        y: y.clone(),
        grad_norm: p.g_grad_y(x, y).norm(),
        eigenvalues: eig.values,
        morse_index,
        classification,
    }
}

/// Newton direction `−H⁻¹ ∇g`, falling back to steepest descent on a
/// singular Hessian.
fn newton_direction(p: &BilevelProblem, x: &DVector<f64>, y: &DVector<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(&p.g_hess_yy(x, y));
    let rhs = DMatrix::from_column_slice(grad.len(), 1, grad.as_slice());
    match eig.solve(&rhs) {
        Some(sol) if sol.iter().all(|v| v.is_finite()) => -sol.column(0).into_owned(),
        _ => -grad.clone(),
    }
}

/// One damped Newton step on `‖∇_y g(x, ·)‖`; `None` when no step length
/// decreases the residual.
fn damped_newton_step(
    p: &BilevelProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    residual: f64,
) -> Option<(DVector<f64>, f64)> {
    let grad = p.g_grad_y(x, y);
    let dir = newton_direction(p, x, y, &grad);
    let mut t = 1.0;
    for _ in 0..LINE_SEARCH_HALVINGS {
        let trial = y + &dir * t;
        let r = p.g_grad_y(x, &trial).norm();
        if r.is_finite() && r < residual {
            return Some((trial, r));
        }
        t *= 0.5;
    }
    None
}

/// Damped Newton on `∇_y g(x, ·) = 0` from `start`, followed by a polishing
/// phase so near-degenerate roots get classified from an accurate point.
pub fn newton_root(p: &BilevelProblem, x: &DVector<f64>, start: &DVector<f64>, tol: f64) -> Option<(DVector<f64>, f64)> {
    let mut y = start.clone();
    let mut r = p.g_grad_y(x, &y).norm();
    let mut iters = 0;
    while r > tol {
        if iters >= NEWTON_MAX_ITER {
            return None;
        }
        let (next, nr) = damped_newton_step(p, x, &y, r)?;
        y = next;
        r = nr;
        iters += 1;
        if y.iter().any(|v| !v.is_finite()) {
            return None;
        }
    }
    for _ in 0..POLISH_ITER {
        if r == 0.0 {
            break;
        }
        match damped_newton_step(p, x, &y, r) {
            Some((next, nr)) => {
                let moved = (&next - &y).norm();
                y = next;
                r = nr;
                if moved <= 1e-15 * (1.0 + y.norm()) {
                    break;
                }
            }
            None => break,
        }
    }
    Some((y, r))
}

/// Multistart damped Newton from quasi-uniform points of `ybox`; roots are
/// deduplicated at radius `10·tol`, keeping the smaller residual.
pub fn find_critical_points(
    p: &BilevelProblem,
    x: &DVector<f64>,
    ybox: &Bounds,
    n_starts: usize,
    seed: u64,
    tol: f64,
) -> Result<Vec<CriticalPoint>> {
    if n_starts == 0 {
        return Err(Error::InvalidInput("n_starts must be at least 1".into()));
    }
    if ybox.dim() != p.m {
        return Err(Error::Dimension { expected: format!("y box of dim {}", p.m), found: format!("dim {}", ybox.dim()) });
    }
    let starts = seeding::shifted_halton(p.m, n_starts, seed);
    let mut roots: Vec<(DVector<f64>, f64)> = starts
        .par_iter()
        .filter_map(|u| newton_root(p, x, &ybox.from_unit(u), tol))
        .filter(|(y, _)| ybox.contains(y))
        .filter(|(y, _)| !p.near_kink(x, y, crate::lld::DEFAULT_KINK_MARGIN))
        .collect();

    roots.sort_by(|a, b| {
        a.0.iter()
            .zip(b.0.iter())
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.total_cmp(&b.1))
    });
    let radius = 10.0 * tol;
    let mut kept: Vec<(DVector<f64>, f64)> = Vec::new();
    for (y, r) in roots {
        match kept.iter_mut().find(|(k, _)| (k - &y).norm() <= radius) {
            Some(existing) => {
                if r < existing.1 {
                    *existing = (y, r);
                }
            }
            None => kept.push((y, r)),
        }
    }
    Ok(kept.into_iter().map(|(y, _)| classify(p, x, &y)).collect())
}

#[derive(Debug, Clone)]
pub struct MorseScanRow {
    pub x: DVector<f64>,
    pub count: usize,
    /// Smallest `|eigenvalue|` over the points found at this `x`.
    pub min_abs_eigenvalue: f64,
    pub is_morse: bool,
    pub count_deviates: bool,
}

#[derive(Debug, Clone)]
pub struct MorseScanReport {
    pub rows: Vec<MorseScanRow>,
    pub modal_count: usize,
}

impl MorseScanReport {
    /// Every grid point non-degenerate (the count may still change across x).
    pub fn all_morse(&self) -> bool {
        self.rows.iter().all(|r| r.is_morse)
    }

    pub fn constant_count(&self) -> bool {
        self.rows.iter().all(|r| !r.count_deviates)
    }
}

/// Settings shared by the multistart-based scans.
#[derive(Debug, Clone, Copy)]
pub struct ScanOptions {
    pub n_starts: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self { n_starts: 32, seed: 0, tol: DEFAULT_CRIT_TOL }
    }
}

pub fn morse_scan(p: &BilevelProblem, x_grid: &[DVector<f64>], ybox: &Bounds, opts: ScanOptions) -> Result<MorseScanReport> {
    let per_x: Vec<Vec<CriticalPoint>> = x_grid
        .par_iter()
        .enumerate()
        .map(|(i, x)| find_critical_points(p, x, ybox, opts.n_starts, opts.seed.wrapping_add(i as u64), opts.tol))
        .collect::<Result<_>>()?;

    let mut tally: Vec<(usize, usize)> = Vec::new();
    for pts in &per_x {
        match tally.iter_mut().find(|(c, _)| *c == pts.len()) {
            Some(entry) => entry.1 += 1,
            None => tally.push((pts.len(), 1)),
        }
    }
    // ties go to the smaller count
    tally.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let modal_count = tally.first().map_or(0, |t| t.0);

    let rows = x_grid
        .iter()
        .zip(per_x)
        .map(|(x, pts)| MorseScanRow {
            x: x.clone(),
            count: pts.len(),
            min_abs_eigenvalue: pts.iter().map(|c| c.min_abs_eigenvalue()).fold(f64::INFINITY, f64::min),
            is_morse: pts.iter().all(|c| !c.is_degenerate()),
            count_deviates: pts.len() != modal_count,
        })
        .collect();
    Ok(MorseScanReport { rows, modal_count })
}

// ---------------------------------------------------------------------------
// Branch continuation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Branch {
    pub id: usize,
    pub x_samples: Vec<DVector<f64>>,
    pub y_samples: Vec<DVector<f64>>,
    /// `‖∇_y g‖` at each sample.
    pub residuals: Vec<f64>,
    pub index: usize,
    pub is_local_min_branch: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ContinuationOptions {
    pub tol: f64,
    pub max_halvings: usize,
    pub corrector_iters: usize,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_CRIT_TOL, max_halvings: 20, corrector_iters: 30 }
    }
}

/// `Jac y* = −(∂²_yy g)⁻¹ ∂²_yx g`.
fn implicit_jacobian(p: &BilevelProblem, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(&p.g_hess_yy(x, y));
    if is_degenerate(&eig) {
        return Err(Error::Singular { margin: eig.min_abs() });
    }
    let sol = eig.solve(&p.g_hess_yx(x, y)).ok_or(Error::Singular { margin: 0.0 })?;
    Ok(-sol)
}

/// Newton corrector from `pred`; rejects corrections that wander more than
/// a fraction of the predicted move (a jump to another branch).
fn correct(
    p: &BilevelProblem,
    x: &DVector<f64>,
    y_prev: &DVector<f64>,
    pred: &DVector<f64>,
    dx: f64,
    opts: &ContinuationOptions,
) -> Option<DVector<f64>> {
    let mut y = pred.clone();
    let mut r = p.g_grad_y(x, &y).norm();
    let mut iters = 0;
    while r > opts.tol {
        if iters >= opts.corrector_iters {
            return None;
        }
        let (next, nr) = damped_newton_step(p, x, &y, r)?;
        y = next;
        r = nr;
        iters += 1;
    }
    let allowed = 0.25 * ((pred - y_prev).norm() + dx) + 10.0 * opts.tol;
    ((&y - pred).norm() <= allowed).then_some(y)
}

/// Moves a critical point from `x_from` to `x_to` with predictor-corrector
/// substeps, halving the step on corrector failure. Every accepted point is
/// checked for degeneracy and index changes.
pub fn track_point(
    p: &BilevelProblem,
    x_from: &DVector<f64>,
    y_from: &DVector<f64>,
    x_to: &DVector<f64>,
    index: usize,
    opts: &ContinuationOptions,
) -> Result<DVector<f64>> {
    let mut x_cur = x_from.clone();
    let mut y_cur = y_from.clone();
    let mut step = 1.0_f64;
    let mut depth = 0usize;
    loop {
        let remaining = x_to - &x_cur;
        if remaining.norm() == 0.0 {
            return Ok(y_cur);
        }
        let mut fraction = step;
        let x_next = if fraction >= 1.0 {
            fraction = 1.0;
            x_to.clone()
        } else {
            &x_cur + &remaining * fraction
        };
        let dx = &x_next - &x_cur;
        let jac = implicit_jacobian(p, &x_cur, &y_cur)?;
        let pred = &y_cur + &jac * &dx;
        match correct(p, &x_next, &y_cur, &pred, dx.norm(), opts) {
            Some(y_next) => {
                let cp = classify(p, &x_next, &y_next);
                if cp.is_degenerate() || cp.morse_index != index {
                    return Err(Error::MorseViolation {
                        from_x: x_cur.iter().copied().collect(),
                        from_y: y_cur.iter().copied().collect(),
                        from_index: index,
                        to_x: x_next.iter().copied().collect(),
                        to_y: y_next.iter().copied().collect(),
                        to_index: cp.morse_index,
                        margin: cp.min_abs_eigenvalue(),
                    });
                }
                x_cur = x_next;
                y_cur = y_next;
                if fraction >= 1.0 {
                    return Ok(y_cur);
                }
                // after a success, try to cover the rest in one go again
                step = (step * 2.0).min(1.0);
                depth = depth.saturating_sub(1);
            }
            None => {
                depth += 1;
                if depth > opts.max_halvings {
                    return Err(Error::ContinuationStall {
                        x: x_cur.iter().copied().collect(),
                        y: y_cur.iter().copied().collect(),
                        halvings: depth - 1,
                    });
                }
                step = fraction * 0.5;
            }
        }
    }
}

/// Continues a non-degenerate critical point along `x_path`, recording one
/// sample per path point.
pub fn continue_branch(
    p: &BilevelProblem,
    seed: &CriticalPoint,
    x_path: &[DVector<f64>],
    opts: ContinuationOptions,
) -> Result<Branch> {
    if seed.is_degenerate() {
        return Err(Error::Singular { margin: seed.min_abs_eigenvalue() });
    }
    if seed.grad_norm > opts.tol {
        return Err(Error::NotCritical { grad_norm: seed.grad_norm, tol: opts.tol });
    }
    let index = seed.morse_index;
    let mut x_cur = seed.x.clone();
    let mut y_cur = seed.y.clone();
    let mut branch = Branch {
        id: 0,
        x_samples: Vec::with_capacity(x_path.len()),
        y_samples: Vec::with_capacity(x_path.len()),
        residuals: Vec::with_capacity(x_path.len()),
        index,
        is_local_min_branch: index == 0,
    };
    for x_next in x_path {
        let y_next = track_point(p, &x_cur, &y_cur, x_next, index, &opts)?;
        branch.residuals.push(p.g_grad_y(x_next, &y_next).norm());
        branch.x_samples.push(x_next.clone());
        branch.y_samples.push(y_next.clone());
        x_cur = x_next.clone();
        y_cur = y_next;
    }
    Ok(branch)
}

impl Branch {
    /// Branch value at an arbitrary `x`, continued from the nearest sample.
    pub fn locate(&self, p: &BilevelProblem, x: &DVector<f64>, opts: ContinuationOptions) -> Result<DVector<f64>> {
        let nearest = self
            .x_samples
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - x).norm().total_cmp(&(b.1 - x).norm()))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::InvalidInput("empty branch".into()))?;
        track_point(p, &self.x_samples[nearest], &self.y_samples[nearest], x, self.index, &opts)
    }

    /// CSV with columns `x_1..x_n, y_1..y_m, residual, index`.
    pub fn to_table(&self) -> crate::export::Table {
        let n = self.x_samples.first().map_or(0, |v| v.len());
        let m = self.y_samples.first().map_or(0, |v| v.len());
        let mut columns: Vec<String> = (1..=n).map(|i| format!("x_{i}")).collect();
        columns.extend((1..=m).map(|i| format!("y_{i}")));
        columns.push("residual".into());
        columns.push("index".into());
        let mut table = crate::export::Table::new(format!("branch_{}", self.id), columns);
        for ((x, y), r) in self.x_samples.iter().zip(&self.y_samples).zip(&self.residuals) {
            let mut row: Vec<f64> = x.iter().chain(y.iter()).copied().collect();
            row.push(*r);
            row.push(self.index as f64);
            table.push(row);
        }
        table
    }
}

#[derive(Debug, Clone)]
pub struct BranchSet {
    pub branches: Vec<Branch>,
    /// Number of branches, `M`.
    pub total: usize,
    /// Number of local-minimum branches, `N`.
    pub local_min: usize,
}

/// Finds critical points at the first grid `x` and continues each one across
/// the grid. Branch ids start at 1 in the canonical order of the roots.
pub fn enumerate_branches(
    p: &BilevelProblem,
    x_grid: &[DVector<f64>],
    ybox: &Bounds,
    scan: ScanOptions,
    cont: ContinuationOptions,
) -> Result<BranchSet> {
    let first = x_grid.first().ok_or_else(|| Error::InvalidInput("empty x grid".into()))?;
    let seeds = find_critical_points(p, first, ybox, scan.n_starts, scan.seed, scan.tol)?;
    let mut branches: Vec<Branch> = seeds
        .par_iter()
        .map(|s| continue_branch(p, s, x_grid, cont))
        .collect::<Result<_>>()?;
    for (i, b) in branches.iter_mut().enumerate() {
        b.id = i + 1;
    }
    let radius = 10.0 * scan.tol;
    for j in 0..x_grid.len() {
        for a in 0..branches.len() {
            for b in (a + 1)..branches.len() {
                if (&branches[a].y_samples[j] - &branches[b].y_samples[j]).norm() <= radius {
                    return Err(Error::Precondition(format!(
                        "branches {} and {} coincide at x = {:?}",
                        branches[a].id,
                        branches[b].id,
                        x_grid[j].as_slice()
                    )));
                }
            }
        }
    }
    let local_min = branches.iter().filter(|b| b.is_local_min_branch).count();
    Ok(BranchSet { total: branches.len(), local_min, branches })
}

// ---------------------------------------------------------------------------
// Implicit value-function gradient and ε-criticality
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ImplicitGradient {
    pub value: f64,
    pub grad: DVector<f64>,
    /// `Jac y*(x)`, `m × n`.
    pub jac_y: DMatrix<f64>,
}

/// `∇φ(x) = ∇_x f + (Jac y*)ᵀ ∇_y f` at a non-degenerate critical point.
pub fn implicit_grad_phi(p: &BilevelProblem, x: &DVector<f64>, y_crit: &DVector<f64>, tol: f64) -> Result<ImplicitGradient> {
    p.check_dims(x, y_crit)?;
    let grad_norm = p.g_grad_y(x, y_crit).norm();
    if grad_norm > tol {
        return Err(Error::NotCritical { grad_norm, tol });
    }
    let jac_y = implicit_jacobian(p, x, y_crit)?;
    let (fx, fy) = p.f_grad_split(x, y_crit);
    Ok(ImplicitGradient { value: p.f(x, y_crit), grad: fx + jac_y.transpose() * fy, jac_y })
}

pub fn eps_critical_check(grad: &DVector<f64>, eps: f64) -> bool {
    grad.norm() <= eps
}

/// One iterate of a run as seen by [`vcrit_collect`].
#[derive(Debug, Clone, Copy)]
pub struct IterateSummary {
    pub value: f64,
    pub grad_norm: f64,
}

/// Objective values at ε-critical iterates, sorted and deduplicated at `eps`.
pub fn vcrit_collect(iterates: &[IterateSummary], eps: f64) -> Vec<f64> {
    let mut values: Vec<f64> = iterates.iter().filter(|s| s.grad_norm <= eps).map(|s| s.value).collect();
    values.sort_by(f64::total_cmp);
    values.dedup_by(|a, b| (*a - *b).abs() <= eps);
    values
}

// ---------------------------------------------------------------------------
// Tilt genericity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TiltOutcome {
    pub tilt: DVector<f64>,
    pub all_morse: bool,
    pub min_abs_eigenvalue: f64,
}

#[derive(Debug, Clone)]
pub struct TiltReport {
    /// Share of random tilts that are Morse at every grid point.
    pub success_fraction: f64,
    pub tilts: Vec<TiltOutcome>,
    /// Outcome for the untilted problem (not counted in the fraction).
    pub untilted: TiltOutcome,
}

fn sample_ball(dim: usize, radius: f64, seed: u64, index: u64) -> DVector<f64> {
    use rand::Rng;
    let mut rng = seeding::stream(seed, index);
    let dir: DVector<f64> = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
    let norm = dir.norm();
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    if norm == 0.0 {
        DVector::zeros(dim)
    } else {
        dir * (r / norm)
    }
}

fn tilt_outcome(p: &BilevelProblem, tilt: DVector<f64>, x_grid: &[DVector<f64>], ybox: &Bounds, scan: ScanOptions) -> Result<TiltOutcome> {
    let tilted = tilt_problem(p, &TiltVector::new(tilt.clone())?)?;
    let report = morse_scan(&tilted, x_grid, ybox, scan)?;
    Ok(TiltOutcome {
        tilt,
        all_morse: report.all_morse(),
        min_abs_eigenvalue: report.rows.iter().map(|r| r.min_abs_eigenvalue).fold(f64::INFINITY, f64::min),
    })
}

/// Samples `n_tilts` vectors uniformly from the ball of radius `tilt_scale`
/// and reports how many tilted problems are Morse at every grid `x`.
pub fn tilt_genericity_experiment(
    p: &BilevelProblem,
    n_tilts: usize,
    tilt_scale: f64,
    x_grid: &[DVector<f64>],
    ybox: &Bounds,
    scan: ScanOptions,
) -> Result<TiltReport> {
    if n_tilts == 0 {
        return Err(Error::InvalidInput("n_tilts must be at least 1".into()));
    }
    let untilted = tilt_outcome(p, DVector::zeros(p.m), x_grid, ybox, scan)?;
    let tilts: Vec<TiltOutcome> = (0..n_tilts)
        .into_par_iter()
        .map(|i| tilt_outcome(p, sample_ball(p.m, tilt_scale, scan.seed, i as u64), x_grid, ybox, scan))
        .collect::<Result<_>>()?;
    let ok = tilts.iter().filter(|t| t.all_morse).count();
    Ok(TiltReport { success_fraction: ok as f64 / n_tilts as f64, tilts, untilted })
}
