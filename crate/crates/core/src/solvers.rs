//! Bilevel gradient solvers built on the unrolled lower level.
//!
//! * [`smbg`] warm-starts the inner loop from the previous inner output and
//!   steps `x` only.
//! * [`dpbg`] treats the initialization `z` as a free variable and runs plain
//!   gradient descent on `φᵏ(x, z)`.
//! * [`branch_enumeration_solve`] minimizes `f(x, y⁽ⁱ⁾(x))` separately along
//!   every local-minimum branch.

use nalgebra::DVector;
use rand::Rng;

use crate::critical::{self, Branch, ContinuationOptions, ScanOptions};
use crate::error::{Error, Result};
use crate::export::Table;
use crate::lld::{grad_phi_k_with, JacobianOptions, PhiGradient, DEFAULT_KINK_MARGIN};
use crate::problem::{BilevelProblem, Bounds};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub alpha_f: f64,
    pub alpha_g: f64,
    pub k: usize,
    /// Number of outer iterations `L`.
    pub iterations: usize,
    pub seed: u64,
    /// Early stop once the relevant gradient norm drops to this value.
    pub stop_grad_tol: Option<f64>,
    pub record_every: usize,
    /// Refuse Hessians within this distance of a C¹-only kink.
    pub kink_margin: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { alpha_f: 0.1, alpha_g: 0.5, k: 20, iterations: 500, seed: 0, stop_grad_tol: None, record_every: 1, kink_margin: DEFAULT_KINK_MARGIN }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("alpha_f", self.alpha_f)?;
        positive("alpha_g", self.alpha_g)?;
        if self.iterations == 0 {
            return Err(Error::InvalidInput("iterations must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidInput("record_every must be at least 1".into()));
        }
        if !(self.kink_margin >= 0.0) {
            return Err(Error::InvalidInput(format!("kink_margin must be non-negative, got {}", self.kink_margin)));
        }
        if let Some(tol) = self.stop_grad_tol {
            if !(tol >= 0.0) {
                return Err(Error::InvalidInput(format!("stop_grad_tol must be non-negative, got {tol}")));
            }
        }
        Ok(())
    }
}

/// Uniform draw from `bounds` on stream `index` of `seed`.
pub fn random_point(bounds: &Bounds, seed: u64, index: u64) -> DVector<f64> {
    let mut rng = seeding::stream(seed, index);
    let u: Vec<f64> = (0..bounds.dim()).map(|_| rng.random::<f64>()).collect();
    bounds.from_unit(&u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Smbg,
    Dpbg,
}

impl SolverKind {
    fn companion(&self) -> &'static str {
        match self {
            Self::Smbg => "y",
            Self::Dpbg => "z",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    /// All `L` iterations ran.
    Completed,
    /// The stopping gradient norm was reached at this iteration.
    Converged { iteration: usize },
    /// An iterate or inner pass became unusable; the trajectory ends at the
    /// last good iterate.
    Failed { iteration: usize, reason: String },
}

impl Termination {
    pub fn describe(&self) -> String {
        match self {
            Self::Completed => "completed".into(),
            Self::Converged { iteration } => format!("converged at iteration {iteration}"),
            Self::Failed { iteration, reason } => format!("failed at iteration {iteration}: {reason}"),
        }
    }
}

/// Diagnostics against a reference branch set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchMatch {
    pub branch_id: usize,
    pub distance: f64,
    /// `‖ξ_ℓ‖ = ‖∇_x φᵏ − ∇φ_i‖` at the matched branch.
    pub bias: f64,
}

/// State at outer iteration `ℓ`, with `φᵏ` and its gradients evaluated at
/// `(x_ℓ, companion_ℓ)`.
#[derive(Debug, Clone)]
pub struct IterateRecord {
    pub iteration: usize,
    pub x: DVector<f64>,
    pub companion: DVector<f64>,
    pub phi_k: f64,
    pub grad_x_norm: f64,
    pub grad_z_norm: f64,
    pub reference: Option<BranchMatch>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub kind: SolverKind,
    pub records: Vec<IterateRecord>,
    pub termination: Termination,
    /// Changes of the nearest reference branch after the first iteration.
    pub branch_switches: usize,
}

impl Trajectory {
    pub fn last(&self) -> &IterateRecord {
        self.records.last().expect("a trajectory holds at least the initial iterate")
    }

    pub fn max_bias(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.reference.map(|m| m.bias)).reduce(f64::max)
    }

    pub fn to_table(&self) -> Table {
        let first = &self.records[0];
        let with_reference = self.records.iter().any(|r| r.reference.is_some());
        let mut columns = vec!["iteration".to_string()];
        columns.extend((1..=first.x.len()).map(|i| format!("x_{i}")));
        columns.extend((1..=first.companion.len()).map(|i| format!("{}_{i}", self.kind.companion())));
        columns.push("phi_k".into());
        columns.push("grad_x_norm".into());
        if self.kind == SolverKind::Dpbg {
            columns.push("grad_z_norm".into());
        }
        if with_reference {
            columns.extend(["branch_id", "branch_distance", "bias_norm"].map(String::from));
        }
        let mut table = Table::new(
            match self.kind {
                SolverKind::Smbg => "smbg_trajectory",
                SolverKind::Dpbg => "dpbg_trajectory",
            },
            columns,
        );
        for r in &self.records {
            let mut row = vec![r.iteration as f64];
            row.extend(r.x.iter().chain(r.companion.iter()));
            row.push(r.phi_k);
            row.push(r.grad_x_norm);
            if self.kind == SolverKind::Dpbg {
                row.push(r.grad_z_norm);
            }
            if with_reference {
                match r.reference {
                    Some(m) => row.extend([m.branch_id as f64, m.distance, m.bias]),
                    None => row.extend([f64::NAN; 3]),
                }
            }
            table.push(row);
        }
        table
    }
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|c| c.is_finite())
}

/// Nearest reference branch to `y` at `x`, with the bias of `grad_x`
/// against that branch's implicit gradient. Branches that cannot be
/// continued to `x` are skipped.
fn match_branch(p: &BilevelProblem, branches: &[Branch], x: &DVector<f64>, y: &DVector<f64>, grad_x: &DVector<f64>) -> Option<BranchMatch> {
    let opts = ContinuationOptions::default();
    branches
        .iter()
        .filter_map(|b| {
            let yb = b.locate(p, x, opts).ok()?;
            Some((b.id, (y - &yb).norm(), yb))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .and_then(|(id, distance, yb)| {
            let implicit = critical::implicit_grad_phi(p, x, &yb, 1e2 * opts.tol).ok()?;
            Some(BranchMatch { branch_id: id, distance, bias: (grad_x - implicit.grad).norm() })
        })
}

struct Runner<'a> {
    p: &'a BilevelProblem,
    cfg: &'a SolverConfig,
    kind: SolverKind,
    reference: Option<&'a [Branch]>,
    records: Vec<IterateRecord>,
    last_branch: Option<usize>,
    switches: usize,
}

impl Runner<'_> {
    fn record(&mut self, iteration: usize, x: &DVector<f64>, c: &DVector<f64>, eval: &PhiGradient, force: bool) {
        let reference = self.reference.and_then(|b| match_branch(self.p, b, x, c, &eval.grad_x));
        if let Some(m) = reference {
            if iteration > 1 && self.last_branch.is_some_and(|id| id != m.branch_id) {
                self.switches += 1;
            }
            self.last_branch = Some(m.branch_id);
        }
        if force || iteration % self.cfg.record_every == 0 {
            self.records.push(IterateRecord {
                iteration,
                x: x.clone(),
                companion: c.clone(),
                phi_k: eval.value,
                grad_x_norm: eval.grad_x.norm(),
                grad_z_norm: eval.grad_z.norm(),
                reference,
            });
        }
    }

    fn stop_norm(&self, eval: &PhiGradient) -> f64 {
        match self.kind {
            SolverKind::Smbg => eval.grad_x.norm(),
            SolverKind::Dpbg => eval.norm(),
        }
    }

    fn run(mut self, x0: &DVector<f64>, c0: &DVector<f64>) -> Result<Trajectory> {
        let (p, cfg) = (self.p, self.cfg);
        let mut x = x0.clone();
        let mut c = c0.clone();
        let jac = JacobianOptions { kink_margin: cfg.kink_margin };
        let mut eval = grad_phi_k_with(p, &x, &c, cfg.alpha_g, cfg.k, jac)?;
        let mut termination = Termination::Completed;
        for iteration in 0..=cfg.iterations {
            let converged = cfg.stop_grad_tol.is_some_and(|tol| self.stop_norm(&eval) <= tol);
            self.record(iteration, &x, &c, &eval, converged || iteration == cfg.iterations);
            if converged {
                termination = Termination::Converged { iteration };
                break;
            }
            if iteration == cfg.iterations {
                break;
            }
            let next_x = &x - &eval.grad_x * cfg.alpha_f;
            let next_c = match self.kind {
                // y_ℓ and the x step come from the same inner pass
                SolverKind::Smbg => eval.y_final.clone(),
                SolverKind::Dpbg => &c - &eval.grad_z * cfg.alpha_f,
            };
            let failure = if !finite(&next_x) || !finite(&next_c) {
                Some("non-finite iterate".to_string())
            } else {
                match grad_phi_k_with(p, &next_x, &next_c, cfg.alpha_g, cfg.k, jac) {
                    Ok(e) if e.value.is_finite() => {
                        eval = e;
                        None
                    }
                    Ok(_) => Some("non-finite objective".to_string()),
                    Err(e) => Some(e.to_string()),
                }
            };
            if let Some(reason) = failure {
                termination = Termination::Failed { iteration: iteration + 1, reason };
                if self.records.last().map(|r| r.iteration) != Some(iteration) {
                    self.record(iteration, &x, &c, &eval, true);
                }
                break;
            }
            x = next_x;
            c = next_c;
        }
        Ok(Trajectory { kind: self.kind, records: self.records, termination, branch_switches: self.switches })
    }
}

fn start(
    p: &BilevelProblem,
    cfg: &SolverConfig,
    kind: SolverKind,
    x0: &DVector<f64>,
    c0: &DVector<f64>,
    reference: Option<&[Branch]>,
) -> Result<Trajectory> {
    cfg.validate()?;
    p.check_dims(x0, c0)?;
    Runner { p, cfg, kind, reference, records: Vec::new(), last_branch: None, switches: 0 }.run(x0, c0)
}

/// Single-loop multi-step bilevel gradient: per outer iteration one inner
/// pass of `k` steps from `(x_{ℓ−1}, y_{ℓ−1})` gives both `y_ℓ` and the
/// hypergradient used for `x_ℓ`.
///
/// With `reference` branches, each iterate is matched to the nearest branch
/// and the bias against the implicit gradient along it is recorded.
pub fn smbg(
    p: &BilevelProblem,
    cfg: &SolverConfig,
    x0: &DVector<f64>,
    y0: &DVector<f64>,
    reference: Option<&[Branch]>,
) -> Result<Trajectory> {
    start(p, cfg, SolverKind::Smbg, x0, y0, reference)
}

/// Gradient descent on `(x, z) ↦ φᵏ(x, z)` with both partial gradients from
/// one inner pass.
pub fn dpbg(p: &BilevelProblem, cfg: &SolverConfig, x0: &DVector<f64>, z0: &DVector<f64>) -> Result<Trajectory> {
    start(p, cfg, SolverKind::Dpbg, x0, z0, None)
}

#[derive(Debug, Clone)]
pub struct BranchCandidate {
    pub branch_id: usize,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct BranchSolveResult {
    pub best: BranchCandidate,
    pub candidates: Vec<BranchCandidate>,
    /// Branches that could not be followed, with the reason.
    pub skipped: Vec<(usize, String)>,
    pub total_branches: usize,
}

impl BranchSolveResult {
    pub fn to_table(&self) -> Table {
        let n = self.best.x.len();
        let m = self.best.y.len();
        let mut columns = vec!["branch_id".to_string()];
        columns.extend((1..=n).map(|i| format!("x_{i}")));
        columns.extend((1..=m).map(|i| format!("y_{i}")));
        columns.extend(["value", "grad_norm", "iterations", "is_best"].map(String::from));
        let mut t = Table::new("branch_candidates", columns);
        for c in &self.candidates {
            let mut row = vec![c.branch_id as f64];
            row.extend(c.x.iter().chain(c.y.iter()));
            row.extend([c.value, c.grad_norm, c.iterations as f64, (c.branch_id == self.best.branch_id) as u8 as f64]);
            t.push(row);
        }
        t
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BranchSolveOptions {
    pub alpha_f: f64,
    pub iterations: usize,
    /// Stop once `‖∇φ_i‖` is at most this.
    pub tol: f64,
    pub scan: ScanOptions,
    pub continuation: ContinuationOptions,
}

impl Default for BranchSolveOptions {
    fn default() -> Self {
        Self {
            alpha_f: 0.1,
            iterations: 1000,
            tol: 1e-8,
            scan: ScanOptions::default(),
            continuation: ContinuationOptions::default(),
        }
    }
}

fn descend_branch(p: &BilevelProblem, branch: &Branch, x0: &DVector<f64>, opts: &BranchSolveOptions) -> Result<BranchCandidate> {
    let mut x = x0.clone();
    let mut y = branch.locate(p, &x, opts.continuation)?;
    let slack = 1e2 * opts.continuation.tol;
    let mut grad = critical::implicit_grad_phi(p, &x, &y, slack)?;
    let mut iterations = 0;
    while iterations < opts.iterations && grad.grad.norm() > opts.tol {
        let next_x = &x - &grad.grad * opts.alpha_f;
        y = critical::track_point(p, &x, &y, &next_x, branch.index, &opts.continuation)?;
        x = next_x;
        grad = critical::implicit_grad_phi(p, &x, &y, slack)?;
        iterations += 1;
    }
    Ok(BranchCandidate { branch_id: branch.id, value: grad.value, grad_norm: grad.grad.norm(), x, y, iterations })
}

/// Enumerates branches over `x_grid`, descends `f(x, y⁽ⁱ⁾(x))` from `x0`
/// along every local-minimum branch, and returns the smallest final value.
pub fn branch_enumeration_solve(
    p: &BilevelProblem,
    x_grid: &[DVector<f64>],
    x0: &DVector<f64>,
    ybox: &Bounds,
    opts: BranchSolveOptions,
) -> Result<BranchSolveResult> {
    if !(opts.alpha_f > 0.0) {
        return Err(Error::InvalidInput(format!("alpha_f must be positive, got {}", opts.alpha_f)));
    }
    let set = critical::enumerate_branches(p, x_grid, ybox, opts.scan, opts.continuation)?;
    let mut candidates = Vec::new();
    let mut skipped = Vec::new();
    for b in set.branches.iter().filter(|b| b.is_local_min_branch) {
        match descend_branch(p, b, x0, &opts) {
            Ok(c) => candidates.push(c),
            Err(e) => {
                log::warn!("branch {} skipped: {e}", b.id);
                skipped.push((b.id, e.to_string()));
            }
        }
    }
    let best = candidates
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .cloned()
        .ok_or_else(|| Error::Precondition("no local-minimum branch could be followed".into()))?;
    Ok(BranchSolveResult { best, candidates, skipped, total_branches: set.total })
}
