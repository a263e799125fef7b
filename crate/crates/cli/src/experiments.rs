//! Experiment registry. Each entry declares its parameters (with defaults)
//! and a runner that turns a resolved configuration into tables.

use bilevel_core::critical::{self, ContinuationOptions, ScanOptions};
use bilevel_core::diagnostics::{self, Figure, FigureOptions, SharpnessOptions, StabilityOptions};
use bilevel_core::export::Table;
use bilevel_core::problem::{check_derivatives, linspace, ProbeStatus, ORACLES};
use bilevel_core::solvers::{self, BranchSolveOptions, SolverConfig, SolverKind, Termination, Trajectory};
use bilevel_core::{builtin_problem, BilevelProblem, Bounds};
use nalgebra::DVector;
use serde_json::{json, Value as Json};

use crate::config::{param, Kind, Param, Resolved};
use crate::error::CliError;

/// What a runner hands back for writing.
#[derive(Debug)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub summary: Json,
    /// `precondition_failed` when the experiment's precondition did not hold.
    pub status: &'static str,
    /// Set when the run stopped early; tables hold the partial result.
    pub failure: Option<String>,
}

impl Outcome {
    fn ok(tables: Vec<Table>, summary: Json) -> Self {
        Self { tables, summary, status: "ok", failure: None }
    }
}

pub struct Experiment {
    pub name: &'static str,
    pub description: &'static str,
    params: fn() -> Vec<Param>,
    run: fn(&Resolved) -> Result<Outcome, CliError>,
}

impl Experiment {
    /// Common keys followed by the experiment's own.
    pub fn schema(&self) -> Vec<Param> {
        let mut all = vec![
            param("experiment", Kind::Str, "auto", "experiment name"),
            param("seed", Kind::Int, "0", "master seed for every random stream"),
            param("output.dir", Kind::Str, "auto", "artifact directory under the output root (default: experiment name)"),
        ];
        all.extend((self.params)());
        all
    }

    pub fn run(&self, cfg: &Resolved) -> Result<Outcome, CliError> {
        (self.run)(cfg)
    }

    /// Value substituted for an `auto` default.
    pub fn auto_default(&self, key: &str, p: Option<&BilevelProblem>) -> String {
        if key == "experiment" || key == "output.dir" {
            return self.name.to_string();
        }
        if let Ok(fig) = Figure::parse(self.name) {
            return figure_default(fig, key);
        }
        let p = p.expect("auto defaults other than figure keys depend on the problem");
        match key {
            "solver.alpha_g" => fmt(0.5 / p.lipschitz_g.value),
            "box.y_lo" => fmt(p.y_box().lo[0]),
            "box.y_hi" => fmt(p.y_box().hi[0]),
            "sharpness.x_star" | "stability.x_star" => star(self.name, &p.name).0.into(),
            "sharpness.y_star" | "stability.z_star" => star(self.name, &p.name).1.into(),
            _ => unreachable!("no auto default for `{key}`"),
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Critical points of `f` used as default stars.
fn star(experiment: &str, problem: &str) -> (&'static str, &'static str) {
    match (experiment, problem) {
        (_, "quadratic_sc") => ("0", "0"),
        ("sharpness", "huber_instability") => ("0", "0.5"),
        ("stability", "huber_instability") => ("0", "1"),
        ("sharpness", "huber_escape") => ("0", "2"),
        ("stability", "huber_escape") => ("0", "1"),
        _ => ("1", "1"),
    }
}

fn figure_default(fig: Figure, key: &str) -> String {
    let d = FigureOptions::defaults(fig);
    match key {
        "figure.alpha_g" => fmt(d.alpha_g),
        "figure.alpha_f" => fmt(d.alpha_f),
        "figure.k_values" => d.k_values.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        "figure.z_lo" => fmt(d.z_lo),
        "figure.z_hi" => fmt(d.z_hi),
        "figure.points" => d.grid_points.to_string(),
        "figure.x" => fmt(d.x),
        "figure.dpbg_k" => d.dpbg_k.to_string(),
        "figure.z0" => fmt(d.z0),
        "figure.iterations" => d.iterations.to_string(),
        "figure.kink_margin" => fmt(d.kink_margin),
        _ => unreachable!("no figure default for `{key}`"),
    }
}

/// Registered experiments, sorted by name.
pub const REGISTRY: [Experiment; 10] = [
    Experiment {
        name: "branch_solve",
        description: "enumerate lower-level branches and descend along every local-minimum branch",
        params: branch_solve_params,
        run: run_branch_solve,
    },
    Experiment {
        name: "derivative_check",
        description: "compare analytic oracles with central differences at random probes",
        params: derivative_params,
        run: run_derivative_check,
    },
    Experiment {
        name: "dpbg",
        description: "joint descent on x and the lower-level initialization z",
        params: dpbg_params,
        run: run_dpbg,
    },
    Experiment {
        name: "fig2",
        description: "phi_k landscape and DPBG trace for huber_instability",
        params: figure_params,
        run: run_figure,
    },
    Experiment {
        name: "fig3",
        description: "phi_k landscape and DPBG trace for huber_escape",
        params: figure_params,
        run: run_figure,
    },
    Experiment {
        name: "morse_scan",
        description: "count and classify lower-level critical points over an x grid",
        params: scan_only_params,
        run: run_morse_scan,
    },
    Experiment {
        name: "sharpness",
        description: "Hessian norm of phi_k along the inverse orbit of a non-minimal critical point",
        params: sharpness_params,
        run: run_sharpness,
    },
    Experiment {
        name: "smbg",
        description: "outer descent on x with k unrolled lower-level steps from a fixed restart point",
        params: smbg_params,
        run: run_smbg,
    },
    Experiment {
        name: "stability",
        description: "DPBG exit times from a ball around a strong minimizer, per k",
        params: stability_params,
        run: run_stability,
    },
    Experiment {
        name: "tilt_genericity",
        description: "share of random linear tilts whose lower level is Morse on the whole grid",
        params: tilt_params,
        run: run_tilt,
    },
];

pub fn find(name: &str) -> Result<&'static Experiment, CliError> {
    REGISTRY.iter().find(|e| e.name == name).ok_or_else(|| CliError::UnknownExperiment {
        name: name.to_string(),
        registered: REGISTRY.iter().map(|e| e.name.to_string()).collect(),
    })
}

// ---------------------------------------------------------------------------
// Parameter groups
// ---------------------------------------------------------------------------

fn problem(default: &'static str) -> Param {
    param("problem", Kind::Problem, default, "built-in problem")
}

fn solver_params() -> Vec<Param> {
    vec![
        param("solver.alpha_f", Kind::Float, "0.1", "outer step size"),
        param("solver.alpha_g", Kind::Float, "auto", "inner step size (default 0.5 / L_g)"),
        param("solver.k", Kind::Int, "20", "unrolled lower-level steps"),
        param("solver.iterations", Kind::Int, "500", "outer iterations"),
        param("solver.stop_grad_tol", Kind::OptFloat, "none", "early stop on the gradient norm"),
        param("solver.record_every", Kind::Int, "1", "record every n-th iterate"),
        param("solver.kink_margin", Kind::Float, "0.001", "refuse Hessians this close to a kink"),
    ]
}

fn grid_params() -> Vec<Param> {
    vec![
        param("grid.x_lo", Kind::Float, "-1", "x grid lower bound (every coordinate)"),
        param("grid.x_hi", Kind::Float, "1", "x grid upper bound (every coordinate)"),
        param("grid.points", Kind::Int, "21", "grid points per coordinate"),
        param("box.y_lo", Kind::Float, "auto", "y search box lower bound (default: problem box)"),
        param("box.y_hi", Kind::Float, "auto", "y search box upper bound (default: problem box)"),
        param("scan.n_starts", Kind::Int, "32", "Newton starts per grid point"),
        param("scan.tol", Kind::Float, "1e-10", "critical-point residual tolerance"),
    ]
}

fn smbg_params() -> Vec<Param> {
    let mut v = vec![problem("quadratic_sc")];
    v.extend(solver_params());
    v.push(param("init.x", Kind::Point, "random", "outer start, or random in the x box"));
    v.push(param("init.y", Kind::Point, "random", "restart point of the lower level, or random in the y box"));
    v.push(param("reference.branches", Kind::Bool, "false", "record bias against continued branches"));
    v.extend(grid_params());
    v
}

fn dpbg_params() -> Vec<Param> {
    let mut v = vec![problem("quadratic_sc")];
    v.extend(solver_params());
    v.push(param("init.x", Kind::Point, "random", "outer start, or random in the x box"));
    v.push(param("init.z", Kind::Point, "random", "initial lower-level start, or random in the y box"));
    v
}

fn branch_solve_params() -> Vec<Param> {
    let mut v = vec![
        problem("double_well_tilt"),
        param("init.x", Kind::Point, "random", "descent start, or random in the grid range"),
        param("solver.alpha_f", Kind::Float, "0.1", "step size along each branch"),
        param("solver.iterations", Kind::Int, "1000", "maximum steps per branch"),
        param("solver.tol", Kind::Float, "1e-8", "stop once the branch gradient is this small"),
        param("continuation.tol", Kind::Float, "1e-10", "corrector residual tolerance"),
        param("continuation.max_halvings", Kind::Int, "20", "step halvings before a stall"),
    ];
    v.extend(grid_params());
    v
}

fn scan_only_params() -> Vec<Param> {
    let mut v = vec![problem("double_well_tilt")];
    v.extend(grid_params());
    v
}

fn tilt_params() -> Vec<Param> {
    let mut v = vec![
        problem("nonmorse_pitchfork"),
        param("tilt.count", Kind::Int, "50", "number of random tilts"),
        param("tilt.scale", Kind::Float, "0.1", "radius of the tilt ball"),
    ];
    v.extend(grid_params());
    v
}

fn sharpness_params() -> Vec<Param> {
    vec![
        problem("huber_instability"),
        param("sharpness.x_star", Kind::Floats, "auto", "x of the critical point of f"),
        param("sharpness.y_star", Kind::Floats, "auto", "y of the critical point of f"),
        param("sharpness.k_values", Kind::Ints, "1..25", "orbit lengths"),
        param("sharpness.crit_tol", Kind::Float, "1e-8", "tolerance on the gradient of f at the star"),
        param("solver.alpha_g", Kind::Float, "0.1", "inner step size"),
        param("box.y_lo", Kind::Float, "-2", "escape box lower bound"),
        param("box.y_hi", Kind::Float, "2", "escape box upper bound"),
    ]
}

fn stability_params() -> Vec<Param> {
    vec![
        problem("huber_instability"),
        param("stability.x_star", Kind::Floats, "auto", "strong minimizer, x part"),
        param("stability.z_star", Kind::Floats, "auto", "strong minimizer, lower-level part"),
        param("stability.delta", Kind::Float, "0.3", "exit radius"),
        param("stability.k_values", Kind::Ints, "2..20", "inner step counts"),
        param("stability.l_max", Kind::Int, "1000000", "iteration cap; runs that never exit are censored"),
        param("stability.init_offset", Kind::Float, "0.05", "offset added to every start coordinate"),
        param("stability.grad_tol", Kind::Float, "1e-6", "tolerance on the implicit gradient at the star"),
        param("solver.alpha_f", Kind::Float, "0.05", "outer step size"),
        param("solver.alpha_g", Kind::Float, "0.1", "inner step size"),
    ]
}

fn derivative_params() -> Vec<Param> {
    vec![
        problem("quadratic_sc"),
        param("derivative.probes", Kind::Int, "20", "random probe points in the domain"),
        param("derivative.h", Kind::Float, "1e-5", "central-difference step"),
    ]
}

fn figure_params() -> Vec<Param> {
    vec![
        param("figure.alpha_g", Kind::Float, "auto", "inner step size"),
        param("figure.alpha_f", Kind::Float, "auto", "DPBG step size"),
        param("figure.k_values", Kind::Ints, "auto", "profile curves"),
        param("figure.z_lo", Kind::Float, "auto", "profile range lower bound"),
        param("figure.z_hi", Kind::Float, "auto", "profile range upper bound"),
        param("figure.points", Kind::Int, "auto", "profile grid points"),
        param("figure.x", Kind::Float, "auto", "upper-level value of the profile"),
        param("figure.dpbg_k", Kind::Int, "auto", "inner steps of the DPBG trace"),
        param("figure.z0", Kind::Float, "auto", "DPBG start in z"),
        param("figure.iterations", Kind::Int, "auto", "DPBG iterations"),
        param("figure.kink_margin", Kind::Float, "auto", "DPBG kink margin"),
    ]
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn load_problem(cfg: &Resolved) -> Result<BilevelProblem, CliError> {
    Ok(builtin_problem(cfg.str("problem"))?)
}

fn vector(key: &str, coords: &[f64], dim: usize) -> Result<DVector<f64>, CliError> {
    if coords.len() != dim {
        return Err(CliError::InvalidValues {
            errors: vec![(key.to_string(), format!("expected {dim} coordinates, found {}", coords.len()))],
        });
    }
    Ok(DVector::from_row_slice(coords))
}

/// Explicit point, or a uniform draw from `bounds` on stream `stream`.
fn start_point(cfg: &Resolved, key: &str, bounds: &Bounds, stream: u64) -> Result<DVector<f64>, CliError> {
    match cfg.point(key) {
        Some(c) => vector(key, c, bounds.dim()),
        None => Ok(solvers::random_point(bounds, cfg.int("seed"), stream)),
    }
}

fn x_grid(cfg: &Resolved, n: usize) -> Result<Vec<DVector<f64>>, CliError> {
    let (lo, hi, points) = (cfg.float("grid.x_lo"), cfg.float("grid.x_hi"), cfg.usize("grid.points"));
    if !(hi > lo) || points < 2 {
        return Err(CliError::InvalidValues {
            errors: vec![("grid.points".into(), "the x grid needs grid.x_hi > grid.x_lo and at least two points".into())],
        });
    }
    if n == 1 {
        return Ok(linspace(lo, hi, points).into_iter().map(|t| DVector::from_element(1, t)).collect());
    }
    Ok(Bounds::cube(n, lo, hi).grid(points))
}

fn y_box(cfg: &Resolved, m: usize) -> Result<Bounds, CliError> {
    let (lo, hi) = (cfg.float("box.y_lo"), cfg.float("box.y_hi"));
    if !(hi > lo) {
        return Err(CliError::InvalidValues { errors: vec![("box.y_hi".into(), "must exceed box.y_lo".into())] });
    }
    Ok(Bounds::cube(m, lo, hi))
}

fn scan_options(cfg: &Resolved) -> ScanOptions {
    ScanOptions { n_starts: cfg.usize("scan.n_starts"), seed: cfg.int("seed"), tol: cfg.float("scan.tol") }
}

fn solver_config(cfg: &Resolved) -> SolverConfig {
    SolverConfig {
        alpha_f: cfg.float("solver.alpha_f"),
        alpha_g: cfg.float("solver.alpha_g"),
        k: cfg.usize("solver.k"),
        iterations: cfg.usize("solver.iterations"),
        seed: cfg.int("seed"),
        stop_grad_tol: cfg.opt_float("solver.stop_grad_tol"),
        record_every: cfg.usize("solver.record_every"),
        kink_margin: cfg.float("solver.kink_margin"),
    }
}

fn trajectory_outcome(t: Trajectory, mut extra: Vec<Table>) -> Outcome {
    let last = t.last();
    let summary = json!({
        "termination": t.termination.describe(),
        "records": t.records.len(),
        "final_x": last.x.as_slice(),
        "final_companion": last.companion.as_slice(),
        "final_phi_k": last.phi_k,
        "final_grad_x_norm": last.grad_x_norm,
        "final_grad_z_norm": (t.kind == SolverKind::Dpbg).then_some(last.grad_z_norm),
        "max_bias": t.max_bias(),
        "branch_switches": t.branch_switches,
    });
    let failure = match &t.termination {
        Termination::Failed { .. } => Some(t.termination.describe()),
        _ => None,
    };
    let mut tables = vec![t.to_table()];
    tables.append(&mut extra);
    Outcome { tables, summary, status: "ok", failure }
}

/// Precondition failures are a reportable result, not a crash.
fn precondition_outcome(table_name: &str, e: bilevel_core::Error) -> Result<Outcome, CliError> {
    match e {
        bilevel_core::Error::Precondition(_) | bilevel_core::Error::NotCritical { .. } => {
            let mut t = Table::with_columns(table_name, &["precondition_met"]);
            t.push(vec![0.0]);
            Ok(Outcome {
                tables: vec![t],
                summary: json!({ "precondition_met": false, "reason": e.to_string() }),
                status: "precondition_failed",
                failure: None,
            })
        }
        other => Err(other.into()),
    }
}

// ---------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------

fn run_smbg(cfg: &Resolved) -> Result<Outcome, CliError> {
    let p = load_problem(cfg)?;
    let x0 = start_point(cfg, "init.x", &p.x_box(), 0)?;
    let y0 = start_point(cfg, "init.y", &p.y_box(), 1)?;
    let branches = if cfg.bool("reference.branches") {
        let set = critical::enumerate_branches(&p, &x_grid(cfg, p.n)?, &y_box(cfg, p.m)?, scan_options(cfg), ContinuationOptions::default())?;
        Some(set.branches)
    } else {
        None
    };
    let t = solvers::smbg(&p, &solver_config(cfg), &x0, &y0, branches.as_deref())?;
    let extra = branches.iter().flatten().map(|b| b.to_table()).collect();
    Ok(trajectory_outcome(t, extra))
}

fn run_dpbg(cfg: &Resolved) -> Result<Outcome, CliError> {
    let p = load_problem(cfg)?;
    let x0 = start_point(cfg, "init.x", &p.x_box(), 0)?;
    let z0 = start_point(cfg, "init.z", &p.y_box(), 1)?;
    let t = solvers::dpbg(&p, &solver_config(cfg), &x0, &z0)?;
    Ok(trajectory_outcome(t, Vec::new()))
}

fn run_branch_solve(cfg: &Resolved) -> Result<Outcome, CliError> {
    let p = load_problem(cfg)?;
    let grid = x_grid(cfg, p.n)?;
    let range = Bounds::cube(p.n, cfg.float("grid.x_lo"), cfg.float("grid.x_hi"));
    let x0 = start_point(cfg, "init.x", &range, 0)?;
    let opts = BranchSolveOptions {
        alpha_f: cfg.float("solver.alpha_f"),
        iterations: cfg.usize("solver.iterations"),
        tol: cfg.float("solver.tol"),
        scan: scan_options(cfg),
        continuation: ContinuationOptions {
            tol: cfg.float("continuation.tol"),
            max_halvings: cfg.usize("continuation.max_halvings"),
            ..Default::default()
        },
    };
    let ybox = y_box(cfg, p.m)?;
    // the branches themselves are exported alongside the candidates
    let set = critical::enumerate_branches(&p, &grid, &ybox, opts.scan, opts.continuation)?;
    let r = solvers::branch_enumeration_solve(&p, &grid, &x0, &ybox, opts)?;
    let mut tables = vec![r.to_table()];
    tables.extend(set.branches.iter().map(|b| b.to_table()));
    let summary = json!({
        "total_branches": r.total_branches,
        "local_min_branches": set.local_min,
        "best_branch": r.best.branch_id,
        "best_x": r.best.x.as_slice(),
        "best_y": r.best.y.as_slice(),
        "best_value": r.best.value,
        "skipped": r.skipped.iter().map(|(id, why)| json!({ "branch_id": id, "reason": why })).collect::<Vec<_>>(),
    });
    Ok(Outcome::ok(tables, summary))
}

fn run_morse_scan(cfg: &Resolved) -> Result<Outcome, CliError> {
    let p = load_problem(cfg)?;
    let report = critical::morse_scan(&p, &x_grid(cfg, p.n)?, &y_box(cfg, p.m)?, scan_options(cfg))?;
    let mut columns: Vec<String> = (1..=p.n).map(|i| format!("x_{i}")).collect();
    columns.extend(["count", "min_abs_eigenvalue", "is_morse", "count_deviates"].map(String::from));
    let mut t = Table::new("morse_scan", columns);
    for r in &report.rows {
        let mut row: Vec<f64> = r.x.iter().copied().collect();
        row.extend([r.count as f64, r.min_abs_eigenvalue, r.is_morse as u8 as f64, r.count_deviates as u8 as f64]);
        t.push(row);
    }
    let summary = json!({
        "all_morse": report.all_morse(),
        "constant_count": report.constant_count(),
        "modal_count": report.modal_count,
    });
    Ok(Outcome::ok(vec![t], summary))
}

fn run_tilt(cfg: &Resolved) -> Result<Outcome, CliError> {
    let p = load_problem(cfg)?;
    let r = critical::tilt_genericity_experiment(
        &p,
        cfg.usize("tilt.count"),
        cfg.float("tilt.scale"),
        &x_grid(cfg, p.n)?,
        &y_box(cfg, p.m)?,
        scan_options(cfg),
    )?;
    let mut columns = vec!["tilt".to_string()];
    columns.extend((1..=p.m).map(|i| format!("a_{i}")));
    columns.extend(["all_morse", "min_abs_eigenvalue"].map(String::from));
    let mut t = Table::new("tilts", columns);
    for (i, o) in r.tilts.iter().enumerate() {
        let mut row = vec![(i + 1) as f64];
        row.extend(o.tilt.iter());
        row.extend([o.all_morse as u8 as f64, o.min_abs_eigenvalue]);
        t.push(row);
    }
    let summary = json!({
        "success_fraction": r.success_fraction,
        "untilted_all_morse": r.untilted.all_morse,
        "untilted_min_abs_eigenvalue": r.untilted.min_abs_eigenvalue,
    });
    Ok(Outcome::ok(vec![t], summary))
}

fn run_sharpness(cfg: &Resolved) -> Result<Outcome, CliError> {
    let p = load_problem(cfg)?;
    let x = vector("sharpness.x_star", cfg.floats("sharpness.x_star"), p.n)?;
    let y = vector("sharpness.y_star", cfg.floats("sharpness.y_star"), p.m)?;
    let opts = SharpnessOptions { crit_tol: cfg.float("sharpness.crit_tol"), ..Default::default() };
    let curve = diagnostics::sharpness_curve(&p, &x, &y, cfg.float("solver.alpha_g"), &cfg.ints("sharpness.k_values"), &y_box(cfg, p.m)?, opts);
    match curve {
        Ok(c) => {
            let summary = json!({
                "precondition_met": true,
                "log_slope": c.log_slope,
                "escaped_from_k": c.points.iter().find(|pt| pt.escaped).map(|pt| pt.k),
            });
            Ok(Outcome::ok(vec![c.to_table()], summary))
        }
        Err(e) => precondition_outcome("sharpness_status", e),
    }
}

fn run_stability(cfg: &Resolved) -> Result<Outcome, CliError> {
    let p = load_problem(cfg)?;
    let x = vector("stability.x_star", cfg.floats("stability.x_star"), p.n)?;
    let z = vector("stability.z_star", cfg.floats("stability.z_star"), p.m)?;
    let opts = StabilityOptions {
        delta: cfg.float("stability.delta"),
        alpha_f: cfg.float("solver.alpha_f"),
        alpha_g: cfg.float("solver.alpha_g"),
        k_values: cfg.ints("stability.k_values"),
        l_max: cfg.usize("stability.l_max"),
        init_offset: cfg.float("stability.init_offset"),
        grad_tol: cfg.float("stability.grad_tol"),
    };
    match diagnostics::stability_exit_time(&p, &x, &z, &opts) {
        Ok(r) => {
            let summary = json!({
                "precondition_met": true,
                "log_slope": r.log_slope,
                "censored": r.points.iter().filter(|pt| pt.exit_iteration.is_none()).count(),
            });
            Ok(Outcome::ok(vec![r.to_table()], summary))
        }
        Err(e) => precondition_outcome("stability_status", e),
    }
}

fn run_derivative_check(cfg: &Resolved) -> Result<Outcome, CliError> {
    let p = load_problem(cfg)?;
    let seed = cfg.int("seed");
    let points: Vec<(DVector<f64>, DVector<f64>)> = (0..cfg.int("derivative.probes"))
        .map(|i| {
            let xy = solvers::random_point(&p.domain, seed, i);
            (xy.rows(0, p.n).into_owned(), xy.rows(p.n, p.m).into_owned())
        })
        .collect();
    let report = check_derivatives(&p, &points, cfg.float("derivative.h"))?;
    let mut columns = vec!["probe".to_string()];
    columns.extend((1..=p.n).map(|i| format!("x_{i}")));
    columns.extend((1..=p.m).map(|i| format!("y_{i}")));
    // 0 = checked, 1 = near a kink, 2 = non-finite oracle
    columns.push("status".into());
    columns.extend(ORACLES.iter().map(|o| format!("err_{o}")));
    let mut t = Table::new("probes", columns);
    for (i, pr) in report.probes.iter().enumerate() {
        let mut row = vec![i as f64];
        row.extend(pr.x.iter().chain(pr.y.iter()));
        row.push(match pr.status {
            ProbeStatus::Ok => 0.0,
            ProbeStatus::NearKink => 1.0,
            ProbeStatus::EvaluationFailure(_) => 2.0,
        });
        if pr.errors.len() == ORACLES.len() {
            row.extend(pr.errors.iter());
        } else {
            row.extend([f64::NAN; ORACLES.len()]);
        }
        t.push(row);
    }
    let max: serde_json::Map<String, Json> = ORACLES.iter().zip(report.max_errors).map(|(o, e)| (o.to_string(), json!(e))).collect();
    let summary = json!({ "max_relative_errors": max, "worst": report.worst(), "flagged": report.flagged() });
    Ok(Outcome::ok(vec![t], summary))
}

fn run_figure(cfg: &Resolved) -> Result<Outcome, CliError> {
    let fig = Figure::parse(&cfg.experiment)?;
    let opts = FigureOptions {
        alpha_g: cfg.float("figure.alpha_g"),
        alpha_f: cfg.float("figure.alpha_f"),
        k_values: cfg.ints("figure.k_values"),
        z_lo: cfg.float("figure.z_lo"),
        z_hi: cfg.float("figure.z_hi"),
        grid_points: cfg.usize("figure.points"),
        x: cfg.float("figure.x"),
        dpbg_k: cfg.usize("figure.dpbg_k"),
        z0: cfg.float("figure.z0"),
        iterations: cfg.usize("figure.iterations"),
        kink_margin: cfg.float("figure.kink_margin"),
    };
    let bundle = diagnostics::figure_data(fig, &opts)?;
    let last = bundle.trace.last();
    let summary = json!({
        "problem": fig.problem(),
        "termination": bundle.trace.termination.describe(),
        "final_z": last.companion.as_slice(),
        "final_phi_k": last.phi_k,
    });
    let failure = match &bundle.trace.termination {
        Termination::Failed { .. } => Some(bundle.trace.termination.describe()),
        _ => None,
    };
    Ok(Outcome { tables: bundle.tables(), summary, status: "ok", failure })
}
