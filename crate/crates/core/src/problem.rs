//! Bilevel problem definitions: derivative oracles for the upper objective
//! `f(x, y)` and the lower objective `g(x, y)`, the built-in problem zoo, tilt
//! perturbations, and finite-difference validation of the oracles.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{relative_error, relative_error_vec, SymmetricEigen};

/// Upper-level objective `f`. Gradient and Hessian are over the stacked
/// variable `(x, y)` of length `n + m`.
pub trait UpperObjective: Send + Sync {
    fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;
}

/// Lower-level objective `g` and the partial derivatives the algorithms use.
pub trait LowerObjective: Send + Sync {
    fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64;
    /// `∇_y g`, length `m`.
    fn grad_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    /// `∂²_yy g`, `m × m`.
    fn hess_yy(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;
    /// `∂²_yx g`, `m × n`.
    fn hess_yx(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;
    /// Distance in `y` to the nearest point where `g` is only C¹, if any.
    fn kink_distance(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> Option<f64> {
        None
    }
}

/// Axis-aligned box, one interval per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self { lo: vec![lo; dim], hi: vec![hi; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, p: &DVector<f64>) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Largest absolute coordinate bound.
    pub fn radius(&self) -> f64 {
        self.lo.iter().chain(&self.hi).fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Maps a point of the unit cube into the box.
    pub fn from_unit(&self, u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            u.iter().zip(self.lo.iter().zip(&self.hi)).map(|(t, (lo, hi))| lo + t * (hi - lo)),
        )
    }

    /// Tensor grid with `density` points per axis (endpoints included).
    pub fn grid(&self, density: usize) -> Vec<DVector<f64>> {
        if density == 0 || self.dim() == 0 {
            return Vec::new();
        }
        let axes: Vec<Vec<f64>> = (0..self.dim())
            .map(|i| linspace(self.lo[i], self.hi[i], density))
            .collect();
        let total = density.pow(self.dim() as u32);
        (0..total)
            .map(|mut idx| {
                DVector::from_iterator(
                    self.dim(),
                    axes.iter().map(|axis| {
                        let v = axis[idx % density];
                        idx /= density;
                        v
                    }),
                )
            })
            .collect()
    }
}

/// `count` evenly spaced points on `[lo, hi]`, endpoints exact.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| {
                if i + 1 == count {
                    hi
                } else {
                    lo + (hi - lo) * (i as f64) / ((count - 1) as f64)
                }
            })
            .collect(),
    }
}

/// Lipschitz constant of `∇_y g(x, ·)` with a flag telling whether it is a
/// proven bound or an estimate. Step-size violations are hard errors only
/// for exact constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzConstant {
    pub value: f64,
    pub exact: bool,
}

/// Linear perturbation `a` of the lower objective, `g − ⟨a, y⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltVector(pub DVector<f64>);

impl TiltVector {
    pub fn new(a: DVector<f64>) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("tilt vector has non-finite entries".into()));
        }
        Ok(Self(a))
    }
}

/// A bilevel program `min f(x, y)` s.t. `y ∈ argmin g(x, ·)`.
#[derive(Clone)]
pub struct BilevelProblem {
    pub name: String,
    pub n: usize,
    pub m: usize,
    upper: Arc<dyn UpperObjective>,
    lower: Arc<dyn LowerObjective>,
    tilt: Option<DVector<f64>>,
    pub lipschitz_g: LipschitzConstant,
    /// λ with `f − λ‖x‖²` bounded below. Stored, never enforced.
    pub coercivity_lambda: Option<f64>,
    /// True when `g` is only C¹ somewhere (see [`LowerObjective::kink_distance`]).
    pub c1_only: bool,
    /// Box over the stacked `(x, y)` coordinates.
    pub domain: Bounds,
}

impl fmt::Debug for BilevelProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("tilt", &self.tilt)
            .field("lipschitz_g", &self.lipschitz_g)
            .field("domain", &self.domain)
            .finish()
    }
}

impl BilevelProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        n: usize,
        m: usize,
        upper: Arc<dyn UpperObjective>,
        lower: Arc<dyn LowerObjective>,
        lipschitz_g: LipschitzConstant,
        domain: Bounds,
    ) -> Self {
        assert!(n > 0 && m > 0, "dimensions must be positive");
        assert_eq!(domain.dim(), n + m, "domain box must cover (x, y)");
        Self {
            name: name.into(),
            n,
            m,
            upper,
            lower,
            tilt: None,
            lipschitz_g,
            coercivity_lambda: None,
            c1_only: false,
            domain,
        }
    }

    pub fn with_coercivity(mut self, lambda: f64) -> Self {
        self.coercivity_lambda = Some(lambda);
        self
    }

    pub fn with_c1_only(mut self) -> Self {
        self.c1_only = true;
        self
    }

    pub fn tilt(&self) -> Option<&DVector<f64>> {
        self.tilt.as_ref()
    }

    pub fn x_box(&self) -> Bounds {
        Bounds::new(self.domain.lo[..self.n].to_vec(), self.domain.hi[..self.n].to_vec())
    }

    pub fn y_box(&self) -> Bounds {
        Bounds::new(self.domain.lo[self.n..].to_vec(), self.domain.hi[self.n..].to_vec())
    }

    pub fn f(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.upper.value(x, y)
    }

    pub fn f_grad(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.upper.gradient(x, y)
    }

    /// `(∇_x f, ∇_y f)`.
    pub fn f_grad_split(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let g = self.upper.gradient(x, y);
        (g.rows(0, self.n).into_owned(), g.rows(self.n, self.m).into_owned())
    }

    pub fn f_hess(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        self.upper.hessian(x, y)
    }

    pub fn g(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let base = self.lower.value(x, y);
        match &self.tilt {
            Some(a) => base - a.dot(y),
            None => base,
        }
    }

    pub fn g_grad_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let base = self.lower.grad_y(x, y);
        match &self.tilt {
            Some(a) => base - a,
            None => base,
        }
    }

    pub fn g_hess_yy(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        self.lower.hess_yy(x, y)
    }

    pub fn g_hess_yx(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        self.lower.hess_yx(x, y)
    }

    pub fn kink_distance(&self, x: &DVector<f64>, y: &DVector<f64>) -> Option<f64> {
        self.lower.kink_distance(x, y)
    }

    /// True when `(x, y)` is within `margin` of a C¹-only kink of `g`.
    pub fn near_kink(&self, x: &DVector<f64>, y: &DVector<f64>, margin: f64) -> bool {
        self.kink_distance(x, y).is_some_and(|d| d <= margin)
    }

    pub fn check_dims(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        if x.len() != self.n || y.len() != self.m {
            return Err(Error::Dimension {
                expected: format!("x: {}, y: {}", self.n, self.m),
                found: format!("x: {}, y: {}", x.len(), y.len()),
            });
        }
        Ok(())
    }
}

/// Returns `p` with `g` replaced by `g(x, y) − ⟨a, y⟩`. Tilts accumulate.
pub fn tilt_problem(p: &BilevelProblem, a: &TiltVector) -> Result<BilevelProblem> {
    if a.0.len() != p.m {
        return Err(Error::Dimension {
            expected: format!("tilt of length {}", p.m),
            found: format!("length {}", a.0.len()),
        });
    }
    let mut out = p.clone();
    out.tilt = Some(match &p.tilt {
        Some(prev) => prev + &a.0,
        None => a.0.clone(),
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Built-in objectives
// ---------------------------------------------------------------------------

/// `½‖y‖² + ½‖x‖²`.
struct HalfSquaredNorm;

impl UpperObjective for HalfSquaredNorm {
    fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        0.5 * (y.norm_squared() + x.norm_squared())
    }
    fn gradient(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        stack(x, y)
    }
    fn hessian(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(x.len() + y.len(), x.len() + y.len())
    }
}

/// `‖x − cx‖² + ‖y − cy‖²` with per-block centers; a zero `x_weight`
/// drops the x dependence.
struct ShiftedSquares {
    x_center: f64,
    y_center: f64,
    x_weight: f64,
}

impl UpperObjective for ShiftedSquares {
    fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let dx: f64 = x.iter().map(|v| (v - self.x_center).powi(2)).sum();
        let dy: f64 = y.iter().map(|v| (v - self.y_center).powi(2)).sum();
        self.x_weight * dx + dy
    }
    fn gradient(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let gx = x.map(|v| 2.0 * self.x_weight * (v - self.x_center));
        let gy = y.map(|v| 2.0 * (v - self.y_center));
        stack(&gx, &gy)
    }
    fn hessian(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let d = DVector::from_fn(n + y.len(), |i, _| if i < n { 2.0 * self.x_weight } else { 2.0 });
        DMatrix::from_diagonal(&d)
    }
}

/// `½‖y − Mx‖²`.
struct QuadraticLower {
    coupling: DMatrix<f64>,
}

impl LowerObjective for QuadraticLower {
    fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        0.5 * (y - &self.coupling * x).norm_squared()
    }
    fn grad_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        y - &self.coupling * x
    }
    fn hess_yy(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(y.len(), y.len())
    }
    fn hess_yx(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        -&self.coupling
    }
}

/// Classical Huber loss: `t²/2` on `[−1, 1]`, `|t| − 1/2` outside.
pub fn huber(t: f64) -> f64 {
    if t.abs() <= 1.0 {
        0.5 * t * t
    } else {
        t.abs() - 0.5
    }
}

fn huber_prime(t: f64) -> f64 {
    t.clamp(-1.0, 1.0)
}

fn huber_second(t: f64) -> f64 {
    if t.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// `h(y² − 1)` with `x` inert (scalar `y`).
struct HuberWell;

impl LowerObjective for HuberWell {
    fn value(&self, _x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        huber(y[0] * y[0] - 1.0)
    }
    fn grad_y(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let t = y[0] * y[0] - 1.0;
        DVector::from_element(1, 2.0 * y[0] * huber_prime(t))
    }
    fn hess_yy(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let t = y[0] * y[0] - 1.0;
        let v = 4.0 * y[0] * y[0] * huber_second(t) + 2.0 * huber_prime(t);
        DMatrix::from_element(1, 1, v)
    }
    fn hess_yx(&self, x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, x.len())
    }
    fn kink_distance(&self, _x: &DVector<f64>, y: &DVector<f64>) -> Option<f64> {
        // h is C¹ only at |t| = 1; t = y² − 1 ≥ −1 reaches −1 at y = 0 from
        // inside the quadratic piece, so the only kinks are |y| = √2.
        Some((y[0].abs() - std::f64::consts::SQRT_2).abs())
    }
}

/// `y⁴/4 − y²/2 + c·tanh(x₁)·y`.
struct DoubleWellTilt {
    coefficient: f64,
}

impl LowerObjective for DoubleWellTilt {
    fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let v = y[0];
        v.powi(4) / 4.0 - v * v / 2.0 + self.coefficient * x[0].tanh() * v
    }
    fn grad_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let v = y[0];
        DVector::from_element(1, v.powi(3) - v + self.coefficient * x[0].tanh())
    }
    fn hess_yy(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 3.0 * y[0] * y[0] - 1.0)
    }
    fn hess_yx(&self, x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        let sech2 = 1.0 / x[0].cosh().powi(2);
        let mut out = DMatrix::zeros(1, x.len());
        out[(0, 0)] = self.coefficient * sech2;
        out
    }
}

/// `(x − y²)²`, degenerate at `x = 0`.
struct Pitchfork;

impl LowerObjective for Pitchfork {
    fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (x[0] - y[0] * y[0]).powi(2)
    }
    fn grad_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, -4.0 * y[0] * (x[0] - y[0] * y[0]))
    }
    fn hess_yy(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 12.0 * y[0] * y[0] - 4.0 * x[0])
    }
    fn hess_yx(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -4.0 * y[0])
    }
}

/// `½(x + y/√(y² + 1))²`; the unique critical point `−x/√(1 − x²)` runs off
/// to infinity as `|x| → 1`.
struct EscapeTauH;

impl EscapeTauH {
    fn parts(x: f64, y: f64) -> (f64, f64, f64, f64) {
        let q = 1.0 + y * y;
        let s = y / q.sqrt();
        let s1 = q.powf(-1.5);
        let s2 = -3.0 * y * q.powf(-2.5);
        (x + s, s, s1, s2)
    }
}

impl LowerObjective for EscapeTauH {
    fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let (h, ..) = Self::parts(x[0], y[0]);
        0.5 * h * h
    }
    fn grad_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let (h, _, s1, _) = Self::parts(x[0], y[0]);
        DVector::from_element(1, h * s1)
    }
    fn hess_yy(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let (h, _, s1, s2) = Self::parts(x[0], y[0]);
        DMatrix::from_element(1, 1, s1 * s1 + h * s2)
    }
    fn hess_yx(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let (_, _, s1, _) = Self::parts(x[0], y[0]);
        DMatrix::from_element(1, 1, s1)
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Registered built-in problem identifiers, sorted.
pub const BUILTIN_PROBLEMS: [&str; 6] = [
    "double_well_tilt",
    "escape_tau_h",
    "huber_escape",
    "huber_instability",
    "nonmorse_pitchfork",
    "quadratic_sc",
];

/// `quadratic_sc` with an explicit coupling matrix `M` (`m × n`).
pub fn quadratic_sc_with(coupling: DMatrix<f64>) -> BilevelProblem {
    let (m, n) = coupling.shape();
    BilevelProblem::new(
        "quadratic_sc",
        n,
        m,
        Arc::new(HalfSquaredNorm),
        Arc::new(QuadraticLower { coupling }),
        LipschitzConstant { value: 1.0, exact: true },
        Bounds::cube(n + m, -10.0, 10.0),
    )
    .with_coercivity(0.5)
}

fn huber_problem(name: &str, y_center: f64) -> BilevelProblem {
    BilevelProblem::new(
        name,
        1,
        1,
        Arc::new(ShiftedSquares { x_center: 0.0, y_center, x_weight: 0.0 }),
        Arc::new(HuberWell),
        // sup |g''| = 10 is approached as |y| → √2 from inside but never attained
        LipschitzConstant { value: 10.0, exact: false },
        Bounds::cube(2, -10.0, 10.0),
    )
    .with_c1_only()
}

/// Looks up a registered problem by identifier.
pub fn builtin_problem(name: &str) -> Result<BilevelProblem> {
    let neutral = || ShiftedSquares { x_center: 1.0, y_center: 1.0, x_weight: 1.0 };
    let p = match name {
        "quadratic_sc" => quadratic_sc_with(DMatrix::identity(1, 1)),
        "huber_instability" => huber_problem(name, 0.5),
        "huber_escape" => huber_problem(name, 2.0),
        "double_well_tilt" => BilevelProblem::new(
            name,
            1,
            1,
            Arc::new(neutral()),
            Arc::new(DoubleWellTilt { coefficient: 0.2 }),
            // max of 3y² − 1 over the y box [−2, 2]
            LipschitzConstant { value: 11.0, exact: false },
            Bounds::new(vec![-10.0, -2.0], vec![10.0, 2.0]),
        )
        .with_coercivity(0.5),
        "nonmorse_pitchfork" => BilevelProblem::new(
            name,
            1,
            1,
            Arc::new(neutral()),
            Arc::new(Pitchfork),
            // max of 12y² − 4x over [−2, 2]²
            LipschitzConstant { value: 56.0, exact: false },
            Bounds::cube(2, -2.0, 2.0),
        )
        .with_coercivity(0.5),
        "escape_tau_h" => BilevelProblem::new(
            name,
            1,
            1,
            Arc::new(neutral()),
            Arc::new(EscapeTauH),
            // dense grid over x ∈ [−2, 2], y ∈ [−10, 10] peaks at 2.023
            LipschitzConstant { value: 2.1, exact: false },
            Bounds::new(vec![-2.0, -10.0], vec![2.0, 10.0]),
        )
        .with_coercivity(0.5),
        _ => {
            return Err(Error::UnknownName {
                kind: "problem",
                name: name.to_string(),
                valid: BUILTIN_PROBLEMS.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    Ok(p)
}

// ---------------------------------------------------------------------------
// Derivative validation
// ---------------------------------------------------------------------------

/// Oracle names used in [`DerivativeReport`].
pub const ORACLES: [&str; 5] = ["f_grad", "f_hess", "g_grad_y", "g_hess_yy", "g_hess_yx"];

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeStatus {
    Ok,
    /// Within `10 h` of a C¹-only kink; skipped.
    NearKink,
    /// Some oracle returned a non-finite value; skipped.
    EvaluationFailure(&'static str),
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: ProbeStatus,
    /// Relative errors in [`ORACLES`] order (empty unless status is `Ok`).
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub probes: Vec<ProbeResult>,
    /// Max relative error per oracle, [`ORACLES`] order.
    pub max_errors: [f64; 5],
}

impl DerivativeReport {
    pub fn worst(&self) -> f64 {
        self.max_errors.iter().fold(0.0_f64, |a, b| a.max(*b))
    }

    pub fn flagged(&self) -> usize {
        self.probes.iter().filter(|p| p.status != ProbeStatus::Ok).count()
    }
}

fn fd_gradient<F>(point: &DVector<f64>, h: f64, mut scalar: F) -> DVector<f64>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let mut out = DVector::zeros(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let up = scalar(&probe);
        probe[i] = point[i] - h;
        let down = scalar(&probe);
        probe[i] = point[i];
        out[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Central-difference Jacobian of `vector` at `point`; column `j` is the
/// derivative along coordinate `j`.
pub fn fd_jacobian<F>(point: &DVector<f64>, h: f64, mut vector: F) -> DMatrix<f64>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let mut probe = point.clone();
    let mut cols = Vec::with_capacity(point.len());
    for j in 0..point.len() {
        probe[j] = point[j] + h;
        let up = vector(&probe);
        probe[j] = point[j] - h;
        let down = vector(&probe);
        probe[j] = point[j];
        cols.push((up - down) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Compares every analytic oracle with central differences of the
/// next-lower derivative at each probe point.
pub fn check_derivatives(
    p: &BilevelProblem,
    points: &[(DVector<f64>, DVector<f64>)],
    h: f64,
) -> Result<DerivativeReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probes = Vec::with_capacity(points.len());
    let mut max_errors = [0.0_f64; 5];
    for (x, y) in points {
        p.check_dims(x, y)?;
        if p.near_kink(x, y, 10.0 * h) {
            probes.push(ProbeResult { x: x.clone(), y: y.clone(), status: ProbeStatus::NearKink, errors: vec![] });
            continue;
        }
        let n = p.n;
        let xy = stack(x, y);
        let split = |v: &DVector<f64>| (v.rows(0, n).into_owned(), v.rows(n, v.len() - n).into_owned());

        let f_grad = p.f_grad(x, y);
        let f_hess = p.f_hess(x, y);
        let g_grad = p.g_grad_y(x, y);
        let g_yy = p.g_hess_yy(x, y);
        let g_yx = p.g_hess_yx(x, y);
        let failure = [
            ("f_grad", f_grad.iter().all(|v| v.is_finite())),
            ("f_hess", all_finite_mat(&f_hess)),
            ("g_grad_y", g_grad.iter().all(|v| v.is_finite())),
            ("g_hess_yy", all_finite_mat(&g_yy)),
            ("g_hess_yx", all_finite_mat(&g_yx)),
        ]
        .into_iter()
        .find(|(_, ok)| !ok);
        if let Some((name, _)) = failure {
            probes.push(ProbeResult {
                x: x.clone(),
                y: y.clone(),
                status: ProbeStatus::EvaluationFailure(name),
                errors: vec![],
            });
            continue;
        }

        let fd_f_grad = fd_gradient(&xy, h, |v| {
            let (a, b) = split(v);
            p.f(&a, &b)
        });
        let fd_f_hess = fd_jacobian(&xy, h, |v| {
            let (a, b) = split(v);
            p.f_grad(&a, &b)
        });
        let fd_g_grad = fd_gradient(y, h, |v| p.g(x, v));
        let fd_g_yy = fd_jacobian(y, h, |v| p.g_grad_y(x, v));
        let fd_g_yx = fd_jacobian(x, h, |v| p.g_grad_y(v, y));

        let errors = vec![
            relative_error_vec(&f_grad, &fd_f_grad),
            relative_error(&f_hess, &fd_f_hess),
            relative_error_vec(&g_grad, &fd_g_grad),
            relative_error(&g_yy, &fd_g_yy),
            relative_error(&g_yx, &fd_g_yx),
        ];
        for (slot, e) in max_errors.iter_mut().zip(&errors) {
            *slot = slot.max(*e);
        }
        probes.push(ProbeResult { x: x.clone(), y: y.clone(), status: ProbeStatus::Ok, errors });
    }
    Ok(DerivativeReport { probes, max_errors })
}

/// Grid estimate of the Lipschitz constant of `∇_y g(x, ·)` over `bounds`
/// (a box over `(x, y)`). Uses the Hessian spectral radius away from kinks
/// and divided differences of `∇_y g` between adjacent grid points along `y`
/// elsewhere.
pub fn estimate_lipschitz_g(p: &BilevelProblem, bounds: &Bounds, grid_density: usize) -> Result<f64> {
    if bounds.dim() != p.n + p.m {
        return Err(Error::Dimension {
            expected: format!("box over {} coordinates", p.n + p.m),
            found: format!("{} coordinates", bounds.dim()),
        });
    }
    let grid = bounds.grid(grid_density);
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty Lipschitz grid".into()));
    }
    let spacing: Vec<f64> = (0..bounds.dim())
        .map(|i| if grid_density > 1 { (bounds.hi[i] - bounds.lo[i]) / (grid_density - 1) as f64 } else { 0.0 })
        .collect();
    const KINK_MARGIN: f64 = 1e-3;
    let mut best = 0.0_f64;
    for point in &grid {
        let x = point.rows(0, p.n).into_owned();
        let y = point.rows(p.n, p.m).into_owned();
        if p.near_kink(&x, &y, KINK_MARGIN.max(spacing[p.n..].iter().cloned().fold(0.0, f64::max))) {
            let g0 = p.g_grad_y(&x, &y);
            for j in 0..p.m {
                let step = spacing[p.n + j];
                if step == 0.0 || y[j] + step > bounds.hi[p.n + j] + 1e-12 {
                    continue;
                }
                let mut y1 = y.clone();
                y1[j] += step;
                let g1 = p.g_grad_y(&x, &y1);
                best = best.max((g1 - &g0).norm() / step);
            }
        } else {
            let h = p.g_hess_yy(&x, &y);
            best = best.max(SymmetricEigen::new(&h).spectral_radius());
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn unknown_problem_lists_registry() {
        let err = builtin_problem("nope").unwrap_err();
        let msg = err.to_string();
        for name in BUILTIN_PROBLEMS {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn huber_value_at_origin() {
        let p = builtin_problem("huber_instability").unwrap();
        assert_eq!(p.g(&v(&[0.0]), &v(&[0.0])), 0.5);
    }

    #[test]
    fn escape_gradient_vanishes_at_origin() {
        let p = builtin_problem("escape_tau_h").unwrap();
        assert_eq!(p.g_grad_y(&v(&[0.0]), &v(&[0.0]))[0], 0.0);
        // and at the closed-form critical point for x = 0.6
        let g = p.g_grad_y(&v(&[0.6]), &v(&[-0.75]))[0];
        assert!(g.abs() < 1e-15);
    }

    #[test]
    fn quadratic_identity_gradient() {
        let p = builtin_problem("quadratic_sc").unwrap();
        let y = v(&[0.3]);
        assert_eq!(p.g_grad_y(&v(&[0.0]), &y), y);
        assert_eq!(p.g_grad_y(&v(&[0.0]), &v(&[0.0]))[0], 0.0);
    }

    #[test]
    fn zero_tilt_is_identity() {
        let p = builtin_problem("double_well_tilt").unwrap();
        let t = tilt_problem(&p, &TiltVector::new(v(&[0.0])).unwrap()).unwrap();
        for (x, y) in [(0.3, -0.7), (-1.0, 1.2), (2.0, 0.0)] {
            let (x, y) = (v(&[x]), v(&[y]));
            assert_eq!(p.g(&x, &y), t.g(&x, &y));
            assert_eq!(p.g_grad_y(&x, &y), t.g_grad_y(&x, &y));
            assert_eq!(p.g_hess_yy(&x, &y), t.g_hess_yy(&x, &y));
        }
    }

    #[test]
    fn tilt_removes_pitchfork_degenerate_point() {
        let p = builtin_problem("nonmorse_pitchfork").unwrap();
        let t = tilt_problem(&p, &TiltVector::new(v(&[0.1])).unwrap()).unwrap();
        let g = t.g_grad_y(&v(&[0.0]), &v(&[0.0]))[0];
        assert!((g + 0.1).abs() < 1e-15);
        // cross-check with a central difference of the tilted value
        let h = 1e-6;
        let fd = (t.g(&v(&[0.0]), &v(&[h])) - t.g(&v(&[0.0]), &v(&[-h]))) / (2.0 * h);
        assert!((fd + 0.1).abs() < 1e-8);
    }

    #[test]
    fn tilt_dimension_mismatch() {
        let p = builtin_problem("quadratic_sc").unwrap();
        assert!(tilt_problem(&p, &TiltVector::new(v(&[0.1, 0.2])).unwrap()).is_err());
        assert!(TiltVector::new(v(&[f64::NAN])).is_err());
    }

    #[test]
    fn derivative_check_quadratic() {
        let p = quadratic_sc_with(DMatrix::from_row_slice(2, 3, &[1.0, -0.5, 2.0, 0.0, 3.0, -1.0]));
        let pts = vec![(v(&[0.1, -0.2, 0.7]), v(&[1.5, -2.0])), (v(&[3.0, 1.0, -1.0]), v(&[0.0, 0.4]))];
        let r = check_derivatives(&p, &pts, 1e-5).unwrap();
        assert!(r.worst() <= 1e-6, "{:?}", r.max_errors);
        assert_eq!(r.flagged(), 0);
    }

    #[test]
    fn derivative_check_double_well() {
        let p = builtin_problem("double_well_tilt").unwrap();
        let r = check_derivatives(&p, &[(v(&[0.0]), v(&[0.5]))], 1e-5).unwrap();
        assert!(r.max_errors[2] <= 1e-6);
        assert!(r.worst() <= 1e-5, "{:?}", r.max_errors);
    }

    #[test]
    fn derivative_check_kink_rule() {
        let p = builtin_problem("huber_instability").unwrap();
        let h = 1e-5;
        let pts = vec![(v(&[0.0]), v(&[1.6])), (v(&[0.0]), v(&[std::f64::consts::SQRT_2 + 5.0 * h]))];
        let r = check_derivatives(&p, &pts, h).unwrap();
        assert_eq!(r.probes[0].status, ProbeStatus::Ok);
        assert_eq!(r.probes[1].status, ProbeStatus::NearKink);
        assert!(r.worst() <= 1e-5);
    }

    #[test]
    fn non_positive_step_rejected() {
        let p = builtin_problem("quadratic_sc").unwrap();
        assert!(check_derivatives(&p, &[], 0.0).is_err());
    }

    #[test]
    fn lipschitz_estimates() {
        let p = builtin_problem("quadratic_sc").unwrap();
        assert_eq!(estimate_lipschitz_g(&p, &Bounds::cube(2, -3.0, 3.0), 11).unwrap(), 1.0);

        let p = builtin_problem("double_well_tilt").unwrap();
        let l = estimate_lipschitz_g(&p, &Bounds::new(vec![0.0, -2.0], vec![0.0, 2.0]), 101).unwrap();
        assert!((l - 11.0).abs() < 1e-12, "{l}");

        // closed form: 6y² − 2 on |y| ≤ √2, constant 2 outside; sup 10 at the kink
        let p = builtin_problem("huber_instability").unwrap();
        let l = estimate_lipschitz_g(&p, &Bounds::new(vec![0.0, -2.0], vec![0.0, 2.0]), 4001).unwrap();
        assert!(l <= 10.0 + 1e-9 && l > 9.9, "{l}");

        assert!(estimate_lipschitz_g(&p, &Bounds::new(vec![0.0, -2.0], vec![0.0, 2.0]), 0).is_err());
    }

    #[test]
    fn declared_escape_lipschitz_covers_grid_estimate() {
        let p = builtin_problem("escape_tau_h").unwrap();
        let l = estimate_lipschitz_g(&p, &p.domain.clone(), 201).unwrap();
        assert!(l <= p.lipschitz_g.value, "{l}");
        assert!(l > 0.9 * p.lipschitz_g.value, "{l}");
    }

    #[test]
    fn grid_covers_box() {
        let b = Bounds::new(vec![0.0, -1.0], vec![1.0, 1.0]);
        let g = b.grid(3);
        assert_eq!(g.len(), 9);
        assert!(g.iter().all(|p| b.contains(p)));
        assert_eq!(linspace(-2.0, 2.0, 5), vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
    }
}
