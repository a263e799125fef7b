//! Bilevel optimization through unrolled lower-level gradient descent.
//!
//! A [`BilevelProblem`] pairs an upper objective `f(x, y)` with a lower
//! objective `g(x, y)`. The lower level is replaced by `k` fixed-step
//! gradient steps `𝒜ᵏ(x, z)` and the surrogate `φᵏ(x, z) = f(x, 𝒜ᵏ(x, z))`
//! is differentiated by forward Jacobian recursions ([`lld`]). Around this
//! sit critical-point enumeration and branch continuation ([`critical`]),
//! the two bilevel gradient solvers ([`solvers`]) and the experiment
//! diagnostics ([`diagnostics`]).

pub mod critical;
pub mod diagnostics;
pub mod error;
pub mod export;
pub mod linalg;
pub mod lld;
pub mod problem;
pub mod seeding;
pub mod solvers;

pub use error::{Error, Result};

/// Crate version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use problem::{builtin_problem, BilevelProblem, Bounds, TiltVector, BUILTIN_PROBLEMS};
