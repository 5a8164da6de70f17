//! Constrained stochastic optimization by dual averaging, with an
//! importance-sampling distribution learned in the same loop.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: pseudoinverses, null-space projectors, polytopes and the
//!   dual-averaging prox step.
//! - [`is_families`]: exponential tilting, mean translation and mixtures.
//! - [`problems`]: quantile and quadratic test problems.
//! - [`solver`]: the joint engine and its baselines.
//! - [`diagnostics`]: cross-trajectory statistics.

pub mod diagnostics;
pub mod is_families;
pub mod linalg;
pub mod problems;
pub mod solver;

pub use diagnostics::{DiagnosticsError, ExperimentSummary};
pub use is_families::{BaseDistribution, Component, Draw, FamilyError, FamilyKind, FiniteSupport, IsFamily};
pub use linalg::{ActiveSet, LinalgError, Polytope, Projector};
pub use problems::{Problem, ProblemError, QuadraticProblem, QuantileProblem};
pub use solver::{EngineKind, RunConfig, SolverError, StepSchedule, Thinning, TrajectoryRecord};

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}
