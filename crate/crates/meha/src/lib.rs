//! Single-loop, Hessian-free first-order solver for bilevel optimization
//! with nonconvex and possibly nonsmooth lower-level objectives.
//!
//! The lower-level problem is smoothed through its Moreau envelope and the
//! constraint `f + g - v <= 0` is penalized with a growing weight, turning
//! the bilevel problem into a sequence of single-level problems attacked by
//! alternating (proximal) gradient steps. Everything is first order: no
//! Hessians, no matrix inversions, one inner step per outer iteration.
//!
//! The crate also ships the synthetic benchmark suite with analytic optima
//! used to validate the solver, a diagnostics layer (stationarity surrogate,
//! merit descent, feasibility gap, hypergradient and finite-difference
//! checks, rate fitting), and a CLI for runs, parameter sweeps, and
//! self-checks.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod moreau;
pub mod problem;
pub mod problems;
pub mod prox;
pub mod solver;

pub use config::{validate_config, SolverConfig, StepMode, StopRule};
pub use error::{MehaError, Result};
pub use moreau::{
    contraction_factor, moreau_gradient, moreau_value, solve_theta_star, theta_step, InnerOracle,
    MoreauEval,
};
pub use problem::{AnalyticSolution, IterateState, ProblemConstants, ProblemSpec};
pub use solver::{meha_step, run, run_with_plan, RunResult, Schedule, StopReason, TracePlan};
