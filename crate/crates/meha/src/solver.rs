//! The main single-loop solver: penalty and step-size schedules, the two
//! search directions, the three sequential updates per iteration, stopping
//! logic, and trace production.
//!
//! Each iteration performs, strictly in order: one proximal-gradient step on
//! the envelope subproblem to refresh `theta`, a projected gradient step on
//! `x` along an approximation of the penalized objective's `x`-gradient, and
//! a proximal-gradient step on `y` using the already-updated `x`.

use std::time::Instant;

use ndarray::Array1;

use crate::config::{SolverConfig, StepMode, StopRule};
use crate::diagnostics::{feasibility_gap, merit_value, stationarity_residual, TraceRecord};
use crate::error::{MehaError, Result};
use crate::moreau::{theta_step, InnerOracle};
use crate::problem::{AnalyticSolution, IterateState, ProblemSpec};

/// Penalty and step-size schedules of one run.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub c_lower: f64,
    pub p: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub eta0: f64,
    pub step_mode: StepMode,
}

impl Schedule {
    pub fn from_config(cfg: &SolverConfig) -> Self {
        Schedule {
            c_lower: cfg.c_lower,
            p: cfg.p,
            alpha0: cfg.alpha0,
            beta0: cfg.beta0,
            eta0: cfg.eta0,
            step_mode: cfg.step_mode,
        }
    }

    /// Penalty at iteration `k`: `c_lower * (k + 1)^p`, nondecreasing in `k`.
    pub fn penalty_at(&self, k: usize) -> f64 {
        self.c_lower * ((k + 1) as f64).powf(self.p)
    }

    /// Step sizes `(alpha_k, beta_k, eta_k)`; `eta` is never annealed.
    pub fn stepsize_at(&self, k: usize) -> (f64, f64, f64) {
        match self.step_mode {
            StepMode::Fixed => (self.alpha0, self.beta0, self.eta0),
            StepMode::InversePower { q } => {
                let scale = ((1 + k) as f64).powf(-q);
                (self.alpha0 * scale, self.beta0 * scale, self.eta0)
            }
        }
    }
}

/// Why a run terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    TolMet,
    MaxIters,
    NumericalFailure,
}

impl StopReason {
    pub fn name(&self) -> &'static str {
        match self {
            StopReason::TolMet => "tol_met",
            StopReason::MaxIters => "max_iters",
            StopReason::NumericalFailure => "numerical_failure",
        }
    }
}

/// Outcome of a full run: final state, per-iteration trace, and bookkeeping.
#[derive(Debug)]
pub struct RunResult {
    pub final_state: IterateState,
    pub trace: Vec<TraceRecord>,
    pub stop_reason: StopReason,
    pub wall_time_s: f64,
    /// Failure description when `stop_reason` is `NumericalFailure`.
    pub failure: Option<String>,
}

/// Opt-in merit tracking for the trace; needs a lower bound on `F` and a
/// tracking weight (explicit, or derivable from problem constants).
#[derive(Debug, Clone, Copy)]
pub struct MeritPlan {
    pub f_lower: f64,
    pub c_v: f64,
}

/// Controls which oracle-backed diagnostics get computed along the trace.
#[derive(Debug, Clone, Copy)]
pub struct TracePlan {
    /// Compute gap and stationarity residual every this many iterations;
    /// zero disables them entirely.
    pub oracle_every: usize,
    pub oracle_max_inner: usize,
    /// Reference step of the stationarity surrogate.
    pub residual_ref_step: f64,
    pub merit: Option<MeritPlan>,
}

impl Default for TracePlan {
    fn default() -> Self {
        TracePlan {
            oracle_every: 10,
            oracle_max_inner: 50_000,
            residual_ref_step: 1.0,
            merit: None,
        }
    }
}

fn l2_norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn check_finite(v: &Array1<f64>, context: &str, k: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(MehaError::NonFinite(format!("{context} at iteration {k}")))
    }
}

/// Update direction for `x`, approximating the `x`-gradient of the penalized
/// objective scaled by `1/c_k`:
/// `(1/c) grad_x F(x,y) + grad_x (f+g)(x,y) - grad_x (f+g)(x,theta_next)`.
///
/// `theta_next` must be the freshly updated inner iterate at `(x, y)`.
pub fn direction_x(
    prob: &ProblemSpec,
    x: &Array1<f64>,
    y: &Array1<f64>,
    theta_next: &Array1<f64>,
    c_k: f64,
) -> Result<Array1<f64>> {
    let (gx_upper, _) = prob.grad_upper(x, y);
    let (gx_lower_y, _) = prob.grad_lower_smooth(x, y);
    let (gx_lower_theta, _) = prob.grad_lower_smooth(x, theta_next);
    let mut dir = gx_upper / c_k + &gx_lower_y - &gx_lower_theta;
    if !prob.smooth_only() {
        dir = dir + prob.grad_x_nonsmooth(x, y) - prob.grad_x_nonsmooth(x, theta_next);
    }
    if dir.iter().all(|v| v.is_finite()) {
        Ok(dir)
    } else {
        Err(MehaError::NonFinite("direction_x".into()))
    }
}

/// Update direction for `y`, evaluated at the already-updated `x_next`:
/// `(1/c) grad_y F(x_next, y) + grad_y f(x_next, y) - (y - theta_next)/gamma`.
pub fn direction_y(
    prob: &ProblemSpec,
    x_next: &Array1<f64>,
    y: &Array1<f64>,
    theta_next: &Array1<f64>,
    c_k: f64,
    gamma: f64,
) -> Result<Array1<f64>> {
    let (_, gy_upper) = prob.grad_upper(x_next, y);
    let (_, gy_lower) = prob.grad_lower_smooth(x_next, y);
    let mut dir = gy_upper / c_k + &gy_lower;
    for i in 0..dir.len() {
        dir[i] -= (y[i] - theta_next[i]) / gamma;
    }
    if dir.iter().all(|v| v.is_finite()) {
        Ok(dir)
    } else {
        Err(MehaError::NonFinite("direction_y".into()))
    }
}

/// Per-step bookkeeping used by the stop rules and the trace.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub c_k: f64,
    pub alpha_k: f64,
    pub beta_k: f64,
    pub eta_k: f64,
    pub dx_norm: f64,
    pub x_change_norm: f64,
    pub theta_step_norm: f64,
}

pub(crate) fn step_with_stats(
    prob: &ProblemSpec,
    state: &IterateState,
    sched: &Schedule,
    gamma: f64,
) -> Result<(IterateState, StepStats)> {
    let k = state.k;
    let c_k = sched.penalty_at(k);
    let (alpha_k, beta_k, eta_k) = sched.stepsize_at(k);

    // Inner update first; both outer directions depend on it.
    let theta_next = theta_step(prob, &state.x, &state.y, &state.theta, eta_k, gamma)
        .map_err(|_| MehaError::NonFinite(format!("theta_step at iteration {k}")))?;
    let theta_step_norm = l2_norm(&(&theta_next - &state.theta));

    let d_x = direction_x(prob, &state.x, &state.y, &theta_next, c_k)
        .map_err(|_| MehaError::NonFinite(format!("direction_x at iteration {k}")))?;
    let dx_norm = l2_norm(&d_x);
    let x_next = prob.project_x(&(&state.x - &(&d_x * alpha_k)));
    check_finite(&x_next, "x update", k)?;
    let x_change_norm = l2_norm(&(&x_next - &state.x));

    // The y direction is evaluated at the new x.
    let d_y = direction_y(prob, &x_next, &state.y, &theta_next, c_k, gamma)
        .map_err(|_| MehaError::NonFinite(format!("direction_y at iteration {k}")))?;
    let y_next = if prob.smooth_only() {
        prob.project_y(&(&state.y - &(&d_y * beta_k)))
    } else {
        prob.prox_nonsmooth(&x_next, beta_k, &(&state.y - &(&d_y * beta_k)))
    };
    check_finite(&y_next, "y update", k)?;

    let next = IterateState {
        x: x_next,
        y: y_next,
        theta: theta_next,
        k: k + 1,
    };
    let stats = StepStats {
        c_k,
        alpha_k,
        beta_k,
        eta_k,
        dx_norm,
        x_change_norm,
        theta_step_norm,
    };
    Ok((next, stats))
}

/// One full solver iteration: inner step, `x` update, `y` update.
pub fn meha_step(
    prob: &ProblemSpec,
    state: &IterateState,
    cfg: &SolverConfig,
    k: usize,
) -> Result<IterateState> {
    let mut state = state.clone();
    state.k = k;
    let sched = Schedule::from_config(cfg);
    let (next, _) = step_with_stats(prob, &state, &sched, cfg.gamma)?;
    Ok(next)
}

fn relative_error(v: &Array1<f64>, reference: &Array1<f64>) -> f64 {
    let denom = l2_norm(reference);
    let err = l2_norm(&(v - reference));
    if denom > 0.0 {
        err / denom
    } else {
        err
    }
}

struct TraceBuilder<'a> {
    prob: &'a ProblemSpec,
    plan: TracePlan,
    oracle: InnerOracle,
    solution: Option<&'a AnalyticSolution>,
}

impl<'a> TraceBuilder<'a> {
    fn record(
        &self,
        state: &IterateState,
        sched: &Schedule,
        theta_inner_residual: f64,
        elapsed_s: f64,
    ) -> (TraceRecord, Option<f64>) {
        let k = state.k;
        let c_k = sched.penalty_at(k);
        let (alpha_k, beta_k, _) = sched.stepsize_at(k);
        let f_val = self.prob.eval_upper(&state.x, &state.y);

        let err_x_rel = self
            .solution
            .and_then(|s| s.x_star.as_ref())
            .map(|x_star| relative_error(&state.x, x_star));
        let err_y_rel = self
            .solution
            .and_then(|s| s.y_star.as_ref())
            .map(|y_star| relative_error(&state.y, y_star));

        let mut gap = None;
        let mut residual = None;
        let mut merit = None;
        if self.plan.oracle_every > 0 && k % self.plan.oracle_every == 0 {
            if let Ok(report) = feasibility_gap(self.prob, &state.x, &state.y, &self.oracle) {
                gap = Some(report.gap);
            }
            if let Ok(report) = stationarity_residual(
                self.prob,
                &state.x,
                &state.y,
                c_k,
                self.plan.residual_ref_step,
                &self.oracle,
            ) {
                residual = Some(report.value);
            }
            if let Some(mp) = &self.plan.merit {
                merit = merit_value(
                    self.prob,
                    state,
                    c_k,
                    Some(mp.c_v),
                    None,
                    mp.f_lower,
                    &self.oracle,
                )
                .ok();
            }
        }

        let record = TraceRecord {
            k,
            c_k,
            alpha_k,
            beta_k,
            f_val,
            gap,
            residual_surrogate: residual,
            merit,
            err_x_rel,
            err_y_rel,
            theta_inner_residual,
            elapsed_s,
        };
        (record, err_x_rel)
    }
}

/// Run the solver until the stop rule fires or `max_iters` is reached.
///
/// Deterministic for a given problem, configuration, and initial state; the
/// only nondeterministic trace column is wall time.
pub fn run(
    prob: &ProblemSpec,
    cfg: &SolverConfig,
    init: &IterateState,
    solution: Option<&AnalyticSolution>,
) -> Result<RunResult> {
    run_with_plan(prob, cfg, init, solution, &TracePlan::default())
}

/// [`run`] with explicit control over trace diagnostics.
pub fn run_with_plan(
    prob: &ProblemSpec,
    cfg: &SolverConfig,
    init: &IterateState,
    solution: Option<&AnalyticSolution>,
    plan: &TracePlan,
) -> Result<RunResult> {
    cfg.validate()?;
    init.check_dims(prob)?;
    if matches!(cfg.stop_rule, StopRule::RelErrorToSolution { .. })
        && solution.and_then(|s| s.x_star.as_ref()).is_none()
    {
        return Err(MehaError::InvalidConfig(
            "stop rule rel_error_to_solution needs an analytic solution with x_star".into(),
        ));
    }

    let sched = Schedule::from_config(cfg);
    let oracle = InnerOracle::new(cfg.eta0, cfg.gamma, cfg.inner_oracle_tol, plan.oracle_max_inner);
    let tracer = TraceBuilder {
        prob,
        plan: *plan,
        oracle,
        solution,
    };

    let started = Instant::now();
    let mut elapsed_sample = 0.0f64;
    let mut state = init.clone();
    state.k = 0;
    // Projected initial point: every recorded iterate lives in X x Y.
    state.x = prob.project_x(&state.x);
    state.y = prob.project_y(&state.y);
    state.theta = prob.project_y(&state.theta);

    let mut trace = Vec::with_capacity(cfg.max_iters.min(1 << 20) + 1);
    let (first, _) = tracer.record(&state, &sched, 0.0, 0.0);
    trace.push(first);

    let mut stop_reason = StopReason::MaxIters;
    let mut failure = None;

    for _ in 0..cfg.max_iters {
        let step = step_with_stats(prob, &state, &sched, cfg.gamma);
        let (next, stats) = match step {
            Ok(pair) => pair,
            Err(err) => {
                stop_reason = StopReason::NumericalFailure;
                failure = Some(err.to_string());
                break;
            }
        };
        state = next;

        // Wall time is sampled every ten iterations to keep rows cheap.
        if state.k % 10 == 0 {
            elapsed_sample = started.elapsed().as_secs_f64();
        }
        let (record, err_x_rel) =
            tracer.record(&state, &sched, stats.theta_step_norm, elapsed_sample);
        trace.push(record);

        let fired = match cfg.stop_rule {
            StopRule::MaxItersOnly => false,
            StopRule::DirectionNorm { tol } => stats.dx_norm <= tol,
            StopRule::RelErrorToSolution { tol } => err_x_rel.is_some_and(|e| e <= tol),
            StopRule::RelChangeX { tol } => {
                let denom = l2_norm(&state.x);
                if denom > 0.0 {
                    stats.x_change_norm / denom <= tol
                } else {
                    stats.x_change_norm == 0.0
                }
            }
        };
        if fired {
            stop_reason = StopReason::TolMet;
            break;
        }
    }

    Ok(RunResult {
        final_state: state,
        trace,
        stop_reason,
        wall_time_s: started.elapsed().as_secs_f64(),
        failure,
    })
}
