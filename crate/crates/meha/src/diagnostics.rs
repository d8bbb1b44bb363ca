//! Stationarity, merit, gap, hypergradient, finite-difference, and
//! rate-fitting instrumentation used by tests and the CLI trace output.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{MehaError, Result};
use crate::moreau::InnerOracle;
use crate::problem::{IterateState, ProblemConstants, ProblemSpec};

/// One per-iteration diagnostics row.
///
/// Oracle-backed fields (`gap`, `residual_surrogate`, `merit`) are filled
/// only at the configured cadence because each needs a near-exact envelope
/// solve; error fields require an analytic solution.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    pub c_k: f64,
    pub alpha_k: f64,
    pub beta_k: f64,
    /// Upper-level objective at the iterate.
    pub f_val: f64,
    /// Lower-level objective minus its Moreau envelope; nonnegative up to
    /// oracle tolerance.
    pub gap: Option<f64>,
    /// Prox-gradient-mapping stationarity surrogate for the penalized
    /// problem at the iterate's penalty value.
    pub residual_surrogate: Option<f64>,
    pub merit: Option<f64>,
    pub err_x_rel: Option<f64>,
    pub err_y_rel: Option<f64>,
    /// Norm of the inner step that produced this iterate's theta.
    pub theta_inner_residual: f64,
    pub elapsed_s: f64,
}

/// Summary produced by the built-in verification battery.
#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub max_grad_fd_error: f64,
    pub prox_oracle_max_error: f64,
    pub contraction_violations: usize,
    pub fitted_rate_exponent: Option<f64>,
    /// Largest measured per-step inner contraction ratio.
    pub contraction_max_ratio: f64,
    /// Theoretical bound the measured ratios are checked against.
    pub contraction_sigma_bound: f64,
    pub stationarity_max_residual: f64,
}

/// Stationarity surrogate value plus the convergence flag of the inner
/// oracle that produced it.
#[derive(Debug, Clone, Copy)]
pub struct ResidualReport {
    pub value: f64,
    pub oracle_converged: bool,
}

/// Feasibility gap value plus the oracle convergence flag.
#[derive(Debug, Clone, Copy)]
pub struct GapReport {
    pub gap: f64,
    pub oracle_converged: bool,
}

/// Prox-gradient-mapping surrogate for the stationarity of the penalized
/// problem `min F + c (f + g - v)` at `(x, y)`.
///
/// With `G_x` and `G_y` the exact per-block gradients of the penalized
/// objective scaled by `1/c` (the nonsmooth `y`-part handled by prox), the
/// surrogate is
/// `||(x - Proj_X(x - s G_x))/s|| + ||(y - prox_{s g(x,.)}(y - s G_y))/s||`
/// with `s = ref_step`. It vanishes exactly at stationary points.
pub fn stationarity_residual(
    prob: &ProblemSpec,
    x: &Array1<f64>,
    y: &Array1<f64>,
    c_k: f64,
    ref_step: f64,
    oracle: &InnerOracle,
) -> Result<ResidualReport> {
    if !ref_step.is_finite() || ref_step <= 0.0 {
        return Err(MehaError::InvalidArgument(format!(
            "stationarity_residual requires ref_step > 0, got {ref_step}"
        )));
    }
    if c_k.is_nan() || c_k <= 0.0 {
        return Err(MehaError::InvalidArgument(format!(
            "stationarity_residual requires c_k > 0, got {c_k}"
        )));
    }
    let eval = oracle.solve(prob, x, y, y)?;

    let (gx_upper, gy_upper) = prob.grad_upper(x, y);
    let (gx_lower, gy_lower) = prob.grad_lower_smooth(x, y);
    let gx_g = prob.grad_x_nonsmooth(x, y);

    // G_x = (1/c) grad_x F + grad_x (f + g) - grad_x v, all at (x, y).
    let g_x = &gx_upper / c_k + &gx_lower + &gx_g - &eval.grad_x;
    // G_y drops the nonsmooth part: (1/c) grad_y F + grad_y f - (y - theta*)/gamma.
    let g_y = &gy_upper / c_k + &gy_lower - &eval.grad_y;

    let s = ref_step;
    let x_mapped = prob.project_x(&(x - &(&g_x * s)));
    let y_mapped = prob.prox_nonsmooth(x, s, &(y - &(&g_y * s)));

    let x_part = (x - &x_mapped).mapv(|v| v * v).sum().sqrt() / s;
    let y_part = (y - &y_mapped).mapv(|v| v * v).sum().sqrt() / s;
    let value = x_part + y_part;
    if !value.is_finite() {
        return Err(MehaError::NonFinite("stationarity_residual".into()));
    }
    Ok(ResidualReport {
        value,
        oracle_converged: eval.converged,
    })
}

/// Default merit tracking weight `(L_f + L_g)^2 + 1/gamma^2`; `L_g` defaults
/// to zero for smooth problems.
pub fn default_merit_weight(consts: &ProblemConstants, gamma: f64, smooth: bool) -> Result<f64> {
    let l_lower = consts.l_lower.ok_or_else(|| {
        MehaError::MissingConstants("merit weight needs the l_lower constant".into())
    })?;
    let l_g = match consts.l_g {
        Some(v) => v,
        None if smooth => 0.0,
        None => {
            return Err(MehaError::MissingConstants(
                "merit weight needs l_g for a nonsmooth problem".into(),
            ))
        }
    };
    Ok((l_lower + l_g).powi(2) + 1.0 / (gamma * gamma))
}

/// Merit function at a state: `(F - F_lower)/c + (f + g - v) + C_V ||theta - theta*||^2`.
///
/// `c_v` falls back to [`default_merit_weight`] when absent; with neither an
/// explicit weight nor constants this is an error.
#[allow(clippy::too_many_arguments)]
pub fn merit_value(
    prob: &ProblemSpec,
    state: &IterateState,
    c_k: f64,
    c_v: Option<f64>,
    consts: Option<&ProblemConstants>,
    f_lower: f64,
    oracle: &InnerOracle,
) -> Result<f64> {
    let c_v = match c_v {
        Some(v) => v,
        None => {
            let consts = consts.ok_or_else(|| {
                MehaError::MissingConstants(
                    "merit_value needs either an explicit C_V or problem constants".into(),
                )
            })?;
            default_merit_weight(consts, oracle.gamma, prob.smooth_only())?
        }
    };
    if c_v.is_nan() || c_v <= 0.0 {
        return Err(MehaError::InvalidArgument(format!(
            "merit weight must be positive, got {c_v}"
        )));
    }
    let eval = oracle.solve(prob, &state.x, &state.y, &state.theta)?;
    let upper = prob.eval_upper(&state.x, &state.y);
    let phi = prob.eval_lower_total(&state.x, &state.y);
    let tracking = (&state.theta - &eval.theta_star).mapv(|v| v * v).sum();
    Ok((upper - f_lower) / c_k + (phi - eval.value) + c_v * tracking)
}

/// Feasibility gap `f(x,y) + g(x,y) - v(x,y)`, clipped at zero from below
/// after checking it is not meaningfully negative.
pub fn feasibility_gap(
    prob: &ProblemSpec,
    x: &Array1<f64>,
    y: &Array1<f64>,
    oracle: &InnerOracle,
) -> Result<GapReport> {
    let eval = oracle.solve(prob, x, y, y)?;
    let phi = prob.eval_lower_total(x, y);
    let gap = phi - eval.value;
    if gap < -1e-9 {
        return Err(MehaError::InvalidArgument(format!(
            "feasibility gap is negative beyond tolerance: {gap}"
        )));
    }
    Ok(GapReport {
        gap: gap.max(0.0),
        oracle_converged: eval.converged,
    })
}

/// Hypergradient of the reduced objective `F(x, y*(x))` for a lower level
/// that is quadratic in `y` with constant Hessian blocks:
/// `grad_x F(x, y*) - Q_xy Q_yy^{-1} grad_y F(x, y*)`.
pub fn hypergradient_quadratic(
    q_yy: &Array2<f64>,
    q_xy: &Array2<f64>,
    prob: &ProblemSpec,
    x: &Array1<f64>,
    ll_solver: impl Fn(&Array1<f64>) -> Array1<f64>,
) -> Result<Array1<f64>> {
    let m = q_yy.nrows();
    if q_yy.ncols() != m {
        return Err(MehaError::InvalidArgument(format!(
            "hypergradient_quadratic: Q_yy must be square, got {}x{}",
            q_yy.nrows(),
            q_yy.ncols()
        )));
    }
    if q_xy.nrows() != prob.n() || q_xy.ncols() != m {
        return Err(MehaError::InvalidArgument(format!(
            "hypergradient_quadratic: Q_xy must be {}x{m}, got {}x{}",
            prob.n(),
            q_xy.nrows(),
            q_xy.ncols()
        )));
    }
    let y_star = ll_solver(x);
    let (grad_x_f, grad_y_f) = prob.grad_upper(x, &y_star);
    let chol = cholesky(q_yy)
        .ok_or_else(|| MehaError::SingularMatrix("Q_yy in hypergradient_quadratic".into()))?;
    let z = cholesky_solve(&chol, &grad_y_f);
    Ok(&grad_x_f - &q_xy.dot(&z))
}

/// Maximum relative error between an analytic gradient and central finite
/// differences of the scalar field, over the supplied sample points.
pub fn finite_diff_check(
    f: impl Fn(ArrayView1<f64>) -> f64,
    grad: impl Fn(ArrayView1<f64>) -> Array1<f64>,
    points: &[Array1<f64>],
    h: f64,
) -> Result<f64> {
    if !h.is_finite() || h <= 0.0 {
        return Err(MehaError::InvalidArgument(format!(
            "finite_diff_check requires h > 0, got {h}"
        )));
    }
    let mut worst = 0.0f64;
    for point in points {
        let analytic = grad(point.view());
        let mut numeric = Array1::zeros(point.len());
        for i in 0..point.len() {
            let mut plus = point.clone();
            let mut minus = point.clone();
            plus[i] += h;
            minus[i] -= h;
            numeric[i] = (f(plus.view()) - f(minus.view())) / (2.0 * h);
        }
        let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = numeric.mapv(|v| v * v).sum().sqrt().max(1.0);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

/// Trace field selectable for rate fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateField {
    ResidualSurrogate,
    Gap,
}

/// Least-squares slope of `log(min-so-far of field)` against `log k` over
/// the window. The min-so-far runs from the start of the trace.
pub fn rate_fit(
    trace: &[TraceRecord],
    field: RateField,
    window: std::ops::RangeInclusive<usize>,
) -> Result<f64> {
    if *window.start() < 1 {
        return Err(MehaError::InvalidArgument(
            "rate_fit window must start at k >= 1".into(),
        ));
    }
    let pick = |r: &TraceRecord| match field {
        RateField::ResidualSurrogate => r.residual_surrogate,
        RateField::Gap => r.gap,
    };

    let mut min_so_far = f64::INFINITY;
    let mut points = Vec::new();
    for record in trace {
        if let Some(v) = pick(record) {
            min_so_far = min_so_far.min(v);
            if window.contains(&record.k) {
                if min_so_far <= 0.0 {
                    return Err(MehaError::InvalidArgument(format!(
                        "rate_fit: nonpositive field value {min_so_far} at k = {}",
                        record.k
                    )));
                }
                points.push(((record.k as f64).ln(), min_so_far.ln()));
            }
        }
    }
    if points.len() < 10 {
        return Err(MehaError::InvalidArgument(format!(
            "rate_fit window holds {} usable records; at least 10 required",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|(a, _)| a).sum::<f64>() / n;
    let mean_y = points.iter().map(|(_, b)| b).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (a, b) in &points {
        cov += (a - mean_x) * (b - mean_y);
        var += (a - mean_x) * (a - mean_x);
    }
    if var == 0.0 {
        return Err(MehaError::InvalidArgument(
            "rate_fit window spans a single k value".into(),
        ));
    }
    Ok(cov / var)
}

fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}
