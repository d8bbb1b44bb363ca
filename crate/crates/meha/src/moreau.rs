//! Moreau envelope of the lower-level objective: inner proximal-gradient
//! step, a near-exact inner oracle for diagnostics, envelope value and
//! gradient, and the per-step contraction factor.
//!
//! The envelope is `v(x, y) = inf_theta { f(x, theta) + g(x, theta)
//! + ||theta - y||^2 / (2 gamma) }` over `theta in Y`; it never exceeds the
//! lower-level objective at `(x, y)` and is differentiable with a gradient
//! determined entirely by the envelope minimizer `theta*`.

use ndarray::Array1;

use crate::error::{MehaError, Result};
use crate::problem::ProblemSpec;

/// Approximation of the envelope minimizer at one point, with value and
/// gradient of the envelope evaluated there.
#[derive(Debug, Clone)]
pub struct MoreauEval {
    pub theta_star: Array1<f64>,
    pub value: f64,
    pub grad_x: Array1<f64>,
    pub grad_y: Array1<f64>,
    pub inner_iters: usize,
    /// Norm of the last inner step.
    pub inner_residual: f64,
    pub converged: bool,
}

fn l2_norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn all_finite(v: &Array1<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One proximal-gradient step on the envelope subproblem at `(x, y)`:
/// `prox_{eta g(x,.)}( theta - eta (grad_y f(x, theta) + (theta - y)/gamma) )`.
///
/// For smooth problems the prox degenerates to the projection onto `Y`.
pub fn theta_step(
    prob: &ProblemSpec,
    x: &Array1<f64>,
    y: &Array1<f64>,
    theta: &Array1<f64>,
    eta: f64,
    gamma: f64,
) -> Result<Array1<f64>> {
    debug_assert!(eta > 0.0 && gamma > 0.0);
    let (_, grad_y_f) = prob.grad_lower_smooth(x, theta);
    let mut target = theta.clone();
    for i in 0..target.len() {
        target[i] -= eta * (grad_y_f[i] + (theta[i] - y[i]) / gamma);
    }
    let next = prob.prox_nonsmooth(x, eta, &target);
    if !all_finite(&next) {
        return Err(MehaError::NonFinite("theta_step".into()));
    }
    Ok(next)
}

/// Near-exact solver for the envelope subproblem, used by diagnostics and
/// tests only; the main loop takes exactly one [`theta_step`] per iteration.
#[derive(Debug, Clone, Copy)]
pub struct InnerOracle {
    pub eta: f64,
    pub gamma: f64,
    /// Relative step tolerance: stop when the step norm is at most
    /// `tol * max(1, ||theta||)`.
    pub tol: f64,
    pub max_inner: usize,
}

impl InnerOracle {
    pub fn new(eta: f64, gamma: f64, tol: f64, max_inner: usize) -> Self {
        InnerOracle {
            eta,
            gamma,
            tol,
            max_inner,
        }
    }

    /// Iterate [`theta_step`] from `theta0` until the relative step
    /// tolerance is met or `max_inner` is exhausted; non-convergence is
    /// reported through the `converged` flag rather than as an error.
    pub fn solve(
        &self,
        prob: &ProblemSpec,
        x: &Array1<f64>,
        y: &Array1<f64>,
        theta0: &Array1<f64>,
    ) -> Result<MoreauEval> {
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(MehaError::InvalidArgument(format!(
                "inner oracle tolerance must be positive, got {}",
                self.tol
            )));
        }
        let mut theta = theta0.clone();
        let mut residual = f64::INFINITY;
        let mut converged = false;
        let mut iters = 0usize;
        while iters < self.max_inner {
            let next = theta_step(prob, x, y, &theta, self.eta, self.gamma)?;
            residual = l2_norm(&(&next - &theta));
            theta = next;
            iters += 1;
            if residual <= self.tol * l2_norm(&theta).max(1.0) {
                converged = true;
                break;
            }
        }

        // The point theta = y is always feasible for the subproblem, so it
        // caps the envelope value; fall back to it if the iteration ended
        // up worse (possible only outside the admissible regime).
        let value_at = |t: &Array1<f64>| {
            let d = t - y;
            prob.eval_lower_total(x, t) + d.dot(&d) / (2.0 * self.gamma)
        };
        let mut value = value_at(&theta);
        if prob.eval_lower_total(x, y) < value {
            theta = y.clone();
            value = prob.eval_lower_total(x, y);
            converged = false;
        }

        let (grad_x, grad_y) = moreau_gradient(prob, x, y, &theta, self.gamma);
        Ok(MoreauEval {
            theta_star: theta,
            value,
            grad_x,
            grad_y,
            inner_iters: iters,
            inner_residual: residual,
            converged,
        })
    }
}

/// Iterate the inner proximal-gradient step until convergence, returning the
/// envelope minimizer approximation together with envelope value and gradient.
#[allow(clippy::too_many_arguments)]
pub fn solve_theta_star(
    prob: &ProblemSpec,
    x: &Array1<f64>,
    y: &Array1<f64>,
    theta0: &Array1<f64>,
    eta: f64,
    gamma: f64,
    tol: f64,
    max_inner: usize,
) -> Result<MoreauEval> {
    InnerOracle::new(eta, gamma, tol, max_inner).solve(prob, x, y, theta0)
}

/// Envelope value at a supplied minimizer approximation:
/// `f(x, theta*) + g(x, theta*) + ||theta* - y||^2 / (2 gamma)`.
pub fn moreau_value(
    prob: &ProblemSpec,
    x: &Array1<f64>,
    y: &Array1<f64>,
    theta_star: &Array1<f64>,
    gamma: f64,
) -> f64 {
    let d = theta_star - y;
    prob.eval_lower_total(x, theta_star) + d.dot(&d) / (2.0 * gamma)
}

/// Envelope gradient blocks at a supplied minimizer approximation:
/// `( grad_x f + grad_x g at (x, theta*), (y - theta*) / gamma )`.
pub fn moreau_gradient(
    prob: &ProblemSpec,
    x: &Array1<f64>,
    y: &Array1<f64>,
    theta_star: &Array1<f64>,
    gamma: f64,
) -> (Array1<f64>, Array1<f64>) {
    let (grad_x_f, _) = prob.grad_lower_smooth(x, theta_star);
    let grad_x_g = prob.grad_x_nonsmooth(x, theta_star);
    let grad_x = grad_x_f + grad_x_g;
    let grad_y = (y - theta_star) / gamma;
    (grad_x, grad_y)
}

/// Per-step contraction factor of the inner iterate toward the envelope
/// minimizer: `sqrt(1 - eta (1/gamma - rho_f2)) / (1 - eta rho_g2)`.
///
/// The value is below one whenever `gamma < 1 / (rho_f2 + 2 rho_g2)` and
/// `eta` respects the stated step bounds.
pub fn contraction_factor(eta: f64, gamma: f64, rho_f2: f64, rho_g2: f64) -> Result<f64> {
    for (name, v) in [("eta", eta), ("gamma", gamma)] {
        if !v.is_finite() || v <= 0.0 {
            return Err(MehaError::InvalidArgument(format!(
                "contraction_factor: {name} must be positive, got {v}"
            )));
        }
    }
    for (name, v) in [("rho_f2", rho_f2), ("rho_g2", rho_g2)] {
        if !v.is_finite() || v < 0.0 {
            return Err(MehaError::InvalidArgument(format!(
                "contraction_factor: {name} must be nonnegative, got {v}"
            )));
        }
    }
    let curvature = 1.0 / gamma - rho_f2;
    if eta * curvature >= 1.0 {
        return Err(MehaError::InvalidArgument(format!(
            "contraction_factor requires eta (1/gamma - rho_f2) < 1, got {}",
            eta * curvature
        )));
    }
    if eta * rho_g2 >= 1.0 {
        return Err(MehaError::InvalidArgument(format!(
            "contraction_factor requires eta rho_g2 < 1, got {}",
            eta * rho_g2
        )));
    }
    Ok((1.0 - eta * curvature).sqrt() / (1.0 - eta * rho_g2))
}
