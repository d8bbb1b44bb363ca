//! Solver configuration, stopping rules, and admissibility validation.

use crate::error::{MehaError, Result};
use crate::problem::ProblemConstants;

/// Step size schedule for the `x` and `y` updates; the inner step `eta`
/// always stays fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepMode {
    Fixed,
    /// `alpha_k = alpha0 / (1 + k)^q`, likewise for `beta`.
    InversePower { q: f64 },
}

/// Termination test applied after every iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    MaxItersOnly,
    /// Stop when the norm of the `x` search direction drops below `tol`.
    DirectionNorm { tol: f64 },
    /// Stop when `||x - x*|| / ||x*||` drops below `tol` (needs a solution).
    RelErrorToSolution { tol: f64 },
    /// Stop when `||x_k - x_{k-1}|| / ||x_k||` drops below `tol`.
    RelChangeX { tol: f64 },
}

impl StopRule {
    pub fn tol(&self) -> Option<f64> {
        match self {
            StopRule::MaxItersOnly => None,
            StopRule::DirectionNorm { tol }
            | StopRule::RelErrorToSolution { tol }
            | StopRule::RelChangeX { tol } => Some(*tol),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            StopRule::MaxItersOnly => "max_iters_only",
            StopRule::DirectionNorm { .. } => "direction_norm",
            StopRule::RelErrorToSolution { .. } => "rel_error_to_solution",
            StopRule::RelChangeX { .. } => "rel_change_x",
        }
    }
}

/// All solver tunables.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Proximal parameter of the Moreau envelope.
    pub gamma: f64,
    /// Base penalty; the penalty at iteration k is `c_lower * (k+1)^p`.
    pub c_lower: f64,
    /// Penalty growth exponent, in `[0, 1/2)`.
    pub p: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub eta0: f64,
    pub step_mode: StepMode,
    pub max_iters: usize,
    /// Relative step tolerance for the diagnostic inner oracle.
    pub inner_oracle_tol: f64,
    pub seed: u64,
    pub stop_rule: StopRule,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            gamma: 1.0,
            c_lower: 1.0,
            p: 0.49,
            alpha0: 0.1,
            beta0: 0.1,
            eta0: 0.1,
            step_mode: StepMode::Fixed,
            max_iters: 1000,
            inner_oracle_tol: 1e-10,
            seed: 0,
            stop_rule: StopRule::MaxItersOnly,
        }
    }
}

impl SolverConfig {
    /// Hard validity checks; theory-bound checks live in [`validate_config`].
    pub fn validate(&self) -> Result<()> {
        if !self.p.is_finite() || self.p < 0.0 || self.p >= 0.5 {
            return Err(MehaError::InvalidConfig(format!(
                "penalty exponent p must lie in [0, 0.5), got {}",
                self.p
            )));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("c_lower", self.c_lower),
            ("alpha0", self.alpha0),
            ("beta0", self.beta0),
            ("eta0", self.eta0),
            ("inner_oracle_tol", self.inner_oracle_tol),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(MehaError::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if let StepMode::InversePower { q } = self.step_mode {
            if !q.is_finite() || q <= 0.0 {
                return Err(MehaError::InvalidConfig(format!(
                    "annealing exponent q must be positive, got {q}"
                )));
            }
        }
        if let Some(tol) = self.stop_rule.tol() {
            if !tol.is_finite() || tol <= 0.0 {
                return Err(MehaError::InvalidConfig(format!(
                    "stop rule tolerance must be positive, got {tol}"
                )));
            }
        }
        Ok(())
    }
}

/// Validate a configuration against known problem constants.
///
/// Violations of the theoretical admissibility bounds produce warnings, not
/// errors: the benchmark settings themselves run outside those bounds.
/// Structurally invalid configurations are rejected.
pub fn validate_config(cfg: &SolverConfig, consts: &ProblemConstants) -> Result<Vec<String>> {
    cfg.validate()?;
    consts.validate()?;

    let mut warnings = Vec::new();

    if let (Some(rho_f2), Some(rho_g2)) = (consts.rho_f2, consts.rho_g2) {
        let denom = 2.0 * rho_f2 + 2.0 * rho_g2;
        if denom > 0.0 && cfg.gamma >= 1.0 / denom {
            warnings.push(format!(
                "gamma = {} is outside the admissible range (0, {:.6}); \
                 the envelope minimizer may not be unique",
                cfg.gamma,
                1.0 / denom
            ));
        }
    }

    if let (Some(l_lower), Some(rho_f2)) = (consts.l_lower, consts.rho_f2) {
        let inv_gamma = 1.0 / cfg.gamma;
        if inv_gamma <= rho_f2 {
            warnings.push(format!(
                "1/gamma = {inv_gamma} does not exceed rho_f2 = {rho_f2}; \
                 the inner step has no contraction guarantee"
            ));
        } else {
            let eta_bound = (inv_gamma - rho_f2) / (l_lower + inv_gamma).powi(2);
            if cfg.eta0 > eta_bound {
                warnings.push(format!(
                    "eta0 = {} exceeds the contraction bound {:.6}",
                    cfg.eta0, eta_bound
                ));
            }
        }
    }

    if let Some(rho_g2) = consts.rho_g2 {
        if rho_g2 > 0.0 && cfg.eta0 >= 1.0 / rho_g2 {
            warnings.push(format!(
                "eta0 = {} is not below 1/rho_g2 = {:.6}; the inner prox step \
                 may be ill-posed",
                cfg.eta0,
                1.0 / rho_g2
            ));
        }
    }

    Ok(warnings)
}
