//! Bilevel problem description and associated metadata.
//!
//! A problem is `min F(x, y) subject to y minimizing f(x, .) + g(x, .) over Y`,
//! with `x` constrained to a closed convex set `X`. All structure is supplied
//! through callbacks so the solver stays oblivious to the concrete instance.

use ndarray::{Array1, ArrayView1};

use crate::error::{MehaError, Result};

pub type ScalarFn = dyn Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64 + Send + Sync;
pub type GradPairFn =
    dyn Fn(ArrayView1<f64>, ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) + Send + Sync;
pub type GradXFn = dyn Fn(ArrayView1<f64>, ArrayView1<f64>) -> Array1<f64> + Send + Sync;
/// `(x, s, theta) -> argmin_u g(x, u) + delta_Y(u) + ||u - theta||^2 / (2 s)`.
pub type ProxFn = dyn Fn(ArrayView1<f64>, f64, ArrayView1<f64>) -> Array1<f64> + Send + Sync;
pub type ProjFn = dyn Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync;

struct NonsmoothPart {
    value: Box<ScalarFn>,
    grad_x: Box<GradXFn>,
    prox: Box<ProxFn>,
}

/// Callable description of one bilevel instance.
///
/// The nonsmooth part `g` is optional; when absent the problem is smooth and
/// the prox of `g + delta_Y` degenerates to the projection onto `Y`.
pub struct ProblemSpec {
    n: usize,
    m: usize,
    upper_value: Box<ScalarFn>,
    upper_grad: Box<GradPairFn>,
    lower_value: Box<ScalarFn>,
    lower_grad: Box<GradPairFn>,
    nonsmooth: Option<NonsmoothPart>,
    proj_x: Option<Box<ProjFn>>,
    proj_y: Option<Box<ProjFn>>,
}

impl ProblemSpec {
    pub fn builder(n: usize, m: usize) -> ProblemSpecBuilder {
        ProblemSpecBuilder {
            n,
            m,
            upper_value: None,
            upper_grad: None,
            lower_value: None,
            lower_grad: None,
            nonsmooth: None,
            proj_x: None,
            proj_y: None,
        }
    }

    /// Dimension of the upper-level variable `x`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Dimension of the lower-level variable `y`.
    pub fn m(&self) -> usize {
        self.m
    }

    /// True when `g` is identically zero, selecting the smooth update path.
    pub fn smooth_only(&self) -> bool {
        self.nonsmooth.is_none()
    }

    pub fn eval_upper(&self, x: &Array1<f64>, y: &Array1<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.m);
        (self.upper_value)(x.view(), y.view())
    }

    pub fn grad_upper(&self, x: &Array1<f64>, y: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        (self.upper_grad)(x.view(), y.view())
    }

    pub fn eval_lower_smooth(&self, x: &Array1<f64>, y: &Array1<f64>) -> f64 {
        (self.lower_value)(x.view(), y.view())
    }

    pub fn grad_lower_smooth(&self, x: &Array1<f64>, y: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        (self.lower_grad)(x.view(), y.view())
    }

    pub fn eval_nonsmooth(&self, x: &Array1<f64>, y: &Array1<f64>) -> f64 {
        match &self.nonsmooth {
            Some(part) => (part.value)(x.view(), y.view()),
            None => 0.0,
        }
    }

    pub fn grad_x_nonsmooth(&self, x: &Array1<f64>, y: &Array1<f64>) -> Array1<f64> {
        match &self.nonsmooth {
            Some(part) => (part.grad_x)(x.view(), y.view()),
            None => Array1::zeros(self.n),
        }
    }

    /// Prox of `s * (g(x, .) + delta_Y)`; projection onto `Y` when `g == 0`.
    pub fn prox_nonsmooth(&self, x: &Array1<f64>, s: f64, theta: &Array1<f64>) -> Array1<f64> {
        debug_assert!(s > 0.0);
        match &self.nonsmooth {
            Some(part) => (part.prox)(x.view(), s, theta.view()),
            None => self.project_y(theta),
        }
    }

    pub fn project_x(&self, x: &Array1<f64>) -> Array1<f64> {
        match &self.proj_x {
            Some(p) => p(x.view()),
            None => x.clone(),
        }
    }

    pub fn project_y(&self, y: &Array1<f64>) -> Array1<f64> {
        match &self.proj_y {
            Some(p) => p(y.view()),
            None => y.clone(),
        }
    }

    /// Lower-level objective `f + g`.
    pub fn eval_lower_total(&self, x: &Array1<f64>, y: &Array1<f64>) -> f64 {
        self.eval_lower_smooth(x, y) + self.eval_nonsmooth(x, y)
    }
}

pub struct ProblemSpecBuilder {
    n: usize,
    m: usize,
    upper_value: Option<Box<ScalarFn>>,
    upper_grad: Option<Box<GradPairFn>>,
    lower_value: Option<Box<ScalarFn>>,
    lower_grad: Option<Box<GradPairFn>>,
    nonsmooth: Option<NonsmoothPart>,
    proj_x: Option<Box<ProjFn>>,
    proj_y: Option<Box<ProjFn>>,
}

impl ProblemSpecBuilder {
    pub fn upper(
        mut self,
        value: impl Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(ArrayView1<f64>, ArrayView1<f64>) -> (Array1<f64>, Array1<f64>)
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.upper_value = Some(Box::new(value));
        self.upper_grad = Some(Box::new(grad));
        self
    }

    pub fn lower_smooth(
        mut self,
        value: impl Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(ArrayView1<f64>, ArrayView1<f64>) -> (Array1<f64>, Array1<f64>)
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.lower_value = Some(Box::new(value));
        self.lower_grad = Some(Box::new(grad));
        self
    }

    pub fn nonsmooth(
        mut self,
        value: impl Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64 + Send + Sync + 'static,
        grad_x: impl Fn(ArrayView1<f64>, ArrayView1<f64>) -> Array1<f64> + Send + Sync + 'static,
        prox: impl Fn(ArrayView1<f64>, f64, ArrayView1<f64>) -> Array1<f64> + Send + Sync + 'static,
    ) -> Self {
        self.nonsmooth = Some(NonsmoothPart {
            value: Box::new(value),
            grad_x: Box::new(grad_x),
            prox: Box::new(prox),
        });
        self
    }

    pub fn project_x(
        mut self,
        proj: impl Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync + 'static,
    ) -> Self {
        self.proj_x = Some(Box::new(proj));
        self
    }

    pub fn project_y(
        mut self,
        proj: impl Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync + 'static,
    ) -> Self {
        self.proj_y = Some(Box::new(proj));
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        if self.n == 0 || self.m == 0 {
            return Err(MehaError::InvalidArgument(format!(
                "problem dimensions must be positive, got n = {}, m = {}",
                self.n, self.m
            )));
        }
        let (Some(upper_value), Some(upper_grad)) = (self.upper_value, self.upper_grad) else {
            return Err(MehaError::InvalidArgument(
                "problem is missing the upper-level objective".into(),
            ));
        };
        let (Some(lower_value), Some(lower_grad)) = (self.lower_value, self.lower_grad) else {
            return Err(MehaError::InvalidArgument(
                "problem is missing the smooth lower-level objective".into(),
            ));
        };
        Ok(ProblemSpec {
            n: self.n,
            m: self.m,
            upper_value,
            upper_grad,
            lower_value,
            lower_grad,
            nonsmooth: self.nonsmooth,
            proj_x: self.proj_x,
            proj_y: self.proj_y,
        })
    }
}

/// Optional smoothness and convexity constants of a problem.
///
/// `l_upper`, `l_lower`, `l_g` are Lipschitz constants of the gradients of
/// `F`, `f` and of `grad_x g`; `rho_f2`, `rho_g1`, `rho_g2` are weak
/// convexity moduli; `mu` is the strong convexity modulus of `f(x, .)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProblemConstants {
    pub l_upper: Option<f64>,
    pub l_lower: Option<f64>,
    pub l_g: Option<f64>,
    pub rho_f2: Option<f64>,
    pub rho_g1: Option<f64>,
    pub rho_g2: Option<f64>,
    pub mu: Option<f64>,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("l_upper", self.l_upper),
            ("l_lower", self.l_lower),
            ("l_g", self.l_g),
            ("rho_f2", self.rho_f2),
            ("rho_g1", self.rho_g1),
            ("rho_g2", self.rho_g2),
            ("mu", self.mu),
        ];
        for (name, value) in fields {
            if let Some(v) = value {
                if !v.is_finite() || v < 0.0 {
                    return Err(MehaError::InvalidArgument(format!(
                        "constant {name} must be finite and nonnegative, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Known solution of a benchmark instance, when one exists in closed form.
#[derive(Debug, Clone, Default)]
pub struct AnalyticSolution {
    pub x_star: Option<Array1<f64>>,
    pub y_star: Option<Array1<f64>>,
    /// Upper-level objective value at the solution.
    pub f_star: Option<f64>,
}

impl AnalyticSolution {
    /// Check that `F(x*, y*)` matches the stored optimal value.
    pub fn check_consistent(&self, prob: &ProblemSpec) -> Result<()> {
        if let (Some(x), Some(y), Some(f_star)) = (&self.x_star, &self.y_star, self.f_star) {
            let val = prob.eval_upper(x, y);
            let tol = 1e-9 * f_star.abs().max(1.0);
            if (val - f_star).abs() > tol {
                return Err(MehaError::InvalidArgument(format!(
                    "analytic solution is inconsistent: F(x*, y*) = {val} but F* = {f_star}"
                )));
            }
        }
        Ok(())
    }
}

/// Solver state: the triple `(x, y, theta)` plus the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    pub theta: Array1<f64>,
    pub k: usize,
}

impl IterateState {
    pub fn new(x: Array1<f64>, y: Array1<f64>, theta: Array1<f64>) -> Self {
        IterateState { x, y, theta, k: 0 }
    }

    /// Start with `theta = y`, the zero-displacement default.
    pub fn from_xy(x: Array1<f64>, y: Array1<f64>) -> Self {
        let theta = y.clone();
        IterateState { x, y, theta, k: 0 }
    }

    pub fn check_dims(&self, prob: &ProblemSpec) -> Result<()> {
        if self.x.len() != prob.n() || self.y.len() != prob.m() || self.theta.len() != prob.m() {
            return Err(MehaError::InvalidArgument(format!(
                "state dimensions ({}, {}, {}) do not match problem ({}, {})",
                self.x.len(),
                self.y.len(),
                self.theta.len(),
                prob.n(),
                prob.m()
            )));
        }
        Ok(())
    }
}
