//! Constructors for the synthetic benchmarks with analytic optima, the
//! sparse group lasso data generator, and CSV dataset ingestion.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Map, Value};

use crate::config::{SolverConfig, StepMode, StopRule};
use crate::error::{MehaError, Result};
use crate::problem::{AnalyticSolution, IterateState, ProblemConstants, ProblemSpec};

/// One data split: row-per-sample features and targets.
#[derive(Debug, Clone)]
pub struct Split {
    pub features: Array2<f64>,
    pub targets: Array1<f64>,
}

impl Split {
    fn validate(&self, name: &str) -> Result<()> {
        if self.features.nrows() == 0 {
            return Err(MehaError::InvalidArgument(format!(
                "{name} split has no rows"
            )));
        }
        if self.features.nrows() != self.targets.len() {
            return Err(MehaError::InvalidArgument(format!(
                "{name} split has {} rows but {} targets",
                self.features.nrows(),
                self.targets.len()
            )));
        }
        Ok(())
    }
}

/// Train/validation/test triple with a common feature dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn num_features(&self) -> usize {
        self.train.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate("train")?;
        self.val.validate("val")?;
        self.test.validate("test")?;
        let m = self.train.features.ncols();
        if self.val.features.ncols() != m || self.test.features.ncols() != m {
            return Err(MehaError::InvalidArgument(format!(
                "splits disagree on feature count: {} / {} / {}",
                m,
                self.val.features.ncols(),
                self.test.features.ncols()
            )));
        }
        Ok(())
    }
}

/// Problem plus everything needed to run and evaluate it: constants,
/// analytic solution when known, default configuration, and initial point.
pub struct ProblemBundle {
    pub name: &'static str,
    pub spec: ProblemSpec,
    pub constants: ProblemConstants,
    pub solution: Option<AnalyticSolution>,
    pub default_config: SolverConfig,
    pub init: IterateState,
    /// Problem parameters echoed into run manifests.
    pub params: Map<String, Value>,
    /// Present for data-driven problems; used for test-error reporting.
    pub dataset: Option<Arc<Dataset>>,
}

/// Half sum of squared residuals of the linear model `y` on a split.
pub fn squared_error_sum(split: &Split, y: &Array1<f64>) -> f64 {
    let pred = split.features.dot(y);
    let diff = &pred - &split.targets;
    0.5 * diff.dot(&diff)
}

fn mean_half_mse_value(split: &Split, y: &Array1<f64>) -> f64 {
    squared_error_sum(split, y) / split.features.nrows() as f64
}

fn mean_half_mse_grad(split: &Split, y: &Array1<f64>) -> Array1<f64> {
    let resid = &split.features.dot(y) - &split.targets;
    split.features.t().dot(&resid) / split.features.nrows() as f64
}

/// Largest eigenvalue of `A^T A / nrows` by power iteration.
fn mean_gram_spectral_norm(features: &Array2<f64>) -> f64 {
    let m = features.ncols();
    let n = features.nrows() as f64;
    let mut v = Array1::from_elem(m, 1.0 / (m as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = features.t().dot(&features.dot(&v)) / n;
        lambda = w.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
    }
    lambda.abs()
}

/// Strongly convex toy: `F = ||x - e||^2/2 + ||y||^2/2`,
/// `f = ||y||^2/2 - x . y`, `g = 0`, unconstrained; solution `x* = y* = e/2`.
pub fn make_strong_convex_toy(n: usize) -> Result<ProblemBundle> {
    if n == 0 {
        return Err(MehaError::InvalidArgument(
            "make_strong_convex_toy requires n >= 1".into(),
        ));
    }
    let spec = ProblemSpec::builder(n, n)
        .upper(
            |x, y| {
                let d = x.mapv(|v| v - 1.0);
                0.5 * d.dot(&d) + 0.5 * y.dot(&y)
            },
            |x, y| (x.mapv(|v| v - 1.0), y.to_owned()),
        )
        .lower_smooth(
            |x, y| 0.5 * y.dot(&y) - x.dot(&y),
            |x, y| (-y.to_owned(), &y.to_owned() - &x.to_owned()),
        )
        .build()?;

    let constants = ProblemConstants {
        l_upper: Some(1.0),
        l_lower: Some(1.0),
        l_g: Some(0.0),
        rho_f2: Some(0.0),
        rho_g1: Some(0.0),
        rho_g2: Some(0.0),
        mu: Some(1.0),
    };
    let solution = AnalyticSolution {
        x_star: Some(Array1::from_elem(n, 0.5)),
        y_star: Some(Array1::from_elem(n, 0.5)),
        f_star: Some(n as f64 / 4.0),
    };
    let default_config = SolverConfig {
        gamma: 10.0,
        c_lower: 33.3,
        p: 0.49,
        alpha0: 1.5,
        beta0: 0.8,
        eta0: 0.8,
        step_mode: StepMode::Fixed,
        max_iters: 50_000,
        inner_oracle_tol: 1e-10,
        seed: 0,
        stop_rule: StopRule::RelErrorToSolution { tol: 1e-3 },
    };
    let init = IterateState::from_xy(Array1::zeros(n), Array1::zeros(n));

    let mut params = Map::new();
    params.insert("dim".into(), json!(n));
    Ok(ProblemBundle {
        name: "strong_convex_toy",
        spec,
        constants,
        solution: Some(solution),
        default_config,
        init,
        params,
        dataset: None,
    })
}

/// Merely convex instance: `y = (y1, y2)`, `F = ||x - y2||^2/2 +
/// ||y1 - e||^2/2`, `f = ||y1||^2/2 - x . y1`, `g = 0`. The lower level
/// leaves `y2` free, so its solution set is non-singleton; the bilevel
/// solution is `(e, e, e)`.
pub fn make_merely_convex(n: usize) -> Result<ProblemBundle> {
    if n == 0 {
        return Err(MehaError::InvalidArgument(
            "make_merely_convex requires n >= 1".into(),
        ));
    }
    let spec = ProblemSpec::builder(n, 2 * n)
        .upper(
            move |x, y| {
                let y1 = y.slice(s![..n]);
                let y2 = y.slice(s![n..]);
                let dx = &x.to_owned() - &y2.to_owned();
                let dy = y1.mapv(|v| v - 1.0);
                0.5 * dx.dot(&dx) + 0.5 * dy.dot(&dy)
            },
            move |x, y| {
                let mut gy = Array1::zeros(2 * n);
                let mut gx = Array1::zeros(n);
                for i in 0..n {
                    gx[i] = x[i] - y[n + i];
                    gy[i] = y[i] - 1.0;
                    gy[n + i] = y[n + i] - x[i];
                }
                (gx, gy)
            },
        )
        .lower_smooth(
            move |x, y| {
                let y1 = y.slice(s![..n]);
                0.5 * y1.dot(&y1) - x.dot(&y1)
            },
            move |x, y| {
                let mut gx = Array1::zeros(n);
                let mut gy = Array1::zeros(2 * n);
                for i in 0..n {
                    gx[i] = -y[i];
                    gy[i] = y[i] - x[i];
                }
                (gx, gy)
            },
        )
        .build()?;

    let constants = ProblemConstants {
        l_upper: Some(2.0),
        l_lower: Some(1.62),
        l_g: Some(0.0),
        rho_f2: Some(0.0),
        rho_g1: Some(0.0),
        rho_g2: Some(0.0),
        mu: None,
    };
    let solution = AnalyticSolution {
        x_star: Some(Array1::ones(n)),
        y_star: Some(Array1::ones(2 * n)),
        f_star: Some(0.0),
    };
    // The step sizes must anneal here: with fixed steps the growing penalty
    // eventually exceeds the stable step range. The exponent 0.2 converges
    // orders of magnitude faster than 0.5 on this instance.
    let default_config = SolverConfig {
        gamma: 5.0,
        c_lower: 0.167,
        p: 0.49,
        alpha0: 0.012,
        beta0: 0.1,
        eta0: 0.009,
        step_mode: StepMode::InversePower { q: 0.2 },
        max_iters: 100_000,
        inner_oracle_tol: 1e-10,
        seed: 0,
        stop_rule: StopRule::RelErrorToSolution { tol: 1e-3 },
    };
    let init = IterateState::from_xy(Array1::zeros(n), Array1::zeros(2 * n));

    let mut params = Map::new();
    params.insert("dim".into(), json!(n));
    Ok(ProblemBundle {
        name: "merely_convex",
        spec,
        constants,
        solution: Some(solution),
        default_config,
        init,
        params,
        dataset: None,
    })
}

/// Nearest minimizer `-pi/2 + 2 k pi` of the sine to the point `2a`.
fn nearest_sine_minimizer(a: f64) -> f64 {
    let k0 = ((2.0 * a + PI / 2.0) / (2.0 * PI)).round() as i64;
    let mut best = f64::INFINITY;
    let mut best_c = 0.0;
    for k in (k0 - 2)..=(k0 + 2) {
        let c = -PI / 2.0 + 2.0 * PI * k as f64;
        if (c - 2.0 * a).abs() < best {
            best = (c - 2.0 * a).abs();
            best_c = c;
        }
    }
    best_c
}

/// Nonconvex lower level: scalar `x`, `F = (x - a)^2 + ||y - a e - c||^2`,
/// per-coordinate lower level `min sin(x + y_i - c_i)`.
pub fn make_sin_nonconvex(n: usize, a: f64, c_vec: &Array1<f64>) -> Result<ProblemBundle> {
    if n == 0 {
        return Err(MehaError::InvalidArgument(
            "make_sin_nonconvex requires n >= 1".into(),
        ));
    }
    if c_vec.len() != n {
        return Err(MehaError::InvalidArgument(format!(
            "make_sin_nonconvex: c has length {} but n = {n}",
            c_vec.len()
        )));
    }
    let c_f = c_vec.clone();
    let c_grad_f = c_vec.clone();
    let c_upper = c_vec.clone();
    let c_upper_grad = c_vec.clone();

    let spec = ProblemSpec::builder(1, n)
        .upper(
            move |x, y| {
                let dx = x[0] - a;
                let mut out = dx * dx;
                for i in 0..y.len() {
                    let d = y[i] - a - c_upper[i];
                    out += d * d;
                }
                out
            },
            move |x, y| {
                let gx = Array1::from(vec![2.0 * (x[0] - a)]);
                let mut gy = Array1::zeros(y.len());
                for i in 0..y.len() {
                    gy[i] = 2.0 * (y[i] - a - c_upper_grad[i]);
                }
                (gx, gy)
            },
        )
        .lower_smooth(
            move |x, y| (0..y.len()).map(|i| (x[0] + y[i] - c_f[i]).sin()).sum(),
            move |x, y| {
                let mut gy = Array1::zeros(y.len());
                let mut gx_sum = 0.0;
                for i in 0..y.len() {
                    let c = (x[0] + y[i] - c_grad_f[i]).cos();
                    gy[i] = c;
                    gx_sum += c;
                }
                (Array1::from(vec![gx_sum]), gy)
            },
        )
        .build()?;

    let big_c = nearest_sine_minimizer(a);
    let nf = n as f64;
    let x_star = ((1.0 - nf) * a + nf * big_c) / (1.0 + nf);
    let y_star = c_vec.mapv(|ci| big_c + ci - x_star);
    let f_star = nf * (big_c - 2.0 * a).powi(2) / (1.0 + nf);

    let constants = ProblemConstants {
        l_upper: Some(2.0),
        l_lower: Some(nf + 1.0),
        l_g: Some(0.0),
        rho_f2: Some(1.0),
        rho_g1: Some(0.0),
        rho_g2: Some(0.0),
        mu: None,
    };
    let solution = AnalyticSolution {
        x_star: Some(Array1::from(vec![x_star])),
        y_star: Some(y_star),
        f_star: Some(f_star),
    };
    let stop_rule = if n == 1 {
        StopRule::DirectionNorm { tol: 1e-8 }
    } else {
        StopRule::DirectionNorm { tol: 1e-3 }
    };
    let default_config = SolverConfig {
        gamma: 200.0,
        c_lower: 0.02,
        p: 0.49,
        alpha0: 5e-4,
        beta0: 5e-4,
        eta0: 1e-3,
        step_mode: StepMode::Fixed,
        max_iters: 800,
        inner_oracle_tol: 1e-10,
        seed: 0,
        stop_rule,
    };
    let init = IterateState::from_xy(Array1::from(vec![-6.0]), Array1::zeros(n));

    let mut params = Map::new();
    params.insert("dim".into(), json!(n));
    params.insert("a".into(), json!(a));
    params.insert("c".into(), json!(c_vec.to_vec()));
    Ok(ProblemBundle {
        name: "sin_nonconvex",
        spec,
        constants,
        solution: Some(solution),
        default_config,
        init,
        params,
        dataset: None,
    })
}

/// [`make_sin_nonconvex`] with `c_i = c` for all coordinates.
pub fn make_sin_nonconvex_uniform(n: usize, a: f64, c: f64) -> Result<ProblemBundle> {
    make_sin_nonconvex(n, a, &Array1::from_elem(n, c))
}

/// Nonsmooth lasso toy: `X = [0,1]^n`, `F = sum_i y_i`,
/// `f = ||y - a||^2/2` with `a = (1/n, ..., -1/n, ...)`, `g = sum_i x_i |y_i|`.
///
/// The solution set has `y_i = 0, x_i in [1/n, 1]` on the first half and
/// `y_i = -1/n, x_i = 0` on the second; the stored representative uses
/// `x_i = 1/n`.
pub fn make_lasso_toy(n: usize) -> Result<ProblemBundle> {
    if n == 0 || n % 2 != 0 {
        return Err(MehaError::InvalidArgument(format!(
            "make_lasso_toy requires even n >= 2, got {n}"
        )));
    }
    let inv = 1.0 / n as f64;
    let mut a = Array1::from_elem(n, inv);
    for i in n / 2..n {
        a[i] = -inv;
    }
    let a_f = a.clone();
    let a_g = a.clone();

    let spec = ProblemSpec::builder(n, n)
        .upper(
            |_, y| y.sum(),
            |x, y| (Array1::zeros(x.len()), Array1::ones(y.len())),
        )
        .lower_smooth(
            move |_, y| {
                let d = &y.to_owned() - &a_f;
                0.5 * d.dot(&d)
            },
            move |x, y| (Array1::zeros(x.len()), &y.to_owned() - &a_g),
        )
        .nonsmooth(
            |x, y| x.iter().zip(y.iter()).map(|(xi, yi)| xi * yi.abs()).sum(),
            |_, y| y.mapv(f64::abs),
            |x, s, theta| {
                let mut out = theta.to_owned();
                for i in 0..out.len() {
                    let tau = s * x[i].max(0.0);
                    out[i] = (out[i].abs() - tau).max(0.0) * out[i].signum();
                }
                out
            },
        )
        .project_x(|x| x.mapv(|v| v.clamp(0.0, 1.0)))
        .build()?;

    let constants = ProblemConstants {
        l_upper: Some(0.0),
        l_lower: Some(1.0),
        l_g: Some(1.0),
        rho_f2: Some(0.0),
        rho_g1: Some(1.0),
        rho_g2: Some(1.0),
        mu: Some(1.0),
    };
    let mut x_star = Array1::from_elem(n, inv);
    let mut y_star = Array1::zeros(n);
    for i in n / 2..n {
        x_star[i] = 0.0;
        y_star[i] = -inv;
    }
    let solution = AnalyticSolution {
        x_star: Some(x_star),
        y_star: Some(y_star),
        f_star: Some(-0.5),
    };
    let default_config = SolverConfig {
        gamma: 10.0,
        c_lower: 2.0,
        p: 0.49,
        alpha0: 0.1,
        beta0: 1e-5,
        eta0: 0.1,
        step_mode: StepMode::Fixed,
        max_iters: 600_000,
        inner_oracle_tol: 1e-10,
        seed: 0,
        stop_rule: StopRule::MaxItersOnly,
    };
    // Full regularization at the box corner, lower level solved for x = 0.
    let init = IterateState::from_xy(Array1::ones(n), a);

    let mut params = Map::new();
    params.insert("dim".into(), json!(n));
    Ok(ProblemBundle {
        name: "lasso_toy",
        spec,
        constants,
        solution: Some(solution),
        default_config,
        init,
        params,
        dataset: None,
    })
}

/// Group lasso hyperparameter selection: `X = R^J_+`, `F` the validation
/// loss, `f` the training loss, `g = sum_j x_j ||y^(j)||_2` over `J`
/// contiguous equal-size groups.
pub fn make_group_lasso(dataset: Dataset, j_groups: usize) -> Result<ProblemBundle> {
    dataset.validate()?;
    let m = dataset.num_features();
    if j_groups == 0 || m % j_groups != 0 {
        return Err(MehaError::InvalidArgument(format!(
            "make_group_lasso: {m} features cannot form {j_groups} equal contiguous groups"
        )));
    }
    let group_len = m / j_groups;
    let dataset = Arc::new(dataset);

    let d_f = dataset.clone();
    let d_f_grad = dataset.clone();
    let d_upper = dataset.clone();
    let d_upper_grad = dataset.clone();

    let spec = ProblemSpec::builder(j_groups, m)
        .upper(
            move |_, y| mean_half_mse_value(&d_upper.val, &y.to_owned()),
            move |x, y| {
                (
                    Array1::zeros(x.len()),
                    mean_half_mse_grad(&d_upper_grad.val, &y.to_owned()),
                )
            },
        )
        .lower_smooth(
            move |_, y| mean_half_mse_value(&d_f.train, &y.to_owned()),
            move |x, y| {
                (
                    Array1::zeros(x.len()),
                    mean_half_mse_grad(&d_f_grad.train, &y.to_owned()),
                )
            },
        )
        .nonsmooth(
            move |x, y| {
                let mut total = 0.0;
                for j in 0..j_groups {
                    let block = y.slice(s![j * group_len..(j + 1) * group_len]);
                    total += x[j] * block.dot(&block).sqrt();
                }
                total
            },
            move |_, y| {
                let mut norms = Array1::zeros(j_groups);
                for j in 0..j_groups {
                    let block = y.slice(s![j * group_len..(j + 1) * group_len]);
                    norms[j] = block.dot(&block).sqrt();
                }
                norms
            },
            move |x, s, theta| {
                let mut out = theta.to_owned();
                for j in 0..j_groups {
                    let range = j * group_len..(j + 1) * group_len;
                    let block = theta.slice(s![range.clone()]);
                    let norm = block.dot(&block).sqrt();
                    let w = s * x[j].max(0.0);
                    if norm > w {
                        let shrunk = norm - w;
                        for i in range {
                            out[i] = theta[i] / norm * shrunk;
                        }
                    } else {
                        for i in range {
                            out[i] = 0.0;
                        }
                    }
                }
                out
            },
        )
        .project_x(|x| x.mapv(|v| v.max(0.0)))
        .build()?;

    let l_upper = mean_gram_spectral_norm(&dataset.val.features);
    let l_lower = mean_gram_spectral_norm(&dataset.train.features);
    let constants = ProblemConstants {
        l_upper: Some(l_upper),
        l_lower: Some(l_lower),
        l_g: Some(1.0),
        rho_f2: Some(0.0),
        rho_g1: Some(1.0),
        rho_g2: Some(1.0),
        mu: None,
    };
    let default_config = SolverConfig {
        gamma: 100.0,
        c_lower: 20.0,
        p: 0.48,
        alpha0: 0.01,
        beta0: 0.05,
        eta0: 0.05,
        step_mode: StepMode::Fixed,
        max_iters: 5_000,
        inner_oracle_tol: 1e-10,
        seed: 0,
        stop_rule: StopRule::RelChangeX { tol: 0.2 },
    };
    let init = IterateState::from_xy(Array1::zeros(j_groups), Array1::zeros(m));

    let mut params = Map::new();
    params.insert("dim".into(), json!(m));
    params.insert("groups".into(), json!(j_groups));
    Ok(ProblemBundle {
        name: "group_lasso",
        spec,
        constants,
        solution: None,
        default_config,
        init,
        params,
        dataset: Some(dataset),
    })
}

/// True coefficient vector of the generated regression: three equal blocks,
/// each starting with 50 ones.
pub fn group_lasso_true_coefficients(m: usize) -> Result<Array1<f64>> {
    if m < 150 {
        return Err(MehaError::InvalidArgument(format!(
            "group lasso data needs m >= 150 for three 50-one blocks, got {m}"
        )));
    }
    let block = m / 3;
    let mut v = Array1::zeros(m);
    for b in 0..3 {
        for i in 0..50 {
            v[b * block + i] = 1.0;
        }
    }
    Ok(v)
}

/// Generate the synthetic regression data: standard normal features,
/// `b = v . a + sigma eps` with `sigma` scaled so the signal-to-noise
/// amplitude ratio is 2 (variance ratio 4), `n_each` samples per split.
pub fn generate_group_lasso_data(n_each: usize, m: usize, seed: u64) -> Result<Dataset> {
    generate_group_lasso_data_with_noise(n_each, m, seed, None)
}

/// Data generator with an explicit noise level; `None` derives `sigma`
/// from the target signal-to-noise ratio.
pub fn generate_group_lasso_data_with_noise(
    n_each: usize,
    m: usize,
    seed: u64,
    sigma: Option<f64>,
) -> Result<Dataset> {
    if n_each == 0 {
        return Err(MehaError::InvalidArgument(
            "generate_group_lasso_data requires at least one sample per split".into(),
        ));
    }
    let v = group_lasso_true_coefficients(m)?;
    // Var(v . a) = ||v||^2 for standard normal a; amplitude SNR 2 means a
    // variance ratio of 4.
    let sigma = sigma.unwrap_or_else(|| v.dot(&v).sqrt() / 2.0);
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(MehaError::InvalidArgument(format!(
            "noise level must be finite and nonnegative, got {sigma}"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let make_split = |rng: &mut ChaCha20Rng| {
        let mut features = Array2::zeros((n_each, m));
        let mut targets = Array1::zeros(n_each);
        for i in 0..n_each {
            for j in 0..m {
                features[[i, j]] = rng.sample::<f64, _>(StandardNormal);
            }
            let eps: f64 = rng.sample(StandardNormal);
            targets[i] = features.row(i).dot(&v) + sigma * eps;
        }
        Split { features, targets }
    };
    let train = make_split(&mut rng);
    let val = make_split(&mut rng);
    let test = make_split(&mut rng);
    Ok(Dataset { train, val, test })
}

/// Minimum-norm least squares fit by gradient descent from zero; serves as
/// the unregularized baseline.
pub fn min_norm_least_squares(split: &Split, max_iters: usize) -> Array1<f64> {
    let lambda = mean_gram_spectral_norm(&split.features);
    if lambda == 0.0 {
        return Array1::zeros(split.features.ncols());
    }
    let step = 1.0 / lambda;
    let mut y = Array1::zeros(split.features.ncols());
    for _ in 0..max_iters {
        let grad = mean_half_mse_grad(split, &y);
        let gnorm = grad.dot(&grad).sqrt();
        if gnorm <= 1e-12 {
            break;
        }
        y = &y - &(grad * step);
    }
    y
}

fn parse_csv_split(path: &Path) -> Result<Split> {
    let text = std::fs::read_to_string(path).map_err(|e| MehaError::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut expected_cols: Option<usize> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let row_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let parsed: Vec<Option<f64>> = cells
            .iter()
            .map(|c| c.trim().parse::<f64>().ok())
            .collect();
        if rows.is_empty() && expected_cols.is_none() && parsed.iter().any(|p| p.is_none()) {
            // First row with non-numeric cells is treated as a header.
            expected_cols = Some(cells.len());
            continue;
        }
        if let Some(cols) = expected_cols {
            if cells.len() != cols {
                return Err(MehaError::CsvParse {
                    path: path.into(),
                    row: row_no,
                    message: format!("expected {cols} columns, found {}", cells.len()),
                });
            }
        } else {
            expected_cols = Some(cells.len());
        }
        let mut values = Vec::with_capacity(cells.len());
        for (col, parsed_cell) in parsed.iter().enumerate() {
            match parsed_cell {
                Some(v) => values.push(*v),
                None => {
                    return Err(MehaError::CsvParse {
                        path: path.into(),
                        row: row_no,
                        message: format!(
                            "column {}: cannot parse {:?} as a number",
                            col + 1,
                            cells[col]
                        ),
                    });
                }
            }
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(MehaError::CsvParse {
            path: path.into(),
            row: 0,
            message: "no data rows".into(),
        });
    }
    let cols = rows[0].len();
    if cols < 2 {
        return Err(MehaError::CsvParse {
            path: path.into(),
            row: 1,
            message: "need at least one feature column plus the target".into(),
        });
    }
    let n = rows.len();
    let mut features = Array2::zeros((n, cols - 1));
    let mut targets = Array1::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..cols - 1 {
            features[[i, j]] = row[j];
        }
        targets[i] = row[cols - 1];
    }
    Ok(Split { features, targets })
}

/// Load a dataset from three CSV files (train, validation, test). Comma
/// separated, optional single header row, last column is the target.
pub fn load_csv_dataset(path_train: &Path, path_val: &Path, path_test: &Path) -> Result<Dataset> {
    let train = parse_csv_split(path_train)?;
    let val = parse_csv_split(path_val)?;
    let test = parse_csv_split(path_test)?;
    let dataset = Dataset { train, val, test };
    dataset.validate()?;
    Ok(dataset)
}

/// Residual of the lower-level first-order condition at `(x, y)` through
/// the prox fixed-point identity: `||y - prox_{s g(x,.)}(y - s grad_y f)|| / s`.
pub fn lower_level_stationarity_error(
    spec: &ProblemSpec,
    x: &Array1<f64>,
    y: &Array1<f64>,
    s: f64,
) -> f64 {
    let (_, grad_y) = spec.grad_lower_smooth(x, y);
    let mapped = spec.prox_nonsmooth(x, s, &(y - &(&grad_y * s)));
    (y - &mapped).mapv(|v| v * v).sum().sqrt() / s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::finite_diff_check;
    use crate::prox::group_soft_threshold;
    use ndarray::array;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn bundle_zoo() -> Vec<ProblemBundle> {
        vec![
            make_strong_convex_toy(5).unwrap(),
            make_merely_convex(4).unwrap(),
            make_sin_nonconvex_uniform(3, 2.0, 2.0).unwrap(),
            make_lasso_toy(6).unwrap(),
            make_group_lasso(generate_group_lasso_data(40, 150, 3).unwrap(), 10).unwrap(),
        ]
    }

    fn random_feasible_point(
        spec: &ProblemSpec,
        rng: &mut ChaCha8Rng,
    ) -> (Array1<f64>, Array1<f64>) {
        let x = Array1::from(
            (0..spec.n())
                .map(|_| rng.random_range(-2.0..2.0))
                .collect::<Vec<_>>(),
        );
        let y = Array1::from(
            (0..spec.m())
                .map(|_| rng.random_range(-2.0..2.0))
                .collect::<Vec<_>>(),
        );
        (spec.project_x(&x), spec.project_y(&y))
    }

    #[test]
    fn all_bundle_gradients_pass_finite_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for bundle in bundle_zoo() {
            let spec = &bundle.spec;
            for _ in 0..20 {
                let (x, y) = random_feasible_point(spec, &mut rng);

                let yx = y.clone();
                let fx = |xv: ndarray::ArrayView1<f64>| spec.eval_upper(&xv.to_owned(), &yx);
                let gx = |xv: ndarray::ArrayView1<f64>| spec.grad_upper(&xv.to_owned(), &yx).0;
                let err = finite_diff_check(fx, gx, &[x.clone()], 1e-6).unwrap();
                assert!(err <= 1e-5, "{}: grad_x F error {err}", bundle.name);

                let xx = x.clone();
                let fy = |yv: ndarray::ArrayView1<f64>| spec.eval_upper(&xx, &yv.to_owned());
                let gy = |yv: ndarray::ArrayView1<f64>| spec.grad_upper(&xx, &yv.to_owned()).1;
                let err = finite_diff_check(fy, gy, &[y.clone()], 1e-6).unwrap();
                assert!(err <= 1e-5, "{}: grad_y F error {err}", bundle.name);

                let yx = y.clone();
                let fx = |xv: ndarray::ArrayView1<f64>| spec.eval_lower_smooth(&xv.to_owned(), &yx);
                let gx =
                    |xv: ndarray::ArrayView1<f64>| spec.grad_lower_smooth(&xv.to_owned(), &yx).0;
                let err = finite_diff_check(fx, gx, &[x.clone()], 1e-6).unwrap();
                assert!(err <= 1e-5, "{}: grad_x f error {err}", bundle.name);

                let xx = x.clone();
                let fy = |yv: ndarray::ArrayView1<f64>| spec.eval_lower_smooth(&xx, &yv.to_owned());
                let gy =
                    |yv: ndarray::ArrayView1<f64>| spec.grad_lower_smooth(&xx, &yv.to_owned()).1;
                let err = finite_diff_check(fy, gy, &[y.clone()], 1e-6).unwrap();
                assert!(err <= 1e-5, "{}: grad_y f error {err}", bundle.name);
            }
        }
    }

    #[test]
    fn analytic_solutions_are_consistent_and_ll_stationary() {
        for bundle in bundle_zoo() {
            let Some(solution) = &bundle.solution else {
                continue;
            };
            solution.check_consistent(&bundle.spec).unwrap();
            let (x, y) = (
                solution.x_star.as_ref().unwrap(),
                solution.y_star.as_ref().unwrap(),
            );
            let err = lower_level_stationarity_error(&bundle.spec, x, y, 1e-3);
            assert!(err <= 1e-9, "{}: LL stationarity error {err}", bundle.name);
        }
    }

    #[test]
    fn default_configs_pass_validation() {
        for bundle in bundle_zoo() {
            // Warnings are fine (the benchmark settings sit outside the
            // theoretical bounds on purpose); hard errors are not.
            crate::config::validate_config(&bundle.default_config, &bundle.constants)
                .unwrap_or_else(|e| panic!("{}: {e}", bundle.name));
        }
    }

    #[test]
    fn toy_solution_value() {
        let bundle = make_strong_convex_toy(8).unwrap();
        let s = bundle.solution.as_ref().unwrap();
        let f = bundle
            .spec
            .eval_upper(s.x_star.as_ref().unwrap(), s.y_star.as_ref().unwrap());
        assert!((f - 2.0).abs() < 1e-12); // n/4 with n = 8
        // y*(x) = x solves the lower level for any x.
        let x = array![0.3, -1.0, 0.5, 2.0, 0.0, 1.0, -0.5, 0.25];
        let err = lower_level_stationarity_error(&bundle.spec, &x, &x, 1e-3);
        assert!(err <= 1e-12);
        // n = 1 solution is 0.5.
        let one = make_strong_convex_toy(1).unwrap();
        assert_eq!(one.solution.unwrap().x_star.unwrap()[0], 0.5);
    }

    #[test]
    fn merely_convex_structure() {
        let n = 3;
        let bundle = make_merely_convex(n).unwrap();
        // f ignores y2: its gradient block is zero, so the lower-level
        // solution set is non-singleton.
        let x = array![0.5, -0.5, 1.5];
        let mut y = Array1::zeros(2 * n);
        for i in 0..n {
            y[n + i] = 7.0 + i as f64; // arbitrary y2
            y[i] = x[i]; // y1 = x is lower-level optimal
        }
        let (_, gy) = bundle.spec.grad_lower_smooth(&x, &y);
        for i in 0..n {
            assert_eq!(gy[n + i], 0.0);
            assert!(gy[i].abs() < 1e-14);
        }
        let s = bundle.solution.as_ref().unwrap();
        assert_eq!(
            bundle
                .spec
                .eval_upper(s.x_star.as_ref().unwrap(), s.y_star.as_ref().unwrap()),
            0.0
        );
    }

    #[test]
    fn sin_solution_matches_known_values() {
        let bundle = make_sin_nonconvex_uniform(1, 2.0, 2.0).unwrap();
        let s = bundle.solution.as_ref().unwrap();
        let x_star = s.x_star.as_ref().unwrap()[0];
        assert!((x_star - 3.0 * PI / 4.0).abs() < 1e-12);
        assert!((s.y_star.as_ref().unwrap()[0] - (3.0 * PI / 4.0 + 2.0)).abs() < 1e-12);
        let expected_f = (3.0 * PI / 2.0 - 4.0).powi(2) / 2.0;
        assert!((s.f_star.unwrap() - expected_f).abs() < 1e-12);
        // The chosen sine point is stationary and a minimum.
        let arg = x_star + s.y_star.as_ref().unwrap()[0] - 2.0;
        assert!(arg.cos().abs() < 1e-12);
        assert!((arg.sin() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sine_minimizer_is_windowed_argmin() {
        for a in [-3.0, -0.7, 0.0, 1.3, 2.0, 5.9] {
            let c = nearest_sine_minimizer(a);
            for k in -3..=3 {
                let cand = -PI / 2.0 + 2.0 * PI * k as f64;
                assert!(
                    (c - 2.0 * a).abs() <= (cand - 2.0 * a).abs() + 1e-12,
                    "a = {a}: {c} beaten by {cand}"
                );
            }
        }
    }

    #[test]
    fn lasso_toy_solution_is_prox_fixed_point() {
        let n = 10;
        let bundle = make_lasso_toy(n).unwrap();
        let s = bundle.solution.as_ref().unwrap();
        let x = s.x_star.as_ref().unwrap();
        let y = s.y_star.as_ref().unwrap();
        // Second half: weight 0 keeps y_i = a_i = -1/n unchanged. First
        // half: weight x_i = 1/n >= |a_i| shrinks to zero.
        let err = lower_level_stationarity_error(&bundle.spec, x, y, 0.5);
        assert!(err <= 1e-12, "err = {err}");
        // F at the solution is -1/2 for every even n.
        assert!((bundle.spec.eval_upper(x, y) + 0.5).abs() < 1e-12);
        assert!(make_lasso_toy(7).is_err());
    }

    #[test]
    fn group_lasso_prox_matches_public_operator() {
        let m = 150;
        let j = 10;
        let data = generate_group_lasso_data(20, m, 11).unwrap();
        let bundle = make_group_lasso(data, j).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = Array1::from(
            (0..m)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect::<Vec<_>>(),
        );
        let x = Array1::from((0..j).map(|_| rng.random_range(0.0..1.5)).collect::<Vec<_>>());
        let s = 0.3;
        let via_bundle = bundle.spec.prox_nonsmooth(&x, s, &theta);
        let groups: Vec<Vec<usize>> = (0..j)
            .map(|g| ((g * m / j)..((g + 1) * m / j)).collect())
            .collect();
        let weights: Vec<f64> = x.iter().map(|v| s * v).collect();
        let via_public = group_soft_threshold(&theta, &groups, &weights).unwrap();
        assert_eq!(via_bundle, via_public);
    }

    #[test]
    fn group_lasso_zero_weights_reduce_to_least_squares() {
        let data = generate_group_lasso_data(30, 150, 7).unwrap();
        let bundle = make_group_lasso(data, 10).unwrap();
        let x0 = Array1::zeros(10);
        let y = Array1::from((0..150).map(|i| (i % 5) as f64 * 0.1).collect::<Vec<_>>());
        assert_eq!(bundle.spec.eval_nonsmooth(&x0, &y), 0.0);
        // Prox with zero weights is the identity.
        let p = bundle.spec.prox_nonsmooth(&x0, 0.5, &y);
        assert_eq!(p, y);
    }

    #[test]
    fn group_lasso_shrinkage_monotone_in_weight() {
        let data = generate_group_lasso_data(30, 150, 9).unwrap();
        let bundle = make_group_lasso(data, 10).unwrap();
        let theta = Array1::from_elem(150, 0.5);
        let mut last = f64::INFINITY;
        for scale in [0.0, 0.5, 1.0, 2.0] {
            let x = Array1::from_elem(10, scale);
            let p = bundle.spec.prox_nonsmooth(&x, 1.0, &theta);
            let n = p.dot(&p).sqrt();
            assert!(n <= last + 1e-12);
            last = n;
        }
    }

    #[test]
    fn group_lasso_rejects_indivisible_grouping() {
        let data = generate_group_lasso_data(10, 150, 0).unwrap();
        assert!(make_group_lasso(data, 7).is_err());
    }

    #[test]
    fn data_generation_is_deterministic() {
        let a = generate_group_lasso_data(15, 150, 123).unwrap();
        let b = generate_group_lasso_data(15, 150, 123).unwrap();
        assert_eq!(a.train.features, b.train.features);
        assert_eq!(a.test.targets, b.test.targets);
        let c = generate_group_lasso_data(15, 150, 124).unwrap();
        assert_ne!(a.train.targets, c.train.targets);
    }

    #[test]
    fn data_generation_rejects_small_m() {
        assert!(generate_group_lasso_data(10, 149, 0).is_err());
        assert!(generate_group_lasso_data(0, 150, 0).is_err());
    }

    #[test]
    fn noiseless_data_recovers_coefficients() {
        // Overdetermined noiseless regression: gradient descent recovers v.
        let m = 150;
        let data = generate_group_lasso_data_with_noise(400, m, 5, Some(0.0)).unwrap();
        let v = group_lasso_true_coefficients(m).unwrap();
        let fit = min_norm_least_squares(&data.train, 20_000);
        let err = (&fit - &v).mapv(|t| t * t).sum().sqrt();
        assert!(err <= 1e-6, "recovery error {err}");
    }

    #[test]
    fn empirical_snr_near_target() {
        // Var(signal)/Var(noise) should sit near 4 across seeds.
        let m = 300;
        let v = group_lasso_true_coefficients(m).unwrap();
        let mut ratios = Vec::new();
        for seed in 0..10 {
            let data = generate_group_lasso_data(300, m, seed).unwrap();
            let signal = data.train.features.dot(&v);
            let noise = &data.train.targets - &signal;
            let var = |z: &Array1<f64>| {
                let mean = z.sum() / z.len() as f64;
                z.mapv(|t| (t - mean) * (t - mean)).sum() / z.len() as f64
            };
            ratios.push(var(&signal) / var(&noise));
        }
        let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(
            (mean_ratio - 4.0).abs() / 4.0 <= 0.1,
            "mean variance ratio {mean_ratio}"
        );
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_happy_path_with_header() {
        let train = write_temp("f1,f2,target\n1.0,2.0,3.0\n4.0,5.0,6.0\n");
        let val = write_temp("0.5,0.5,1.0\n");
        let test = write_temp("1.5,2.5,4.0\r\n2.0,3.0,5.0\r\n");
        let ds = load_csv_dataset(train.path(), val.path(), test.path()).unwrap();
        assert_eq!(ds.num_features(), 2);
        assert_eq!(ds.train.targets, array![3.0, 6.0]);
        assert_eq!(ds.test.features[[1, 1]], 3.0);
    }

    #[test]
    fn csv_ragged_row_names_the_row() {
        let train = write_temp("1.0,2.0,3.0\n4.0,5.0\n");
        let val = write_temp("1.0,2.0,3.0\n");
        let test = write_temp("1.0,2.0,3.0\n");
        let err = load_csv_dataset(train.path(), val.path(), test.path()).unwrap_err();
        match err {
            MehaError::CsvParse { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn csv_non_numeric_cell_names_row_and_column() {
        let train = write_temp("1.0,2.0,3.0\n4.0,oops,6.0\n");
        let val = write_temp("1.0,2.0,3.0\n");
        let test = write_temp("1.0,2.0,3.0\n");
        let err = load_csv_dataset(train.path(), val.path(), test.path()).unwrap_err();
        match err {
            MehaError::CsvParse { row, message, .. } => {
                assert_eq!(row, 2);
                assert!(message.contains("column 2"), "{message}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn csv_missing_file_errors() {
        let val = write_temp("1.0,2.0\n");
        let err = load_csv_dataset(Path::new("/nonexistent.csv"), val.path(), val.path());
        assert!(matches!(err, Err(MehaError::Io { .. })));
    }

    #[test]
    fn csv_splits_must_agree_on_columns() {
        let train = write_temp("1.0,2.0,3.0\n");
        let val = write_temp("1.0,2.0\n");
        let test = write_temp("1.0,2.0,3.0\n");
        assert!(load_csv_dataset(train.path(), val.path(), test.path()).is_err());
    }
}
