//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with the measured quantities. Tolerances are pinned in the asserts.

use std::sync::OnceLock;

use ndarray::{Array1, Array2};

use meha::config::{StepMode, StopRule};
use meha::diagnostics::{rate_fit, RateField};
use meha::moreau::{contraction_factor, theta_step, InnerOracle};
use meha::problems::{
    generate_group_lasso_data, make_group_lasso, make_lasso_toy, make_merely_convex,
    make_sin_nonconvex_uniform, make_strong_convex_toy, min_norm_least_squares,
    squared_error_sum, ProblemBundle,
};
use meha::prox::{group_soft_threshold, oracle_grid_spacing, prox_bruteforce_oracle, soft_threshold};
use meha::solver::{run_with_plan, MeritPlan, RunResult, StopReason, TracePlan};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn l2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn rel_err(v: &Array1<f64>, reference: &Array1<f64>) -> f64 {
    l2(&(v - reference)) / l2(reference)
}

/// Criterion 1 and criterion 10 evaluate the same run; compute it once.
/// Reference strong-convex settings, n = 1000; the stop tolerance is
/// tightened (the stop rule is not among the pinned settings) so the final
/// iterate also supports the hypergradient check.
fn toy_run() -> &'static (ProblemBundle, RunResult) {
    static RUN: OnceLock<(ProblemBundle, RunResult)> = OnceLock::new();
    RUN.get_or_init(|| {
        let bundle = make_strong_convex_toy(1000).unwrap();
        let mut cfg = bundle.default_config.clone();
        cfg.max_iters = 50_000;
        cfg.stop_rule = StopRule::RelErrorToSolution { tol: 2.5e-5 };
        let plan = TracePlan {
            oracle_every: 0,
            ..Default::default()
        };
        let result = run_with_plan(
            &bundle.spec,
            &cfg,
            &bundle.init,
            bundle.solution.as_ref(),
            &plan,
        )
        .unwrap();
        (bundle, result)
    })
}

#[test]
fn criterion_01_strong_convex_toy_accuracy_and_time() {
    let (bundle, result) = toy_run();
    let solution = bundle.solution.as_ref().unwrap();
    let ex = rel_err(&result.final_state.x, solution.x_star.as_ref().unwrap());
    let ey = rel_err(&result.final_state.y, solution.y_star.as_ref().unwrap());
    let k = result.final_state.k;
    let wall = result.wall_time_s;
    let pass = ex <= 1e-3 && ey <= 1e-3 && k <= 50_000 && wall < 10.0;
    println!(
        "criterion 01 strong-convex n=1000: {} (err_x={ex:.3e}, err_y={ey:.3e}, k={k}, wall={wall:.3}s)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(ex <= 1e-3, "relative x error {ex} exceeds 1e-3");
    assert!(ey <= 1e-3, "relative y error {ey} exceeds 1e-3");
    assert!(k <= 50_000, "run took {k} iterations");
    assert!(wall < 10.0, "run took {wall} s");
}

#[test]
fn criterion_02_merely_convex_stops_at_tolerance() {
    let bundle = make_merely_convex(100).unwrap();
    let result = run_with_plan(
        &bundle.spec,
        &bundle.default_config,
        &bundle.init,
        bundle.solution.as_ref(),
        &TracePlan::default(),
    )
    .unwrap();
    let k = result.final_state.k;
    let err = result.trace.last().unwrap().err_x_rel.unwrap();
    let pass = result.stop_reason == StopReason::TolMet && err <= 1e-3 && k <= 100_000;
    println!(
        "criterion 02 merely-convex n=100: {} (stop={}, err_x={err:.3e}, k={k})",
        if pass { "PASS" } else { "FAIL" },
        result.stop_reason.name()
    );
    assert_eq!(result.stop_reason, StopReason::TolMet);
    assert!(err <= 1e-3, "relative x error {err} exceeds 1e-3");
    assert!(k <= 100_000, "run took {k} iterations");
}

#[test]
fn criterion_03_sin_nonconvex_800_iterations() {
    let bundle = make_sin_nonconvex_uniform(1, 2.0, 2.0).unwrap();
    let result = run_with_plan(
        &bundle.spec,
        &bundle.default_config, // 800 iterations, direction-norm rule
        &bundle.init,
        bundle.solution.as_ref(),
        &TracePlan::default(),
    )
    .unwrap();
    let x = result.final_state.x[0];
    let x_star = 3.0 * std::f64::consts::PI / 4.0;
    let f = bundle
        .spec
        .eval_upper(&result.final_state.x, &result.final_state.y);
    let f_star = (3.0 * std::f64::consts::PI / 2.0 - 4.0).powi(2) / 2.0;
    let ex = (x - x_star).abs();
    let ef = (f - f_star).abs();
    let pass = ex <= 1e-2 && ef <= 1e-3 && result.final_state.k <= 800;
    println!(
        "criterion 03 sin-nonconvex n=1 (800 iters): {} (|x-x*|={ex:.3e}, |F-F*|={ef:.3e}, k={})",
        if pass { "PASS" } else { "FAIL" },
        result.final_state.k
    );
    // With the published constants the penalty reaches only ~0.53 by k=800,
    // which parks the iterate ~0.24 away from x*; see the extended-budget
    // test in solver_behavior.rs for the attainable accuracy of the same
    // configuration.
    assert!(
        ex <= 1e-2,
        "|x - x*| = {ex} exceeds 1e-2 after {} iterations",
        result.final_state.k
    );
    assert!(ef <= 1e-3, "|F - F*| = {ef} exceeds 1e-3");
}

#[test]
fn criterion_04_lasso_toy_componentwise_accuracy() {
    let n = 100;
    let bundle = make_lasso_toy(n).unwrap();
    let plan = TracePlan {
        oracle_every: 0, // 600k iterations; skip oracle diagnostics
        ..Default::default()
    };
    let result = run_with_plan(
        &bundle.spec,
        &bundle.default_config,
        &bundle.init,
        bundle.solution.as_ref(),
        &plan,
    )
    .unwrap();
    let s = &result.final_state;
    let inv = 1.0 / n as f64;
    let max_y_second = (n / 2..n)
        .map(|i| (s.y[i] + inv).abs())
        .fold(0.0f64, f64::max);
    let max_y_first = (0..n / 2).map(|i| s.y[i].abs()).fold(0.0f64, f64::max);
    let min_x_first = (0..n / 2).map(|i| s.x[i]).fold(f64::INFINITY, f64::min);
    let max_x_first = (0..n / 2).map(|i| s.x[i]).fold(f64::NEG_INFINITY, f64::max);
    let pass = max_y_second <= 1e-3 && max_y_first <= 1e-3 && min_x_first >= inv - 1e-3
        && max_x_first <= 1.0;
    println!(
        "criterion 04 lasso n=100: {} (max|y_i+1/n|={max_y_second:.3e}, max|y_i|={max_y_first:.3e}, x range [{min_x_first:.4}, {max_x_first:.4}])",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(max_y_second <= 1e-3, "second-half y error {max_y_second}");
    assert!(max_y_first <= 1e-3, "first-half y error {max_y_first}");
    assert!(
        min_x_first >= inv - 1e-3 && max_x_first <= 1.0,
        "first-half x outside [1/n - 1e-3, 1]: [{min_x_first}, {max_x_first}]"
    );
}

#[test]
fn criterion_05_prox_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let resolution = 200_000;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let theta: f64 = rng.random_range(-3.0..3.0);
        let tau: f64 = rng.random_range(1e-6..2.0);
        let halfwidth = theta.abs() + tau + 1.0;
        let spacing = oracle_grid_spacing(halfwidth, resolution);
        let grid = prox_bruteforce_oracle(|u| u.abs(), tau, theta, halfwidth, resolution).unwrap();
        let closed = soft_threshold(&Array1::from(vec![theta]), tau).unwrap()[0];
        let err = (grid - closed).abs();
        worst = worst.max(err / spacing);
        assert!(
            err <= 2.0 * spacing,
            "soft threshold vs grid oracle: |{closed} - {grid}| > 2 x {spacing}"
        );
    }
    for _ in 0..100 {
        // Group shrinkage acts radially: reduce to the scalar prox of the
        // group norm and compare the full vectors.
        let theta = Array1::from(
            (0..4)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect::<Vec<f64>>(),
        );
        let w: f64 = rng.random_range(1e-6..2.0);
        let norm = l2(&theta);
        let halfwidth = norm + w + 1.0;
        let spacing = oracle_grid_spacing(halfwidth, resolution);
        let radial = prox_bruteforce_oracle(|u| u.abs(), w, norm, halfwidth, resolution).unwrap();
        let expected = &theta * (radial.max(0.0) / norm.max(1e-300));
        let actual =
            group_soft_threshold(&theta, &[vec![0, 1, 2, 3]], &[w]).unwrap();
        let err = l2(&(&actual - &expected));
        worst = worst.max(err / spacing);
        assert!(
            err <= 2.0 * spacing,
            "group threshold vs radial grid oracle: error {err} > 2 x {spacing}"
        );
    }
    println!("criterion 05 prox oracle equivalence: PASS (worst error {worst:.3} grid spacings)");
}

#[test]
fn criterion_06_moreau_gradient_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst = 0.0f64;
    for bundle in [make_merely_convex(4).unwrap(), make_lasso_toy(6).unwrap()] {
        let spec = &bundle.spec;
        let gamma = bundle.default_config.gamma;
        let eta = bundle.default_config.eta0;
        let oracle = InnerOracle::new(eta, gamma, 1e-12, 500_000);
        let h = 1e-6;
        for _ in 0..20 {
            let x = spec.project_x(&Array1::from(
                (0..spec.n())
                    .map(|_| rng.random_range(0.1..0.9))
                    .collect::<Vec<f64>>(),
            ));
            let y = Array1::from(
                (0..spec.m())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>(),
            );
            let eval = oracle.solve(spec, &x, &y, &y).unwrap();
            assert!(eval.converged, "{}: inner oracle did not converge", bundle.name);
            let v = |x: &Array1<f64>, y: &Array1<f64>| oracle.solve(spec, x, y, y).unwrap().value;
            for i in 0..spec.n() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (v(&xp, &y) - v(&xm, &y)) / (2.0 * h);
                let rel = (eval.grad_x[i] - fd).abs() / fd.abs().max(1.0);
                worst = worst.max(rel);
            }
            for i in 0..spec.m() {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[i] += h;
                ym[i] -= h;
                let fd = (v(&x, &yp) - v(&x, &ym)) / (2.0 * h);
                let rel = (eval.grad_y[i] - fd).abs() / fd.abs().max(1.0);
                worst = worst.max(rel);
            }
        }
    }
    let pass = worst <= 1e-5;
    println!(
        "criterion 06 envelope gradient vs finite differences: {} (max rel error {worst:.3e})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(worst <= 1e-5, "max relative error {worst} exceeds 1e-5");
}

#[test]
fn criterion_07_inner_step_contraction() {
    // Quadratic lower level (rho_f2 = 0) at admissible eta and gamma; the
    // envelope minimizer has the closed form (gamma x + y) / (gamma + 1),
    // independent of the iteration path being tested.
    let bundle = make_strong_convex_toy(10).unwrap();
    let gamma = 0.5;
    let eta = 0.1;
    let sigma = contraction_factor(eta, gamma, 0.0, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut max_ratio = 0.0f64;
    for _ in 0..100 {
        let sample = |rng: &mut ChaCha8Rng| {
            Array1::from(
                (0..10)
                    .map(|_| rng.random_range(-3.0..3.0))
                    .collect::<Vec<f64>>(),
            )
        };
        let x = sample(&mut rng);
        let y = sample(&mut rng);
        let theta = sample(&mut rng);
        let star = (&x * gamma + &y) / (gamma + 1.0);
        let next = theta_step(&bundle.spec, &x, &y, &theta, eta, gamma).unwrap();
        let before = l2(&(&theta - &star));
        let after = l2(&(&next - &star));
        if before > 1e-12 {
            let ratio = after / before;
            max_ratio = max_ratio.max(ratio);
            assert!(
                ratio <= sigma + 1e-9,
                "measured contraction {ratio} exceeds bound {sigma}"
            );
        }
    }
    println!(
        "criterion 07 contraction: PASS (max ratio {max_ratio:.6} <= bound {sigma:.6})"
    );
}

#[test]
fn criterion_08_merit_descent() {
    // Admissible regime: gamma = 0.2 < 1/(2 L_f) = 0.5, eta = 0.1 below the
    // contraction bound, conservative fixed steps; merit weight
    // C_V = (L_f + L_g)^2 + 1/gamma^2 = 26; oracle at 1e-12 every iteration.
    let bundle = make_strong_convex_toy(50).unwrap();
    let mut cfg = bundle.default_config.clone();
    cfg.gamma = 0.2;
    cfg.alpha0 = 1e-3;
    cfg.beta0 = 1e-3;
    cfg.eta0 = 0.1;
    cfg.p = 0.0;
    cfg.step_mode = StepMode::Fixed;
    cfg.max_iters = 5_000;
    cfg.stop_rule = StopRule::MaxItersOnly;
    cfg.inner_oracle_tol = 1e-12;
    let plan = TracePlan {
        oracle_every: 1,
        merit: Some(MeritPlan {
            f_lower: 0.0,
            c_v: 26.0,
        }),
        ..Default::default()
    };
    let result = run_with_plan(
        &bundle.spec,
        &cfg,
        &bundle.init,
        bundle.solution.as_ref(),
        &plan,
    )
    .unwrap();
    let mut worst_increase = f64::NEG_INFINITY;
    let mut pairs = 0usize;
    for w in result.trace.windows(2) {
        let (Some(a), Some(b)) = (w[0].merit, w[1].merit) else {
            panic!("merit missing at k = {}", w[1].k);
        };
        worst_increase = worst_increase.max(b - a);
        pairs += 1;
    }
    let pass = pairs == 5_000 && worst_increase <= 1e-10;
    println!(
        "criterion 08 merit descent: {} ({pairs} steps, worst increase {worst_increase:.3e})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert_eq!(pairs, 5_000);
    assert!(
        worst_increase <= 1e-10,
        "merit increased by {worst_increase} at some step"
    );
}

#[test]
fn criterion_09_rate_fit_on_residual() {
    // Constant penalty (p = 0); steps chosen so the residual decays visibly
    // across the fit window while staying strictly positive.
    let bundle = make_strong_convex_toy(50).unwrap();
    let mut cfg = bundle.default_config.clone();
    cfg.gamma = 0.2;
    cfg.alpha0 = 1e-2;
    cfg.beta0 = 1e-2;
    cfg.eta0 = 0.1;
    cfg.p = 0.0;
    cfg.step_mode = StepMode::Fixed;
    cfg.max_iters = 5_000;
    cfg.stop_rule = StopRule::MaxItersOnly;
    cfg.inner_oracle_tol = 1e-12;
    let result = run_with_plan(
        &bundle.spec,
        &cfg,
        &bundle.init,
        bundle.solution.as_ref(),
        &TracePlan::default(),
    )
    .unwrap();
    let slope = rate_fit(&result.trace, RateField::ResidualSurrogate, 100..=5_000).unwrap();
    let pass = slope <= -0.3;
    println!(
        "criterion 09 residual rate fit (p=0): {} (fitted exponent {slope:.3})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(slope <= -0.3, "fitted exponent {slope} is above -0.3");
}

#[test]
fn criterion_10_hypergradient_at_final_iterate() {
    let (bundle, result) = toy_run();
    let n = bundle.spec.n();
    // Lower level f = ||y||^2/2 - x . y: constant Hessian blocks
    // Q_yy = I, Q_xy = -I, exact solver y*(x) = x.
    let q_yy = Array2::eye(n);
    let q_xy = Array2::from_diag(&Array1::from_elem(n, -1.0));
    let grad = meha::diagnostics::hypergradient_quadratic(
        &q_yy,
        &q_xy,
        &bundle.spec,
        &result.final_state.x,
        |x| x.clone(),
    )
    .unwrap();
    let norm = l2(&grad);
    let pass = norm <= 1e-3;
    println!(
        "criterion 10 hypergradient at final iterate: {} (norm {norm:.3e})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(norm <= 1e-3, "hypergradient norm {norm} exceeds 1e-3");
}

#[test]
fn criterion_11_group_lasso_end_to_end() {
    let data = generate_group_lasso_data(100, 600, 0).unwrap();
    let baseline_fit = min_norm_least_squares(&data.train, 50_000);
    let baseline_err = squared_error_sum(&data.test, &baseline_fit);
    let bundle = make_group_lasso(data, 30).unwrap();
    let result = run_with_plan(
        &bundle.spec,
        &bundle.default_config, // relative-change rule, max 5000
        &bundle.init,
        None,
        &TracePlan::default(),
    )
    .unwrap();
    let test_err = squared_error_sum(
        &bundle.dataset.as_ref().unwrap().test,
        &result.final_state.y,
    );
    let pass = result.stop_reason == StopReason::TolMet
        && result.final_state.k <= 5_000
        && test_err < baseline_err;
    println!(
        "criterion 11 group lasso m=600 J=30: {} (stop={} at k={}, test_err={test_err:.2} vs unregularized {baseline_err:.2})",
        if pass { "PASS" } else { "FAIL" },
        result.stop_reason.name(),
        result.final_state.k
    );
    assert_eq!(result.stop_reason, StopReason::TolMet, "stop rule did not fire");
    assert!(result.final_state.k <= 5_000);
    assert!(
        test_err < baseline_err,
        "test error {test_err} not below unregularized {baseline_err}"
    );
}
