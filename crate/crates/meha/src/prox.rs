//! Proximal operators, projections, and a brute-force prox oracle.
//!
//! The closed forms here cover the weighted l1 and group-l2 penalties used
//! by the nonsmooth benchmarks; everything else goes through user-supplied
//! prox callbacks checked against [`prox_bruteforce_oracle`].

use ndarray::Array1;

use crate::error::{MehaError, Result};

/// Componentwise soft thresholding: `sign(t) * max(|t| - tau, 0)`.
///
/// This is the proximal operator of `tau * ||.||_1`.
pub fn soft_threshold(theta: &Array1<f64>, tau: f64) -> Result<Array1<f64>> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(MehaError::InvalidArgument(format!(
            "soft_threshold requires tau >= 0, got {tau}"
        )));
    }
    Ok(theta.mapv(|t| (t.abs() - tau).max(0.0) * t.signum()))
}

/// Blockwise shrinkage: group `j` is zeroed when its norm is at most
/// `weights[j]`, otherwise scaled by `(norm - w_j) / norm`.
///
/// `groups` must partition `0..theta.len()`.
pub fn group_soft_threshold(
    theta: &Array1<f64>,
    groups: &[Vec<usize>],
    weights: &[f64],
) -> Result<Array1<f64>> {
    let m = theta.len();
    if groups.len() != weights.len() {
        return Err(MehaError::InvalidArgument(format!(
            "group_soft_threshold: {} groups but {} weights",
            groups.len(),
            weights.len()
        )));
    }
    for (j, w) in weights.iter().enumerate() {
        if !w.is_finite() || *w < 0.0 {
            return Err(MehaError::InvalidArgument(format!(
                "group_soft_threshold: weight {j} must be nonnegative, got {w}"
            )));
        }
    }
    let mut seen = vec![false; m];
    let mut covered = 0usize;
    for group in groups {
        for &i in group {
            if i >= m {
                return Err(MehaError::InvalidArgument(format!(
                    "group_soft_threshold: index {i} out of range for length {m}"
                )));
            }
            if seen[i] {
                return Err(MehaError::InvalidArgument(format!(
                    "group_soft_threshold: index {i} appears in more than one group"
                )));
            }
            seen[i] = true;
            covered += 1;
        }
    }
    if covered != m {
        return Err(MehaError::InvalidArgument(format!(
            "group_soft_threshold: groups cover {covered} of {m} indices"
        )));
    }

    let mut out = Array1::zeros(m);
    for (group, &w) in groups.iter().zip(weights) {
        let norm: f64 = group.iter().map(|&i| theta[i] * theta[i]).sum::<f64>().sqrt();
        if norm > w {
            // Dividing by the norm first keeps singleton groups bit-exact
            // with scalar soft thresholding (theta / |theta| is exactly +-1).
            let shrunk = norm - w;
            for &i in group {
                out[i] = theta[i] / norm * shrunk;
            }
        }
    }
    Ok(out)
}

/// Clamp `z` into the box `[lo, hi]` with per-component bounds.
/// Infinite bounds encode unconstrained components.
pub fn project_box(z: &Array1<f64>, lo: &Array1<f64>, hi: &Array1<f64>) -> Result<Array1<f64>> {
    if lo.len() != z.len() || hi.len() != z.len() {
        return Err(MehaError::InvalidArgument(format!(
            "project_box: bound lengths {}/{} do not match vector length {}",
            lo.len(),
            hi.len(),
            z.len()
        )));
    }
    for i in 0..z.len() {
        if lo[i] > hi[i] {
            return Err(MehaError::InvalidArgument(format!(
                "project_box: lo[{i}] = {} exceeds hi[{i}] = {}",
                lo[i], hi[i]
            )));
        }
    }
    let mut out = z.clone();
    for i in 0..z.len() {
        out[i] = out[i].clamp(lo[i], hi[i]);
    }
    Ok(out)
}

/// Clamp `z` into the box `[lo, hi]` with uniform scalar bounds.
pub fn project_box_uniform(z: &Array1<f64>, lo: f64, hi: f64) -> Result<Array1<f64>> {
    if lo > hi {
        return Err(MehaError::InvalidArgument(format!(
            "project_box_uniform: lo = {lo} exceeds hi = {hi}"
        )));
    }
    Ok(z.mapv(|v| v.clamp(lo, hi)))
}

/// Grid-search argmin of `s * phi(u) + (u - theta)^2 / 2` over
/// `[theta - halfwidth, theta + halfwidth]`.
///
/// Used as an independent reference for separable prox operators; the
/// accuracy is bounded by the grid spacing `2 * halfwidth / resolution`.
pub fn prox_bruteforce_oracle(
    phi_1d: impl Fn(f64) -> f64,
    s: f64,
    theta_i: f64,
    halfwidth: f64,
    resolution: usize,
) -> Result<f64> {
    if !s.is_finite() || s <= 0.0 {
        return Err(MehaError::InvalidArgument(format!(
            "prox_bruteforce_oracle requires s > 0, got {s}"
        )));
    }
    if !halfwidth.is_finite() || halfwidth <= 0.0 {
        return Err(MehaError::InvalidArgument(format!(
            "prox_bruteforce_oracle requires halfwidth > 0, got {halfwidth}"
        )));
    }
    if resolution < 1000 {
        return Err(MehaError::InvalidArgument(format!(
            "prox_bruteforce_oracle requires resolution >= 1000, got {resolution}"
        )));
    }
    let step = 2.0 * halfwidth / resolution as f64;
    let mut best_u = theta_i - halfwidth;
    let mut best_val = f64::INFINITY;
    for j in 0..=resolution {
        let u = theta_i - halfwidth + step * j as f64;
        let val = s * phi_1d(u) + 0.5 * (u - theta_i) * (u - theta_i);
        if val < best_val {
            best_val = val;
            best_u = u;
        }
    }
    Ok(best_u)
}

/// Grid spacing of [`prox_bruteforce_oracle`] for a given setup.
pub fn oracle_grid_spacing(halfwidth: f64, resolution: usize) -> f64 {
    2.0 * halfwidth / resolution as f64
}
