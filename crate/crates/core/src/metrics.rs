//! Transport distances, convergence-order fits, and curvature sweeps.
//!
//! Two independent transport routes are kept deliberately separate: the 1-D
//! quantile pairing (sort both samples, pair by rank) and the exact
//! assignment solve over the squared-distance cost matrix. In one dimension
//! they must agree, which is one of the cross-checks the test suites lean
//! on; in higher dimensions only the assignment route applies and it stays
//! exact rather than entropic, so it carries a hard size cap.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::GaussianMixture;
use crate::param::Parameterization;
use crate::rng::stream;
use crate::schedule::TimestepSchedule;
use crate::solver::{mixed_sample, SolverPolicy};

/// Largest sample count the exact assignment solver accepts. Beyond this,
/// subsample before calling; the cubic solve would dominate everything.
pub const ASSIGNMENT_CAP: usize = 4096;

/// How a transport distance was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransportMethod {
    #[serde(rename = "quantile-1d")]
    Quantile1D,
    #[serde(rename = "assignment")]
    Assignment,
}

/// A transport-distance estimate and how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportReport {
    pub w2: f64,
    pub n: usize,
    pub method: TransportMethod,
    /// Bootstrap half-width when one was computed, zero otherwise.
    pub ci_halfwidth: f64,
}

fn check_same_len(na: usize, nb: usize) -> Result<()> {
    if na == 0 {
        return Err(Error::Domain("transport distance needs at least one point".into()));
    }
    if na != nb {
        return Err(Error::DimensionMismatch { expected: na, got: nb });
    }
    Ok(())
}

fn w2_1d_value(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transport input".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mean_sq = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Exact 1-D transport distance by quantile pairing.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<TransportReport> {
    check_same_len(a.len(), b.len())?;
    Ok(TransportReport {
        w2: w2_1d_value(a, b)?,
        n: a.len(),
        method: TransportMethod::Quantile1D,
        ci_halfwidth: 0.0,
    })
}

/// `w2_1d` plus a bootstrap confidence half-width from `reps` resamples of
/// both inputs.
pub fn w2_1d_bootstrap(a: &[f64], b: &[f64], reps: usize, seed: u64) -> Result<TransportReport> {
    let mut report = w2_1d(a, b)?;
    if reps < 2 {
        return Err(Error::Domain("bootstrap needs at least two replicates".into()));
    }
    let n = a.len();
    let mut estimates = Vec::with_capacity(reps);
    for rep in 0..reps {
        let mut rng = stream(seed, "w2-bootstrap", rep as u64);
        let ra: Vec<f64> = (0..n).map(|_| a[rng.gen_range(0..n)]).collect();
        let rb: Vec<f64> = (0..n).map(|_| b[rng.gen_range(0..n)]).collect();
        estimates.push(w2_1d_value(&ra, &rb)?);
    }
    let mean = estimates.iter().sum::<f64>() / reps as f64;
    let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (reps - 1) as f64;
    report.ci_halfwidth = 1.96 * var.sqrt();
    Ok(report)
}

/// Exact transport distance in any dimension via an optimal assignment.
///
/// Solves the square assignment problem on the pairwise squared-distance
/// matrix with the shortest-augmenting-path method (cubic in `n`), so the
/// input size is capped at `ASSIGNMENT_CAP`.
pub fn w2_assignment(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<TransportReport> {
    check_same_len(a.len(), b.len())?;
    let n = a.len();
    if n > ASSIGNMENT_CAP {
        return Err(Error::SizeCapExceeded { n, cap: ASSIGNMENT_CAP });
    }
    let dim = a[0].len();
    for x in a.iter().chain(b) {
        if x.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
        }
    }
    let mut cost = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let c = (&a[i] - &b[j]).norm_squared();
            if !c.is_finite() {
                return Err(Error::NonFinite("transport cost".into()));
            }
            cost[i * n + j] = c;
        }
    }

    // Shortest augmenting path with row/column potentials; indices are
    // 1-based with 0 as the virtual unmatched column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let total: f64 = (1..=n).map(|j| cost[(matched[j] - 1) * n + (j - 1)]).sum();
    Ok(TransportReport {
        w2: (total / n as f64).sqrt(),
        n,
        method: TransportMethod::Assignment,
        ci_halfwidth: 0.0,
    })
}

/// Least-squares slope of `ln(err)` against `ln(dt)` over `(dt, err)`
/// pairs. Needs at least four points spanning more than one step size.
pub fn order_of_convergence(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 4 {
        return Err(Error::Domain(format!(
            "order fit needs at least 4 points, got {}",
            pairs.len()
        )));
    }
    for &(dt, err) in pairs {
        if !(dt > 0.0 && dt.is_finite() && err > 0.0 && err.is_finite()) {
            return Err(Error::Domain("order fit needs positive finite (dt, err) pairs".into()));
        }
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::Domain("order fit needs more than one distinct step size".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_same_len(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::Domain("correlation needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("correlation input is constant".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Mean and deviation of the cached relative-curvature measure at each
/// noise level of `sigma_grid`, estimated over explicit Euler trajectories
/// started from the exact marginal at the top of the grid.
///
/// The first grid node has no measure (the cache is empty there), so the
/// output has one row per remaining node: `(sigma, mean, std)`.
pub fn curvature_sweep(
    gm: &GaussianMixture,
    p: &Parameterization,
    sigma_grid: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    if sigma_grid.len() < 2 {
        return Err(Error::Domain("sweep needs at least two noise levels".into()));
    }
    if n_samples == 0 {
        return Err(Error::Domain("sweep needs at least one sample".into()));
    }
    if sigma_grid.windows(2).any(|w| w[0] <= w[1]) || sigma_grid.iter().any(|&s| s <= 0.0) {
        return Err(Error::Domain("sweep grid must be positive and strictly decreasing".into()));
    }
    let mut times: Vec<f64> = Vec::with_capacity(sigma_grid.len() + 1);
    for &s in sigma_grid {
        times.push(p.sigma_inv(s)?);
    }
    let mut sigmas = sigma_grid.to_vec();
    times.push(0.0);
    sigmas.push(0.0);
    let schedule = TimestepSchedule::new(times, sigmas, vec![], 0)?;

    let x0s = gm.sample_marginal(p, schedule.times[0], n_samples, seed)?;
    let policy = SolverPolicy::pure_euler();
    let mut rows = Vec::with_capacity(sigma_grid.len() - 1);
    let mut kappas = vec![Vec::with_capacity(n_samples); sigma_grid.len() - 1];
    for s in 0..n_samples {
        let x0 = x0s.row(s).transpose();
        let run = mixed_sample(gm, p, &schedule, &policy, Some(&x0), seed)?;
        for (i, bucket) in kappas.iter_mut().enumerate() {
            let k = run.steps[i + 1].kappa_hat.expect("interior step");
            bucket.push(k);
        }
    }
    for (i, bucket) in kappas.iter().enumerate() {
        let n = bucket.len() as f64;
        let mean = bucket.iter().sum::<f64>() / n;
        let var = bucket.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / n;
        rows.push((sigma_grid[i + 1], mean, var.sqrt()));
    }
    Ok(rows)
}

/// CSV with header `sigma,kappa_mean,kappa_std`.
pub fn curvature_csv(rows: &[(f64, f64, f64)]) -> String {
    let mut out = String::from("sigma,kappa_mean,kappa_std\n");
    for (sigma, mean, std) in rows {
        out.push_str(&format!("{sigma},{mean},{std}\n"));
    }
    out
}

/// CSV with header `step,t,sigma,eta_t`, one row per profiled step.
pub fn eta_profile_csv(schedule: &TimestepSchedule, etas: &[f64]) -> String {
    let mut out = String::from("step,t,sigma,eta_t\n");
    for (i, eta) in etas.iter().enumerate() {
        out.push_str(&format!(
            "{i},{t},{sigma},{eta}\n",
            t = schedule.times[i],
            sigma = schedule.sigmas[i],
        ));
    }
    out
}

/// CSV with header `dt,err`.
pub fn order_csv(pairs: &[(f64, f64)]) -> String {
    let mut out = String::from("dt,err\n");
    for (dt, err) in pairs {
        out.push_str(&format!("{dt},{err}\n"));
    }
    out
}
