//! Adaptive timestep schedules driven by a per-step transport budget.
//!
//! A schedule assigns each step a budget `eta(sigma)` and sizes the step so
//! that the local-error proxy `dt^2 * S / 2` stays within it, where `S` is a
//! curvature magnitude probed by finite differences of the velocity field
//! along one trajectory. Steps are committed at `dt = sqrt(2 * eta / S)`
//! using the largest `S` seen during the line search, so the committed step
//! satisfies `dt^2 * S <= 2 * eta` by construction.
//!
//! `resample_n_steps` redistributes a built schedule's total budget across a
//! fixed number of steps by equalizing increments of the cumulative weighted
//! budget, which is how a step-count constraint is met without rerunning the
//! search. `eta_profile`, `geodesic_profile`, and `total_bound_check` are the
//! measurement side: they replay schedules on sampled trajectories and report
//! realized local errors, weighted budget increments, and the endpoint
//! transport bound.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{velocity, velocity_jacobian, VelocityEval};
use crate::error::{Error, Result};
use crate::metrics::{w2_1d, w2_assignment};
use crate::oracle::GaussianMixture;
use crate::param::{Parameterization, SIGMA_FLOOR};
use crate::solver::{mixed_sample_batch, prior_sample, SolverPolicy};

/// Version stamp carried by every serialized schedule.
pub const SCHEMA_VERSION: u32 = 1;

/// Substeps per committed step when probing local error densely.
const BOUND_SUBDIV: usize = 8;
/// Reference-integrator substeps for endpoint transport checks.
const BOUND_REF_SUBSTEPS: usize = 96;

/// Per-step record kept alongside the committed times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMeta {
    /// Budget that sized this step.
    pub eta_used: f64,
    /// Largest curvature probe seen while sizing it.
    pub s_hat: f64,
    /// Line-search trials spent on it.
    pub linesearch_iters: u32,
}

/// A strictly decreasing time grid ending exactly at zero, with optional
/// per-step sizing records and the evaluation count spent building it.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepSchedule {
    pub times: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Empty, or one record per step.
    pub per_step: Vec<StepMeta>,
    /// Denoiser evaluations spent constructing the schedule.
    pub total_nfe: u64,
}

impl TimestepSchedule {
    pub fn new(
        times: Vec<f64>,
        sigmas: Vec<f64>,
        per_step: Vec<StepMeta>,
        total_nfe: u64,
    ) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidSchedule("need at least two timesteps".into()));
        }
        if times.len() != sigmas.len() {
            return Err(Error::InvalidSchedule(format!(
                "{} times vs {} sigmas",
                times.len(),
                sigmas.len()
            )));
        }
        if !per_step.is_empty() && per_step.len() != times.len() - 1 {
            return Err(Error::InvalidSchedule(format!(
                "{} per-step records for {} steps",
                per_step.len(),
                times.len() - 1
            )));
        }
        for values in [&times, &sigmas] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("schedule grid".into()));
            }
            if values.windows(2).any(|w| w[0] <= w[1]) {
                return Err(Error::InvalidSchedule("grid must strictly decrease".into()));
            }
        }
        if *times.last().unwrap() != 0.0 || *sigmas.last().unwrap() != 0.0 {
            return Err(Error::InvalidSchedule("grid must end exactly at zero".into()));
        }
        Ok(TimestepSchedule { times, sigmas, per_step, total_nfe })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn step_dt(&self, i: usize) -> f64 {
        self.times[i] - self.times[i + 1]
    }
}

/// Noise-dependent budget `eta(sigma) = (eta_max - eta_min) * (sigma /
/// sigma_max)^p + eta_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaSchedule {
    #[serde(rename = "min")]
    pub eta_min: f64,
    #[serde(rename = "max")]
    pub eta_max: f64,
    pub p: f64,
}

impl EtaSchedule {
    pub fn new(eta_min: f64, eta_max: f64, p: f64) -> Result<Self> {
        let e = EtaSchedule { eta_min, eta_max, p };
        e.validate()?;
        Ok(e)
    }

    /// Same budget at every noise level.
    pub fn constant(eta: f64) -> Result<Self> {
        EtaSchedule::new(eta, eta, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min.is_finite() && self.eta_min > 0.0) {
            return Err(Error::Domain("eta min must be positive".into()));
        }
        if !(self.eta_max.is_finite() && self.eta_max >= self.eta_min) {
            return Err(Error::Domain("eta max must be at least eta min".into()));
        }
        if !(self.p.is_finite() && self.p >= 0.0) {
            return Err(Error::Domain("eta exponent must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn eta(&self, sigma: f64, sigma_max: f64) -> f64 {
        // A degenerate range must stay bitwise constant; the convex
        // combination below can wobble by an ulp in the interior.
        if self.eta_min == self.eta_max {
            return self.eta_min;
        }
        // Convex form of (max - min) * u + min: attains both endpoints
        // exactly and never rounds outside [min, max].
        let u = (sigma / sigma_max).powf(self.p).min(1.0);
        self.eta_max * u + self.eta_min * (1.0 - u)
    }
}

/// Noise-dependent resampling weight `w(sigma) = g(sigma)^2` with
/// `g(sigma) = (sigma / sigma_max)^(-q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleWeights {
    pub q: f64,
}

impl ResampleWeights {
    pub fn new(q: f64) -> Result<Self> {
        if !(q.is_finite() && q >= 0.0) {
            return Err(Error::Domain("resample exponent must be nonnegative".into()));
        }
        Ok(ResampleWeights { q })
    }

    pub fn g(&self, sigma: f64, sigma_max: f64) -> f64 {
        (sigma / sigma_max).powf(-self.q)
    }

    pub fn w(&self, sigma: f64, sigma_max: f64) -> f64 {
        let g = self.g(sigma, sigma_max);
        g * g
    }
}

fn s_hat_vec(v_t: &DVector<f64>, v_trial: &DVector<f64>, dt_trial: f64) -> f64 {
    (v_trial - v_t).norm() / dt_trial
}

/// Curvature probe from a velocity pair a trial step apart: `|v_trial -
/// v_t| / dt_trial`. Requires `dt_trial > 0`.
pub fn s_hat(v_t: &VelocityEval, v_trial: &VelocityEval, dt_trial: f64) -> f64 {
    debug_assert!(dt_trial > 0.0);
    s_hat_vec(&v_t.v, &v_trial.v, dt_trial)
}

/// Largest step satisfying `dt^2 * s_hat <= 2 * eta`, capped at `dt_max`.
/// A zero probe means the field looks flat, so the cap is returned.
pub fn max_step(eta: f64, s_hat: f64, dt_max: f64) -> f64 {
    if s_hat <= 0.0 {
        dt_max
    } else {
        (2.0 * eta / s_hat).sqrt().min(dt_max)
    }
}

/// Knobs for `build_schedule`. The defaults implement the documented
/// behavior; they are exposed mainly so tests can tighten budgets.
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    /// Warm-start reference grid size.
    pub grid_points: usize,
    /// Warm-start reference grid exponent.
    pub grid_rho: f64,
    /// Trial-step growth factor while the bound stays slack.
    pub expand: f64,
    /// Trial-step shrink factor after a violation.
    pub contract: f64,
    /// Expansion triggers only while the bound is slack by more than this.
    pub slack_band: f64,
    /// Line-search resolution as a fraction of the start time.
    pub delta_frac: f64,
    /// Step cap as a fraction of the start time.
    pub dt_max_frac: f64,
    /// Hard cap on committed steps before giving up.
    pub max_steps: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            grid_points: 64,
            grid_rho: 7.0,
            expand: 2.0,
            contract: 0.5,
            slack_band: 4.0,
            delta_frac: 1e-4,
            dt_max_frac: 0.25,
            max_steps: 20_000,
        }
    }
}

impl BuildOptions {
    fn validate(&self) -> Result<()> {
        if self.grid_points < 2 {
            return Err(Error::Domain("warm-start grid needs at least 2 points".into()));
        }
        if !(self.expand > 1.0) || !(self.contract > 0.0 && self.contract < 1.0) {
            return Err(Error::Domain("expand must exceed 1 and contract must lie in (0, 1)".into()));
        }
        if !(self.slack_band >= 1.0) {
            return Err(Error::Domain("slack band must be at least 1".into()));
        }
        if !(self.delta_frac > 0.0 && self.dt_max_frac > 0.0 && self.dt_max_frac <= 1.0) {
            return Err(Error::Domain("step fractions must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Domain("max steps must be positive".into()));
        }
        Ok(())
    }
}

/// Build an adaptive schedule along one trajectory started at `x0`.
///
/// Each step warms up from the gap to the reference grid, line-searches the
/// trial step with expand/contract backoff against `dt^2 * S <= 2 * eta`,
/// then commits `dt = sqrt(2 * eta / S_max)` under the step cap, held back
/// to the largest probe-verified gap. The state advances by explicit Euler,
/// matching how the schedule will be consumed.
/// When committing lands exactly on a trial time, the trial's velocity is
/// reused for the next step instead of a fresh evaluation.
///
/// The returned grid ends with an exact zero node appended after the
/// `sigma_min` node; that terminal step carries `s_hat = 0` since no probe
/// is possible there.
pub fn build_schedule(
    gm: &GaussianMixture,
    p: &Parameterization,
    eta: &EtaSchedule,
    x0: &DVector<f64>,
    opts: &BuildOptions,
) -> Result<TimestepSchedule> {
    eta.validate()?;
    opts.validate()?;
    if x0.len() != gm.dim() {
        return Err(Error::DimensionMismatch { expected: gm.dim(), got: x0.len() });
    }

    let t0 = p.t_max();
    let t_floor = p.t_min();
    let sigma_max = p.sigma_max();
    let delta = opts.delta_frac * t0;
    let dt_cap = opts.dt_max_frac * t0;
    let grid = p.edm_reference_grid(opts.grid_points, opts.grid_rho)?;

    let mut times = vec![t0];
    let mut sigmas = vec![p.sigma(t0)?];
    let mut per_step: Vec<StepMeta> = Vec::new();
    let mut nfe = 0u64;

    let mut x = x0.clone();
    let mut t = t0;
    let mut v = velocity(gm, p, &x, t)?;
    nfe += 1;

    while t > t_floor {
        if per_step.len() >= opts.max_steps {
            return Err(Error::BudgetExceeded(format!(
                "schedule construction passed {} steps",
                opts.max_steps
            )));
        }
        let eta_i = eta.eta(*sigmas.last().unwrap(), sigma_max);
        let target = 2.0 * eta_i;

        let warm_gap = t - grid.times.iter().copied().find(|&g| g < t).unwrap_or(0.0);
        let dt_init = warm_gap.min(dt_cap).max(delta);
        let budget = (dt_init / delta).log2().ceil().max(0.0) as u32 + 2;

        let span = t - t_floor;
        let mut dt = dt_init;
        let mut iters = 0u32;
        let mut s_max = 0.0f64;
        let mut dt_ok: Option<f64> = None;
        let mut expanding = true;
        let mut trial_cache: Option<(f64, VelocityEval)> = None;

        while iters < budget {
            // A trial past the floor clamps to the floor node, so the whole
            // remaining span stays probeable.
            let (dt_eff, t_trial) = if dt < span { (dt, t - dt) } else { (span, t_floor) };
            if t_trial <= 0.0 || p.sigma(t_trial)? < SIGMA_FLOOR {
                iters += 1;
                expanding = false;
                dt *= opts.contract;
                if dt <= delta {
                    break;
                }
                continue;
            }
            let x_trial = &x + &v.v * (t_trial - t);
            let v_trial = velocity(gm, p, &x_trial, t_trial)?;
            nfe += 1;
            iters += 1;
            let s = s_hat(&v, &v_trial, dt_eff);
            if !s.is_finite() {
                return Err(Error::NonFinite("curvature probe".into()));
            }
            s_max = s_max.max(s);
            trial_cache = Some((t_trial, v_trial));
            let load = dt_eff * dt_eff * s;
            if load > target {
                expanding = false;
                if dt <= delta {
                    break;
                }
                dt = dt.min(span) * opts.contract;
            } else {
                dt_ok = Some(dt_ok.map_or(dt_eff, |ok: f64| ok.max(dt_eff)));
                if expanding && dt < span && load * opts.slack_band < target && dt < dt_cap {
                    dt = (dt * opts.expand).min(dt_cap);
                } else {
                    break;
                }
            }
        }

        // The closed form extrapolates whenever the final probe left slack;
        // extrapolated gaps reach into territory no probe has seen, where
        // the curvature is typically higher, so the commit stays within the
        // largest gap that was actually verified against the bound. A
        // commit that covers the remaining span lands on the floor node
        // exactly.
        let mut dt_commit = max_step(eta_i, s_max, dt_cap);
        if let Some(ok) = dt_ok {
            dt_commit = dt_commit.min(ok);
        }
        let t_next =
            if dt_commit >= span * (1.0 - 1e-12) { t_floor } else { t - dt_commit };
        per_step.push(StepMeta { eta_used: eta_i, s_hat: s_max, linesearch_iters: iters });
        x += &v.v * (t_next - t);
        if x.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("schedule construction state".into()));
        }
        t = t_next;
        times.push(t);
        sigmas.push(p.sigma(t)?);
        if t <= t_floor {
            break;
        }
        v = match trial_cache {
            Some((t_trial, v_trial)) if t_trial == t => v_trial,
            _ => {
                nfe += 1;
                velocity(gm, p, &x, t)?
            }
        };
    }

    per_step.push(StepMeta {
        eta_used: eta.eta(p.sigma_min(), sigma_max),
        s_hat: 0.0,
        linesearch_iters: 0,
    });
    times.push(0.0);
    sigmas.push(0.0);
    TimestepSchedule::new(times, sigmas, per_step, nfe)
}

/// Redistribute a built schedule's budget over exactly `n` steps.
///
/// The cumulative budget assigns base step `j` the increment `gamma_j =
/// sqrt(w(sigma_j) * eta_j)`; the `n + 1` output nodes sit at uniform
/// targets along that accumulation, interpolated linearly in time within a
/// base segment and snapped to a base node when a target lands on one.
/// Endpoints are preserved, so the output still starts at the base start
/// time and ends exactly at zero. Output records carry the implied uniform
/// budget `(total / n)^2 / w` and the covering base segment's probe.
///
/// Resampling only coarsens: the base must have at least `n + 1` nodes.
pub fn resample_n_steps(
    base: &TimestepSchedule,
    weights: &ResampleWeights,
    n: usize,
    p: &Parameterization,
) -> Result<TimestepSchedule> {
    ResampleWeights::new(weights.q)?;
    let m = base.n_steps();
    if base.per_step.len() != m {
        return Err(Error::InvalidSchedule("base schedule lacks per-step budgets".into()));
    }
    if n == 0 {
        return Err(Error::Domain("resampled step count must be positive".into()));
    }
    if base.times.len() < n + 1 {
        return Err(Error::InvalidSchedule(format!(
            "resampling only coarsens: base has {} nodes, target needs {}",
            base.times.len(),
            n + 1
        )));
    }
    // Asking for the base's own step count is a no-op, even when the base
    // does not already traverse the geodesic at constant speed.
    if n == m {
        return Ok(base.clone());
    }

    let sigma_max = p.sigma_max();
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0f64);
    let mut acc = 0.0f64;
    for j in 0..m {
        let gamma = (weights.w(base.sigmas[j], sigma_max) * base.per_step[j].eta_used).sqrt();
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidSchedule(format!("step {j} has a nonpositive budget")));
        }
        acc += gamma;
        cum.push(acc);
    }
    let total = acc;
    let snap = 1e-12 * total;

    let mut times = Vec::with_capacity(n + 1);
    let mut sigmas = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k == 0 {
            times.push(base.times[0]);
            sigmas.push(base.sigmas[0]);
            continue;
        }
        if k == n {
            times.push(0.0);
            sigmas.push(0.0);
            continue;
        }
        let target = total * (k as f64) / (n as f64);
        let j = match cum.binary_search_by(|c| c.partial_cmp(&target).unwrap()) {
            Ok(idx) => idx.min(m - 1),
            Err(idx) => idx - 1,
        };
        if target - cum[j] <= snap {
            times.push(base.times[j]);
            sigmas.push(base.sigmas[j]);
        } else if cum[j + 1] - target <= snap {
            times.push(base.times[j + 1]);
            sigmas.push(base.sigmas[j + 1]);
        } else {
            let f = (target - cum[j]) / (cum[j + 1] - cum[j]);
            let t = base.times[j] + f * (base.times[j + 1] - base.times[j]);
            times.push(t);
            sigmas.push(p.sigma(t)?);
        }
    }

    let per_node_budget = total / (n as f64);
    let mut per_step = Vec::with_capacity(n);
    for k in 0..n {
        let eta_used = per_node_budget * per_node_budget / weights.w(sigmas[k], sigma_max);
        let idx = base.times.partition_point(|&bt| bt > times[k]);
        let seg = if idx < base.times.len() && base.times[idx] == times[k] {
            idx.min(m - 1)
        } else {
            idx - 1
        };
        per_step.push(StepMeta {
            eta_used,
            s_hat: base.per_step[seg].s_hat,
            linesearch_iters: 0,
        });
    }
    TimestepSchedule::new(times, sigmas, per_step, base.total_nfe)
}

/// Realized per-step local-error proxy `dt^2 * S / 2`, averaged over
/// trajectories sampled from the start-time marginal and walked with
/// explicit Euler. The terminal step has no probe and is excluded, so the
/// result has one entry per positive-noise step.
pub fn eta_profile(
    gm: &GaussianMixture,
    p: &Parameterization,
    schedule: &TimestepSchedule,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let n_steps = schedule.n_steps();
    if n_steps < 2 {
        return Err(Error::InvalidSchedule("profile needs an interior step".into()));
    }
    let runs = mixed_sample_batch(gm, p, schedule, &SolverPolicy::pure_euler(), n_samples, seed)?;
    let mut out = vec![0.0f64; n_steps - 1];
    for run in &runs {
        for (i, slot) in out.iter_mut().enumerate() {
            let dt = schedule.step_dt(i);
            let s = s_hat_vec(&run.velocities[i], &run.velocities[i + 1], dt);
            *slot += 0.5 * dt * dt * s;
        }
    }
    let scale = 1.0 / n_samples as f64;
    for slot in &mut out {
        *slot *= scale;
    }
    Ok(out)
}

/// Measured per-step increments of the cumulative weighted budget.
///
/// Each positive-noise step is split into `substeps` equal spans, and the
/// trajectory advances by explicit Euler at span resolution, so the probes
/// ride a near-exact path of the flow regardless of how coarse the grid
/// under audit is. Every span contributes `sqrt(w(sigma) * dtau^2 * S / 2)`
/// with `S` probed from velocity differences across it, and the per-step
/// sums are averaged over trajectories drawn from the start-time prior. A
/// grid placed at uniform increments of the weighted budget traverses it at
/// constant speed, so near-equal entries here are the measurable form of
/// that property. The terminal step has no probe and is excluded, so the
/// result has one entry per positive-noise step.
pub fn geodesic_profile(
    gm: &GaussianMixture,
    p: &Parameterization,
    schedule: &TimestepSchedule,
    weights: &ResampleWeights,
    n_samples: usize,
    substeps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_samples == 0 || substeps == 0 {
        return Err(Error::Domain("need at least one sample and one substep".into()));
    }
    ResampleWeights::new(weights.q)?;
    let n_steps = schedule.n_steps();
    if n_steps < 2 {
        return Err(Error::InvalidSchedule("profile needs an interior step".into()));
    }
    let sigma_max = p.sigma_max();
    let starts = prior_sample(p, gm.dim(), schedule.times[0], n_samples, seed)?;
    let per_run: Vec<Vec<f64>> = starts
        .into_par_iter()
        .map(|start| -> Result<Vec<f64>> {
            let mut out = vec![0.0f64; n_steps - 1];
            let mut x = start;
            let mut tau_prev = schedule.times[0];
            let mut v_prev = velocity(gm, p, &x, tau_prev)?.v;
            for (i, slot) in out.iter_mut().enumerate() {
                let t_from = schedule.times[i];
                let dtau = schedule.step_dt(i) / substeps as f64;
                let mut inc = 0.0f64;
                for j in 1..=substeps {
                    let tau = if j == substeps {
                        schedule.times[i + 1]
                    } else {
                        t_from - j as f64 * dtau
                    };
                    x += &v_prev * (tau - tau_prev);
                    let v = velocity(gm, p, &x, tau)?.v;
                    let s = s_hat_vec(&v_prev, &v, dtau);
                    if !s.is_finite() {
                        return Err(Error::NonFinite("curvature probe".into()));
                    }
                    let w = weights.w(p.sigma(tau_prev)?, sigma_max);
                    inc += (0.5 * w * dtau * dtau * s).sqrt();
                    tau_prev = tau;
                    v_prev = v;
                }
                *slot = inc;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0f64; n_steps - 1];
    let scale = 1.0 / per_run.len() as f64;
    for run in &per_run {
        for (slot, inc) in out.iter_mut().zip(run.iter()) {
            *slot += inc * scale;
        }
    }
    Ok(out)
}

/// Outcome of the endpoint transport-bound audit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TotalBoundReport {
    /// Transport distance between reference and Euler endpoint clouds.
    pub endpoint_w2: f64,
    /// Largest velocity-Jacobian spectral norm over the sampled states.
    pub lipschitz: f64,
    /// Sum of per-step local-error suprema `dt^2 * M / 2`.
    pub local_error_sum: f64,
    /// `ln` of the observed endpoint distance.
    pub lhs_log: f64,
    /// `ln` of the bound: `lipschitz * t0 + ln(local_error_sum)`.
    pub rhs_log: f64,
    pub n_samples: usize,
    pub holds: bool,
}

/// Audit the endpoint transport bound on a schedule.
///
/// Trajectories start from a common set of draws from the start-time
/// marginal. The left side is the transport distance between the reference
/// flow's endpoints and the Euler walk's endpoints. The right side
/// amplifies the summed per-step local-error suprema by the exponential of
/// the largest observed velocity-Jacobian norm times the horizon, compared
/// in log space so the amplification cannot overflow.
pub fn total_bound_check(
    gm: &GaussianMixture,
    p: &Parameterization,
    schedule: &TimestepSchedule,
    n_samples: usize,
    seed: u64,
) -> Result<TotalBoundReport> {
    if n_samples == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let n_steps = schedule.n_steps();
    let t0 = schedule.times[0];
    let runs = mixed_sample_batch(gm, p, schedule, &SolverPolicy::pure_euler(), n_samples, seed)?;

    let refs: Vec<DVector<f64>> = runs
        .par_iter()
        .map(|r| crate::flow::reference_flow(gm, p, &r.x0, t0, 0.0, BOUND_REF_SUBSTEPS))
        .collect::<Result<_>>()?;

    let endpoint_w2 = if gm.dim() == 1 {
        let a: Vec<f64> = refs.iter().map(|x| x[0]).collect();
        let b: Vec<f64> = runs.iter().map(|r| r.x_final()[0]).collect();
        w2_1d(&a, &b)?.w2
    } else {
        let b: Vec<DVector<f64>> = runs.iter().map(|r| r.x_final().clone()).collect();
        w2_assignment(&refs, &b)?.w2
    };

    let mut lipschitz = 0.0f64;
    for run in &runs {
        for i in 0..n_steps {
            let jac = velocity_jacobian(gm, p, node_state(run, i), schedule.times[i])?;
            lipschitz = lipschitz.max(jac.singular_values().max());
        }
    }

    let suprema: Vec<f64> = (0..n_steps)
        .into_par_iter()
        .map(|i| {
            let t_from = schedule.times[i];
            let t_to = schedule.times[i + 1];
            let h = (t_from - t_to) / BOUND_SUBDIV as f64;
            let mut m_sup = 0.0f64;
            for run in &runs {
                let mut x = node_state(run, i).clone();
                let mut prev: Option<VelocityEval> = None;
                for j in 0..=BOUND_SUBDIV {
                    let tj = if j == BOUND_SUBDIV { t_to } else { t_from - h * j as f64 };
                    if tj <= 0.0 || p.sigma(tj)? < SIGMA_FLOOR {
                        break;
                    }
                    let vj = velocity(gm, p, &x, tj)?;
                    if let Some(vp) = &prev {
                        m_sup = m_sup.max(s_hat(vp, &vj, h));
                    }
                    x += &vj.v * (-h);
                    prev = Some(vj);
                }
            }
            Ok(m_sup)
        })
        .collect::<Result<_>>()?;

    let local_error_sum: f64 = (0..n_steps)
        .map(|i| {
            let dt = schedule.step_dt(i);
            0.5 * dt * dt * suprema[i]
        })
        .sum();

    let lhs_log = endpoint_w2.ln();
    let rhs_log = lipschitz * t0 + local_error_sum.ln();
    Ok(TotalBoundReport {
        endpoint_w2,
        lipschitz,
        local_error_sum,
        lhs_log,
        rhs_log,
        n_samples,
        holds: lhs_log <= rhs_log,
    })
}

fn node_state(run: &crate::solver::RunReport, i: usize) -> &DVector<f64> {
    if i == 0 {
        &run.x0
    } else {
        &run.steps[i - 1].x_out
    }
}

/// Resampling block of a serialized schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleSpec {
    pub q: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

/// On-disk schedule: the grid plus everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub schema_version: u32,
    pub parameterization: Parameterization,
    pub eta: EtaSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample: Option<ResampleSpec>,
    pub times: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub per_step: Vec<StepMeta>,
    pub total_nfe: u64,
}

impl ScheduleFile {
    pub fn new(
        p: &Parameterization,
        eta: &EtaSchedule,
        resample: Option<ResampleSpec>,
        schedule: &TimestepSchedule,
    ) -> Self {
        ScheduleFile {
            schema_version: SCHEMA_VERSION,
            parameterization: p.clone(),
            eta: *eta,
            resample,
            times: schedule.times.clone(),
            sigmas: schedule.sigmas.clone(),
            per_step: schedule.per_step.clone(),
            total_nfe: schedule.total_nfe,
        }
    }

    /// Rebuild and revalidate the grid carried by this file.
    pub fn schedule(&self) -> Result<TimestepSchedule> {
        TimestepSchedule::new(
            self.times.clone(),
            self.sigmas.clone(),
            self.per_step.clone(),
            self.total_nfe,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScheduleFile = serde_json::from_str(text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Domain(format!(
                "unsupported schema version {} (this build reads {})",
                file.schema_version, SCHEMA_VERSION
            )));
        }
        file.schedule()?;
        Ok(file)
    }
}
