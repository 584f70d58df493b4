//! Probability-flow ODE sampling against analytic Gaussian-mixture targets.
//!
//! The pieces fit together in one pipeline: a [`Parameterization`] maps time
//! to noise level and scale, a [`GaussianMixture`] supplies the exact
//! denoiser (posterior mean) with its spatial and noise derivatives,
//! [`dynamics`] turns those into the flow's velocity and acceleration,
//! [`flow`] integrates the exact reference trajectory, [`schedule`] sizes
//! timesteps against a per-step transport budget, [`solver`] walks schedules
//! with Euler/Heun mixtures under an exact evaluation ledger, and
//! [`metrics`] measures the damage in Wasserstein distance.
//!
//! Because the target is a mixture, everything usually approximated by a
//! network is available in closed form here, so solver and schedule claims
//! can be checked against independent oracles instead of eyeballed samples.

pub mod dynamics;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod oracle;
pub mod param;
pub mod rng;
pub mod schedule;
pub mod solver;
#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use dynamics::{curvature, velocity, velocity_jacobian, CurvatureEval, VelocityEval};
pub use error::{Error, Result};
pub use flow::{reference_flow, reference_flow_batch, reference_flow_checked};
pub use metrics::{
    curvature_csv, curvature_sweep, eta_profile_csv, order_csv, order_of_convergence, spearman,
    w2_1d, w2_1d_bootstrap, w2_assignment, TransportMethod, TransportReport, ASSIGNMENT_CAP,
};
pub use oracle::{preset, preset_names, Component, GaussianMixture, OracleEval};
pub use param::{Kind, Parameterization, SIGMA_FLOOR};
pub use rng::stream;
pub use schedule::{
    build_schedule, eta_profile, geodesic_profile, max_step, resample_n_steps, s_hat,
    total_bound_check, BuildOptions, EtaSchedule, ResampleSpec, ResampleWeights, ScheduleFile,
    StepMeta, TimestepSchedule, TotalBoundReport, SCHEMA_VERSION,
};
pub use solver::{
    curvature_measures, euler_step, heun_step, mixed_sample, mixed_sample_batch, prior_sample,
    CurvatureSource, KappaMeasures, LambdaKind, RunReport, SolverPolicy, SolverUsed, StepRecord,
};
