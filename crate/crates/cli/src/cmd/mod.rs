//! Subcommand implementations, one module per command.

pub mod analyze;
pub mod presets;
pub mod sample;
pub mod schedule;
pub mod verify;

use nalgebra::DVector;

use pfode_core::{
    build_schedule, prior_sample, resample_n_steps, BuildOptions, ResampleWeights,
    TimestepSchedule,
};

use crate::{CommandContext, Result};

/// Build the schedule the config describes: adaptive construction from one
/// prior draw, then the optional budget resampling.
pub fn schedule_from_config(
    ctx: &CommandContext,
    gm: &pfode_core::GaussianMixture,
) -> Result<TimestepSchedule> {
    let p = &ctx.cfg.parameterization;
    let x0: DVector<f64> = prior_sample(p, gm.dim(), p.t_max(), 1, ctx.seed)?.remove(0);
    let base = build_schedule(gm, p, &ctx.cfg.eta, &x0, &BuildOptions::default())?;
    match &ctx.cfg.resample {
        None => Ok(base),
        Some(spec) => {
            let weights = ResampleWeights::new(spec.q)?;
            Ok(resample_n_steps(&base, &weights, spec.n, p)?)
        }
    }
}
