//! `pfode analyze`: plot-ready CSV tables.

use std::path::Path;

use pfode_core::{curvature_csv, curvature_sweep, eta_profile, eta_profile_csv};

use crate::{config, write_output, CliError, CommandContext, Result};

/// Noise levels in the curvature sweep grid.
const SWEEP_LEVELS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum What {
    /// Mean and deviation of the cached curvature measure per noise level.
    #[value(name = "curvature_vs_sigma")]
    CurvatureVsSigma,
    /// Realized per-step local-error proxy along a schedule.
    #[value(name = "eta_profile")]
    EtaProfile,
}

pub fn run(ctx: &CommandContext, what: What, schedule_path: Option<&Path>) -> Result<()> {
    let gm = ctx.mixture()?;
    let p = &ctx.cfg.parameterization;
    if ctx.cfg.samples == 0 {
        return Err(CliError::Usage("analyze needs samples > 0".into()));
    }
    let path = match what {
        What::CurvatureVsSigma => {
            let grid = p.edm_reference_grid(SWEEP_LEVELS, 7.0)?;
            let rows =
                curvature_sweep(&gm, p, &grid.sigmas[..SWEEP_LEVELS], ctx.cfg.samples, ctx.seed)?;
            write_output(&ctx.out_dir, "curvature_vs_sigma.csv", &curvature_csv(&rows))?
        }
        What::EtaProfile => {
            let default_path = ctx.default_schedule_path();
            let file = config::load_schedule(schedule_path.unwrap_or(&default_path))?;
            if file.parameterization != *p {
                return Err(CliError::Usage(
                    "schedule was built for a different parameterization than the config".into(),
                ));
            }
            let schedule =
                file.schedule().map_err(|e| CliError::Usage(format!("schedule: {e}")))?;
            let etas = eta_profile(&gm, p, &schedule, ctx.cfg.samples, ctx.seed)?;
            write_output(&ctx.out_dir, "eta_profile.csv", &eta_profile_csv(&schedule, &etas))?
        }
    };
    println!("wrote {}", path.display());
    Ok(())
}
