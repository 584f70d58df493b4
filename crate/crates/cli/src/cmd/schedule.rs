//! `pfode schedule`: build the configured schedule and persist it.

use pfode_core::ScheduleFile;

use crate::{write_output, CommandContext, Result};

pub fn run(ctx: &CommandContext) -> Result<()> {
    let gm = ctx.mixture()?;
    let sched = super::schedule_from_config(ctx, &gm)?;
    let file = ScheduleFile::new(
        &ctx.cfg.parameterization,
        &ctx.cfg.eta,
        ctx.cfg.resample,
        &sched,
    );
    let mut text = file.to_json()?;
    text.push('\n');
    let path = write_output(&ctx.out_dir, "schedule.json", &text)?;

    let etas: Vec<f64> = sched.per_step.iter().map(|m| m.eta_used).collect();
    let lo = etas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = etas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = etas.iter().sum::<f64>() / etas.len() as f64;
    println!("wrote {}", path.display());
    println!("steps {}  build nfe {}", sched.n_steps(), sched.total_nfe);
    println!("eta used: min {lo}  max {hi}  mean {mean}");
    Ok(())
}
