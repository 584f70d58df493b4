//! `pfode sample`: integrate trajectories over a schedule and report the
//! endpoint transport error against the reference flow.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use pfode_core::{
    mixed_sample_batch, prior_sample, reference_flow_batch, w2_1d, w2_assignment, RunReport,
    ASSIGNMENT_CAP, SCHEMA_VERSION,
};

use crate::{config, write_output, CliError, CommandContext, Result};

/// Reference-integrator substeps for the endpoint comparison.
const REF_SUBSTEPS: usize = 96;

#[derive(Serialize)]
struct Summary {
    schema_version: u32,
    samples: usize,
    /// Transport distance between solver endpoints and reference-flow
    /// endpoints from the same starting points; absent when samples = 0.
    endpoint_w2_vs_reference: Option<f64>,
    total_nfe: u64,
    /// Count of committed steps by their evaluation cost, over all
    /// trajectories.
    per_step_nfe_histogram: BTreeMap<u32, u64>,
}

pub fn run(ctx: &CommandContext, schedule_path: Option<&Path>) -> Result<()> {
    let gm = ctx.mixture()?;
    let p = &ctx.cfg.parameterization;
    let default_path = ctx.default_schedule_path();
    let file = config::load_schedule(schedule_path.unwrap_or(&default_path))?;
    if file.parameterization != *p {
        return Err(CliError::Usage(
            "schedule was built for a different parameterization than the config".into(),
        ));
    }
    let schedule = file.schedule().map_err(|e| CliError::Usage(format!("schedule: {e}")))?;

    let n = ctx.cfg.samples;
    if n > ASSIGNMENT_CAP && gm.dim() > 1 {
        return Err(CliError::Usage(format!(
            "samples {n} exceeds the exact-transport cap {ASSIGNMENT_CAP} for multi-dimensional \
             mixtures; lower samples",
        )));
    }
    let runs = mixed_sample_batch(&gm, p, &schedule, &ctx.cfg.policy, n, ctx.seed)?;

    let csv = trajectories_csv(&schedule, &runs, gm.dim());
    let csv_path = write_output(&ctx.out_dir, "trajectories.csv", &csv)?;

    let endpoint_w2 = if n == 0 {
        None
    } else {
        let t0 = schedule.times[0];
        let x0s = prior_sample(p, gm.dim(), t0, n, ctx.seed)?;
        let mut starts = DMatrix::<f64>::zeros(n, gm.dim());
        for (j, x0) in x0s.iter().enumerate() {
            starts.row_mut(j).copy_from(&x0.transpose());
        }
        let reference = reference_flow_batch(&gm, p, &starts, t0, 0.0, REF_SUBSTEPS)?;
        Some(endpoint_transport(&runs, &reference)?)
    };

    let mut histogram: BTreeMap<u32, u64> = BTreeMap::new();
    let mut total_nfe = 0u64;
    for run in &runs {
        total_nfe += run.total_nfe;
        for step in &run.steps {
            *histogram.entry(step.nfe).or_insert(0) += 1;
        }
    }
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        samples: n,
        endpoint_w2_vs_reference: endpoint_w2,
        total_nfe,
        per_step_nfe_histogram: histogram,
    };
    let mut text = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Numerical(format!("summary serialization: {e}")))?;
    text.push('\n');
    let summary_path = write_output(&ctx.out_dir, "summary.json", &text)?;

    println!("wrote {}", csv_path.display());
    println!("wrote {}", summary_path.display());
    println!(
        "trajectories {n}  total nfe {total_nfe}  endpoint w2 {}",
        endpoint_w2.map_or("n/a".into(), |w| w.to_string())
    );
    Ok(())
}

/// One row per committed step: position after the step plus the step's
/// solver choice, cached curvature, and evaluation cost.
fn trajectories_csv(
    schedule: &pfode_core::TimestepSchedule,
    runs: &[RunReport],
    dim: usize,
) -> String {
    let mut out = String::from("traj,step,t,sigma,solver,kappa_hat,nfe");
    for i in 0..dim {
        let _ = write!(out, ",x{i}");
    }
    out.push('\n');
    for (j, run) in runs.iter().enumerate() {
        for (i, step) in run.steps.iter().enumerate() {
            let kappa = step.kappa_hat.map_or(String::new(), |k| k.to_string());
            let _ = write!(
                out,
                "{j},{i},{t},{sigma},{solver},{kappa},{nfe}",
                t = step.t_to,
                sigma = schedule.sigmas[i + 1],
                solver = step.solver_used.name(),
                nfe = step.nfe,
            );
            for v in step.x_out.iter() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Exact transport distance between run endpoints and reference endpoints:
/// quantile-based in one dimension, assignment-based otherwise.
fn endpoint_transport(runs: &[RunReport], reference: &DMatrix<f64>) -> Result<f64> {
    let dim = reference.ncols();
    if dim == 1 {
        let a: Vec<f64> = runs.iter().map(|r| r.x_final()[0]).collect();
        let b: Vec<f64> = reference.column(0).iter().copied().collect();
        Ok(w2_1d(&a, &b)?.w2)
    } else {
        let a: Vec<DVector<f64>> = runs.iter().map(|r| r.x_final().clone()).collect();
        let b: Vec<DVector<f64>> =
            (0..reference.nrows()).map(|i| reference.row(i).transpose()).collect();
        Ok(w2_assignment(&a, &b)?.w2)
    }
}
