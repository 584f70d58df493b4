//! Invariants of the adaptive schedule builder, the tolerance profile, the
//! geodesic resampler, and the endpoint transport bound.

use nalgebra::DVector;
use pfode_core::{
    build_schedule, eta_profile, geodesic_profile, preset, prior_sample, resample_n_steps,
    total_bound_check, BuildOptions, EtaSchedule, GaussianMixture, Parameterization,
    ResampleWeights, ScheduleFile, StepMeta, TimestepSchedule,
};
use proptest::prelude::*;

fn built(
    gm: &GaussianMixture,
    p: &Parameterization,
    eta: &EtaSchedule,
) -> TimestepSchedule {
    let t0 = p.t_max();
    let x0 = prior_sample(p, gm.dim(), t0, 1, 4242).unwrap().remove(0);
    build_schedule(gm, p, eta, &x0, &BuildOptions::default()).unwrap()
}

#[test]
fn committed_steps_respect_the_budget() {
    let eta = EtaSchedule::new(0.02, 0.20, 1.0).unwrap();
    for p in [Parameterization::edm_default(), Parameterization::vp_default()] {
        for name in ["bimodal-1d", "trimodal-1d"] {
            let gm = preset(name).unwrap();
            let sched = built(&gm, &p, &eta);
            assert!(sched.n_steps() >= 2);
            for (i, meta) in sched.per_step.iter().enumerate() {
                let dt = sched.step_dt(i);
                assert!(
                    dt * dt * meta.s_hat <= 2.0 * meta.eta_used + 1e-12,
                    "{:?}/{name} step {i}: dt^2 S = {} > 2 eta = {}",
                    p.kind(),
                    dt * dt * meta.s_hat,
                    2.0 * meta.eta_used
                );
                assert!(meta.eta_used >= eta.eta_min && meta.eta_used <= eta.eta_max);
            }
        }
    }
}

#[test]
fn line_search_iterations_stay_within_the_backoff_budget() {
    // ceil(log2(dt_max / delta)) + 2 with dt_max = t0/4 and delta = 1e-4 t0.
    let cap = ((0.25f64 / 1e-4).log2().ceil() as u32) + 2;
    let eta = EtaSchedule::new(0.02, 0.20, 1.0).unwrap();
    for name in ["bimodal-1d", "anisotropic-2d"] {
        let gm = preset(name).unwrap();
        let p = Parameterization::edm_default();
        let sched = built(&gm, &p, &eta);
        for meta in &sched.per_step {
            assert!(meta.linesearch_iters <= cap, "{} > {cap}", meta.linesearch_iters);
        }
    }
}

#[test]
fn builds_are_bitwise_deterministic() {
    let gm = preset("trimodal-1d").unwrap();
    let p = Parameterization::vp_default();
    let eta = EtaSchedule::new(0.02, 0.20, 1.0).unwrap();
    let a = built(&gm, &p, &eta);
    let b = built(&gm, &p, &eta);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.times), bits(&b.times));
    assert_eq!(bits(&a.sigmas), bits(&b.sigmas));
    assert_eq!(a.total_nfe, b.total_nfe);
    for (ma, mb) in a.per_step.iter().zip(&b.per_step) {
        assert_eq!(ma.s_hat.to_bits(), mb.s_hat.to_bits());
        assert_eq!(ma.eta_used.to_bits(), mb.eta_used.to_bits());
        assert_eq!(ma.linesearch_iters, mb.linesearch_iters);
    }
}

proptest! {
    #[test]
    fn eta_attains_endpoints_and_is_monotone(
        eta_min in 1e-4f64..0.05,
        gap in 0.0f64..0.5,
        p_exp in 0.1f64..4.0,
        s1 in 0.0f64..1.0,
        s2 in 0.0f64..1.0,
    ) {
        let eta = EtaSchedule::new(eta_min, eta_min + gap, p_exp).unwrap();
        let sigma_max = 80.0;
        prop_assert_eq!(eta.eta(sigma_max, sigma_max), eta.eta_max);
        prop_assert_eq!(eta.eta(0.0, sigma_max), eta.eta_min);
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let (e_lo, e_hi) = (eta.eta(lo * sigma_max, sigma_max), eta.eta(hi * sigma_max, sigma_max));
        prop_assert!(e_lo <= e_hi, "eta not monotone: {e_lo} > {e_hi}");
        prop_assert!(e_lo >= eta.eta_min && e_hi <= eta.eta_max);
    }

    #[test]
    fn resampling_yields_decreasing_grids_with_pinned_endpoints(
        n in 2usize..30,
        q in 0.0f64..1.5,
    ) {
        let gm = preset("bimodal-1d").unwrap();
        let p = Parameterization::edm_default();
        let eta = EtaSchedule::new(0.02, 0.20, 1.0).unwrap();
        let base = built(&gm, &p, &eta);
        prop_assume!(n <= base.n_steps());
        let out = resample_n_steps(&base, &ResampleWeights::new(q).unwrap(), n, &p).unwrap();
        prop_assert_eq!(out.times.len(), n + 1);
        prop_assert_eq!(out.times[0].to_bits(), base.times[0].to_bits());
        prop_assert_eq!(*out.times.last().unwrap(), 0.0);
        for w in out.times.windows(2) {
            prop_assert!(w[0] > w[1]);
        }
    }
}

#[test]
fn resampling_to_the_same_length_is_the_identity() {
    let gm = preset("bimodal-1d").unwrap();
    let p = Parameterization::edm_default();
    let eta = EtaSchedule::new(0.02, 0.20, 1.0).unwrap();
    let base = built(&gm, &p, &eta);
    let out =
        resample_n_steps(&base, &ResampleWeights::new(0.25).unwrap(), base.n_steps(), &p).unwrap();
    assert_eq!(
        out.times.iter().map(|t| t.to_bits()).collect::<Vec<_>>(),
        base.times.iter().map(|t| t.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn uniform_weights_on_a_uniform_grid_subsample_uniformly() {
    // Synthetic uniform base grid with constant eta: the geodesic targets
    // are equispaced, so selecting N of them lands on every (m/N)-th node.
    let p = Parameterization::edm_default();
    let m = 24;
    let t0 = 6.0;
    let mut times: Vec<f64> = (0..=m).map(|i| t0 * (1.0 - i as f64 / m as f64)).collect();
    times[m] = 0.0;
    let sigmas = times.clone();
    let per_step: Vec<StepMeta> = (0..m)
        .map(|_| StepMeta { eta_used: 0.05, s_hat: 1.0, linesearch_iters: 1 })
        .collect();
    let base = TimestepSchedule::new(times.clone(), sigmas, per_step, 0).unwrap();
    let out = resample_n_steps(&base, &ResampleWeights::new(0.0).unwrap(), 6, &p).unwrap();
    for (j, t) in out.times.iter().enumerate() {
        let want = times[j * 4];
        assert!(
            (t - want).abs() <= 1e-9 * t0,
            "node {j}: {t} vs uniform subsample {want}"
        );
    }
}

#[test]
fn tolerance_profile_has_one_entry_per_interior_step() {
    let gm = preset("bimodal-1d").unwrap();
    let p = Parameterization::edm_default();
    let eta = EtaSchedule::new(0.02, 0.20, 1.0).unwrap();
    let sched = built(&gm, &p, &eta);
    let profile = eta_profile(&gm, &p, &sched, 48, 7).unwrap();
    assert_eq!(profile.len(), sched.n_steps() - 1);
    assert!(profile.iter().all(|e| e.is_finite() && *e >= 0.0));
}

#[test]
fn unweighted_single_probe_increments_match_the_tolerance_profile() {
    // With one trajectory, one span per step, and uniform weights, each
    // increment is exactly the square root of the realized per-step proxy.
    let gm = preset("bimodal-1d").unwrap();
    let p = Parameterization::edm_default();
    let eta = EtaSchedule::new(0.02, 0.20, 1.0).unwrap();
    let sched = built(&gm, &p, &eta);
    let inc =
        geodesic_profile(&gm, &p, &sched, &ResampleWeights::new(0.0).unwrap(), 1, 1, 7).unwrap();
    let prof = eta_profile(&gm, &p, &sched, 1, 7).unwrap();
    assert_eq!(inc.len(), prof.len());
    for (k, (g, e)) in inc.iter().zip(prof.iter()).enumerate() {
        assert!(
            (g - e.sqrt()).abs() <= 1e-14 * (1.0 + e.sqrt()),
            "step {k}: increment {g} vs sqrt(profile) {}",
            e.sqrt()
        );
    }
}

#[test]
fn weighted_increments_are_finite_and_refine_stably() {
    // Probing the same schedule at a finer subdivision must not change the
    // accumulated budget by more than the subdivision error it removes.
    let gm = preset("trimodal-1d").unwrap();
    let p = Parameterization::edm_default();
    let eta = EtaSchedule::new(0.01, 0.05, 1.0).unwrap();
    let sched = built(&gm, &p, &eta);
    let w = ResampleWeights::new(0.25).unwrap();
    let coarse = geodesic_profile(&gm, &p, &sched, &w, 16, 4, 7).unwrap();
    let fine = geodesic_profile(&gm, &p, &sched, &w, 16, 8, 7).unwrap();
    assert_eq!(coarse.len(), sched.n_steps() - 1);
    for (k, (c, f)) in coarse.iter().zip(fine.iter()).enumerate() {
        assert!(c.is_finite() && *c >= 0.0);
        assert!(f.is_finite() && *f >= 0.0);
        let scale = 0.5 * (c + f);
        if scale > 0.0 {
            assert!(
                (c - f).abs() <= 0.25 * scale,
                "step {k}: subdivision unstable: {c} vs {f}"
            );
        }
    }
}

#[test]
fn endpoint_transport_stays_under_the_bound() {
    let gm = preset("bimodal-1d").unwrap();
    let p = Parameterization::edm_default();
    let eta = EtaSchedule::new(0.02, 0.20, 1.0).unwrap();
    let sched = built(&gm, &p, &eta);
    let report = total_bound_check(&gm, &p, &sched, 256, 99).unwrap();
    assert!(
        report.holds,
        "endpoint W2 exp({}) exceeds bound exp({})",
        report.lhs_log, report.rhs_log
    );
    assert!(report.lipschitz > 0.0);
}

#[test]
fn refining_a_schedule_halves_the_error_bound() {
    let gm = GaussianMixture::from_parts(1, &[1.0], &[vec![0.0]], &[vec![vec![4.0]]]).unwrap();
    let p = Parameterization::edm_default();
    let coarse = uniform_schedule(6.0, 16);
    let fine = uniform_schedule(6.0, 32);
    let a = total_bound_check(&gm, &p, &coarse, 128, 5).unwrap();
    let b = total_bound_check(&gm, &p, &fine, 128, 5).unwrap();
    let drop = a.rhs_log - b.rhs_log;
    assert!(
        (drop - std::f64::consts::LN_2).abs() <= 0.3,
        "refinement shrank the bound by exp({drop}), expected ~2x"
    );
}

fn uniform_schedule(t0: f64, m: usize) -> TimestepSchedule {
    let mut times: Vec<f64> = (0..=m).map(|i| t0 * (1.0 - i as f64 / m as f64)).collect();
    times[m] = 0.0;
    let sigmas = times.clone();
    TimestepSchedule::new(times, sigmas, Vec::new(), 0).unwrap()
}

#[test]
fn schedule_files_round_trip_bitwise() {
    let gm = preset("trimodal-1d").unwrap();
    let p = Parameterization::edm_default();
    let eta = EtaSchedule::new(0.02, 0.20, 1.0).unwrap();
    let sched = built(&gm, &p, &eta);
    let file = ScheduleFile::new(&p, &eta, None, &sched);
    let text = file.to_json().unwrap();
    let back = ScheduleFile::from_json(&text).unwrap();
    assert_eq!(
        back.times.iter().map(|t| t.to_bits()).collect::<Vec<_>>(),
        file.times.iter().map(|t| t.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        back.sigmas.iter().map(|t| t.to_bits()).collect::<Vec<_>>(),
        file.sigmas.iter().map(|t| t.to_bits()).collect::<Vec<_>>()
    );
    for (ma, mb) in back.per_step.iter().zip(&file.per_step) {
        assert_eq!(ma.s_hat.to_bits(), mb.s_hat.to_bits());
        assert_eq!(ma.eta_used.to_bits(), mb.eta_used.to_bits());
    }
}
