//! Differentiates the exact reference trajectory numerically and checks the
//! closed-form velocity and acceleration against it, across all three
//! parameterizations and both mixture shapes.

use nalgebra::DVector;
use pfode_core::dynamics::{curvature_edm, curvature_general, curvature_ve, curvature_vp};
use pfode_core::flow::flow_between;
use pfode_core::testkit::{central_diff, second_central_diff};
use pfode_core::{curvature, preset, velocity, CurvatureEval, Kind, Parameterization};

const DRAWS: usize = 12;

fn all_kinds() -> Vec<Parameterization> {
    vec![
        Parameterization::edm_default(),
        Parameterization::vp_default(),
        Parameterization::ve_default(),
    ]
}

/// Deterministic (x, t) sweep: log-spaced noise levels paired with states
/// drawn from the exact marginal at each level.
fn sweep(
    gm: &pfode_core::GaussianMixture,
    p: &Parameterization,
    seed: u64,
) -> Vec<(DVector<f64>, f64)> {
    let (lo, hi) = (0.05f64, 0.7 * p.sigma_max());
    (0..DRAWS)
        .map(|i| {
            let f = (i as f64 + 0.5) / DRAWS as f64;
            let sigma = lo * (hi / lo).powf(f);
            let t = p.sigma_inv(sigma).unwrap();
            let x = gm
                .sample_marginal(p, t, i + 1, seed)
                .unwrap()
                .row(i)
                .transpose();
            (x, t)
        })
        .collect()
}

#[test]
fn curvature_matches_second_difference_of_the_flow() {
    for p in all_kinds() {
        for name in ["bimodal-1d", "anisotropic-2d"] {
            let gm = preset(name).unwrap();
            for (x, t) in sweep(&gm, &p, 11) {
                let acc = curvature(&gm, &p, &x, t).unwrap();
                let h = 1e-3 * t;
                let fd = second_central_diff(
                    |tau| flow_between(&gm, &p, &x, t, tau, 32),
                    t,
                    h,
                )
                .unwrap();
                let err = (&fd - &acc.xddot).norm();
                assert!(
                    err <= 1e-3 * acc.norm + 1e-7 * (1.0 + x.norm()),
                    "{:?}/{name}: |fd - xddot| = {err} at t={t} (norm {})",
                    p.kind(),
                    acc.norm
                );
            }
        }
    }
}

#[test]
fn eps_dot_matches_difference_along_the_trajectory() {
    for p in all_kinds() {
        for name in ["bimodal-1d", "anisotropic-2d"] {
            let gm = preset(name).unwrap();
            for (x, t) in sweep(&gm, &p, 23) {
                let acc = curvature(&gm, &p, &x, t).unwrap();
                let h = 1e-4 * t;
                let fd = central_diff(
                    |tau| {
                        let xt = flow_between(&gm, &p, &x, t, tau, 32)?;
                        Ok(velocity(&gm, &p, &xt, tau)?.eps)
                    },
                    t,
                    h,
                )
                .unwrap();
                let err = (&fd - &acc.eps_dot).norm();
                assert!(
                    err <= 1e-4 * acc.eps_dot.norm() + 1e-8 * (1.0 + x.norm()),
                    "{:?}/{name}: |fd - eps_dot| = {err} at t={t}",
                    p.kind(),
                );
            }
        }
    }
}

#[test]
fn specialized_curvature_agrees_with_the_general_form() {
    for p in all_kinds() {
        for name in ["bimodal-1d", "trimodal-1d", "anisotropic-2d"] {
            let gm = preset(name).unwrap();
            for (x, t) in sweep(&gm, &p, 37) {
                let general = curvature_general(&gm, &p, &x, t).unwrap();
                let special: CurvatureEval = match p.kind() {
                    Kind::Edm => curvature_edm(&gm, &p, &x, t).unwrap(),
                    Kind::Vp => curvature_vp(&gm, &p, &x, t).unwrap(),
                    Kind::Ve => curvature_ve(&gm, &p, &x, t).unwrap(),
                };
                let scale = general.norm + special.norm + x.norm();
                assert!(
                    (&general.xddot - &special.xddot).norm() <= 1e-12 * scale,
                    "{:?}/{name}: specialized and general forms split at t={t}",
                    p.kind(),
                );
                assert!((&general.eps_dot - &special.eps_dot).norm() <= 1e-12 * scale);
            }
        }
    }
}

#[test]
fn velocity_matches_first_difference_of_the_flow() {
    for p in all_kinds() {
        let gm = preset("trimodal-1d").unwrap();
        for (x, t) in sweep(&gm, &p, 41) {
            let v = velocity(&gm, &p, &x, t).unwrap();
            let h = 1e-5 * t;
            let fd = central_diff(|tau| flow_between(&gm, &p, &x, t, tau, 32), t, h).unwrap();
            let err = (&fd - &v.v).norm();
            assert!(
                err <= 1e-6 * v.v.norm() + 1e-9 * (1.0 + x.norm()),
                "{:?}: |fd - v| = {err} at t={t}",
                p.kind(),
            );
        }
    }
}
