//! Probability-flow velocity and curvature fields.
//!
//! The sampling trajectory follows
//!
//! ```text
//! dx/dt = (sdot/s) x + sigdot * eps(x, t),   eps = (x - s D(x/s; sigma)) / sigma
//! ```
//!
//! where `D` is the denoiser evaluated on the unscaled point `x/s`. The
//! second derivative `d2x/dt2` expands through the denoiser's spatial
//! Jacobian and noise derivative; `curvature_general` evaluates that
//! expansion for any parameterization, while the `curvature_edm`,
//! `curvature_vp`, and `curvature_ve` variants use the per-family
//! simplifications and must agree with the general form to roundoff.
//!
//! Below `SIGMA_FLOOR` the `1/sigma` factors are meaningless, so curvature
//! magnitudes saturate to infinity rather than erroring; step-size control
//! treats an infinite estimate as "maximally curved".

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::oracle::GaussianMixture;
use crate::param::{Kind, Parameterization, SIGMA_FLOOR};

/// Velocity field evaluation.
#[derive(Debug, Clone)]
pub struct VelocityEval {
    /// Trajectory velocity `dx/dt`.
    pub v: DVector<f64>,
    /// Predicted noise `(x - s D) / sigma`.
    pub eps: DVector<f64>,
    /// Denoiser evaluations consumed (always 1).
    pub nfe_cost: u32,
}

/// Curvature field evaluation.
#[derive(Debug, Clone)]
pub struct CurvatureEval {
    /// Trajectory acceleration `d2x/dt2`.
    pub xddot: DVector<f64>,
    /// Time derivative of the predicted noise.
    pub eps_dot: DVector<f64>,
    /// `|d2x/dt2|_2`; infinite below the sigma floor.
    pub norm: f64,
}

fn guard_kind(p: &Parameterization, expected: Kind) -> Result<()> {
    if p.kind() != expected {
        return Err(Error::KindMismatch { expected: expected.name(), got: p.kind().name() });
    }
    Ok(())
}

/// Evaluate the trajectory velocity at `(x, t)`. Costs one denoiser call.
pub fn velocity(gm: &GaussianMixture, p: &Parameterization, x: &DVector<f64>, t: f64) -> Result<VelocityEval> {
    let sigma = p.sigma(t)?;
    if sigma < SIGMA_FLOOR {
        return Err(Error::SingularSigma { sigma, floor: SIGMA_FLOOR });
    }
    let (sigdot, _) = p.sigma_derivatives(t)?;
    let (s, sdot, _) = p.scale_derivatives(t)?;
    let y = x / s;
    let eval = gm.denoise(&y, sigma, false, false)?;
    let eps = (&y - &eval.denoised) * (s / sigma);
    let v = x * (sdot / s) + &eps * sigdot;
    Ok(VelocityEval { v, eps, nfe_cost: 1 })
}

/// Spatial Jacobian `dv/dx` of the velocity field. Costs one denoiser call.
pub fn velocity_jacobian(
    gm: &GaussianMixture,
    p: &Parameterization,
    x: &DVector<f64>,
    t: f64,
) -> Result<DMatrix<f64>> {
    let sigma = p.sigma(t)?;
    if sigma < SIGMA_FLOOR {
        return Err(Error::SingularSigma { sigma, floor: SIGMA_FLOOR });
    }
    let (sigdot, _) = p.sigma_derivatives(t)?;
    let (s, sdot, _) = p.scale_derivatives(t)?;
    let y = x / s;
    let jac_d = gm
        .denoise(&y, sigma, true, false)?
        .jacobian
        .expect("jacobian requested");
    let dim = x.len();
    let eye = DMatrix::<f64>::identity(dim, dim);
    Ok(&eye * (sdot / s) + (&eye - &jac_d) * (sigdot / sigma))
}

/// Everything the curvature expansion needs, in trajectory (scaled) coordinates.
struct StateDerivs {
    sigma: f64,
    sigdot: f64,
    sigddot: f64,
    s: f64,
    sdot: f64,
    sddot: f64,
    denoised: DVector<f64>,
    /// `dD/dx` with respect to the scaled state `x = s y`.
    jac: DMatrix<f64>,
    /// Partial of the denoiser in `sigma` at fixed scaled state.
    sigma_deriv: DVector<f64>,
    eps: DVector<f64>,
}

fn state_derivs(
    gm: &GaussianMixture,
    p: &Parameterization,
    x: &DVector<f64>,
    t: f64,
) -> Result<Option<StateDerivs>> {
    let sigma = p.sigma(t)?;
    if sigma <= 0.0 {
        return Err(Error::Domain(format!("sigma {sigma} outside (0, inf)")));
    }
    if sigma < SIGMA_FLOOR {
        return Ok(None);
    }
    let (sigdot, sigddot) = p.sigma_derivatives(t)?;
    let (s, sdot, sddot) = p.scale_derivatives(t)?;
    let y = x / s;
    let eval = gm.denoise(&y, sigma, true, true)?;
    let jac_y = eval.jacobian.expect("jacobian requested");
    let dsig_y = eval.sigma_deriv.expect("sigma derivative requested");
    // The trajectory state is x = s(t) y. Viewing the denoiser as a function
    // of (x, sigma) through y = x / s(sigma) gives
    //   dD/dx     = (dD/dy) / s
    //   dD/dsigma = dD/dsigma|_y - (dD/dy) y * sdot / (sigdot s)
    let jac = &jac_y / s;
    let sigma_deriv = &dsig_y - (&jac_y * &y) * (sdot / (sigdot * s));
    let eps = (&y - &eval.denoised) * (s / sigma);
    Ok(Some(StateDerivs {
        sigma,
        sigdot,
        sigddot,
        s,
        sdot,
        sddot,
        denoised: eval.denoised,
        jac,
        sigma_deriv,
        eps,
    }))
}

fn saturated(dim: usize) -> CurvatureEval {
    CurvatureEval {
        xddot: DVector::from_element(dim, f64::INFINITY),
        eps_dot: DVector::from_element(dim, f64::INFINITY),
        norm: f64::INFINITY,
    }
}

/// Trajectory acceleration for any parameterization. Costs one denoiser call.
pub fn curvature_general(
    gm: &GaussianMixture,
    p: &Parameterization,
    x: &DVector<f64>,
    t: f64,
) -> Result<CurvatureEval> {
    let Some(d) = state_derivs(gm, p, x, t)? else {
        return Ok(saturated(x.len()));
    };
    let StateDerivs { sigma, sigdot, sigddot, s, sdot, sddot, denoised, jac, sigma_deriv, eps } = d;
    let jac_eps = &jac * &eps;
    let jac_den = &jac * &denoised;
    let eps_dot = &eps * (sdot / s)
        - &jac_eps * (sdot + sigdot * s / sigma)
        - &jac_den * (sdot * s / sigma)
        - &sigma_deriv * (sigdot * s / sigma);
    let xddot = x * (sddot / s)
        + &eps * (sigddot + 2.0 * sigdot * sdot / s)
        - &jac_eps * (sigdot * (sdot + sigdot * s / sigma))
        - &jac_den * (sigdot * sdot * s / sigma)
        - &sigma_deriv * (sigdot * sigdot * s / sigma);
    let norm = xddot.norm();
    Ok(CurvatureEval { xddot, eps_dot, norm })
}

/// Acceleration specialized to sigma = t, s = 1.
pub fn curvature_edm(
    gm: &GaussianMixture,
    p: &Parameterization,
    x: &DVector<f64>,
    t: f64,
) -> Result<CurvatureEval> {
    guard_kind(p, Kind::Edm)?;
    let Some(d) = state_derivs(gm, p, x, t)? else {
        return Ok(saturated(x.len()));
    };
    let StateDerivs { sigma, denoised, jac, sigma_deriv, eps, .. } = d;
    let residual = x - &denoised;
    let xddot = -(&jac * &residual) / (sigma * sigma) - &sigma_deriv / sigma;
    let eps_dot = (&jac * &eps + &sigma_deriv) * (-1.0 / sigma);
    let norm = xddot.norm();
    Ok(CurvatureEval { xddot, eps_dot, norm })
}

/// Acceleration specialized to sigma = sqrt(t), s = 1.
pub fn curvature_ve(
    gm: &GaussianMixture,
    p: &Parameterization,
    x: &DVector<f64>,
    t: f64,
) -> Result<CurvatureEval> {
    guard_kind(p, Kind::Ve)?;
    let Some(d) = state_derivs(gm, p, x, t)? else {
        return Ok(saturated(x.len()));
    };
    let StateDerivs { sigma, denoised, jac, sigma_deriv, eps, .. } = d;
    let residual = x - &denoised;
    let s2 = sigma * sigma;
    let xddot = -(&residual + &jac * &residual) / (4.0 * s2 * s2)
        - &sigma_deriv / (4.0 * s2 * sigma);
    let eps_dot = (&jac * &eps + &sigma_deriv) * (-1.0 / (2.0 * s2));
    let norm = xddot.norm();
    Ok(CurvatureEval { xddot, eps_dot, norm })
}

/// Acceleration specialized to the variance-preserving family.
pub fn curvature_vp(
    gm: &GaussianMixture,
    p: &Parameterization,
    x: &DVector<f64>,
    t: f64,
) -> Result<CurvatureEval> {
    guard_kind(p, Kind::Vp)?;
    let Some(d) = state_derivs(gm, p, x, t)? else {
        return Ok(saturated(x.len()));
    };
    let StateDerivs { sigma, sigdot, sigddot, s, denoised, jac, sigma_deriv, eps, .. } = d;
    let beta = p.beta_min() + p.beta_d() * t;
    let beta_d = p.beta_d();
    let residual = x - &denoised * s;
    let jac_res = &jac * &residual;
    let jac_den = &jac * &denoised;
    let xddot = x * (0.25 * beta * beta - 0.5 * beta_d)
        + &residual * ((sigddot - beta * sigdot) / sigma)
        - &jac_res * (sigdot * 0.5 * beta * s / (sigma * sigma * sigma))
        + &jac_den * (sigdot * 0.5 * beta * s * s / sigma)
        - &sigma_deriv * (sigdot * sigdot * s / sigma);
    let eps_dot = &eps * (-0.5 * beta)
        - (&jac * &eps) * (0.5 * beta * s / (sigma * sigma))
        + &jac_den * (0.5 * beta * s * s / sigma)
        - &sigma_deriv * (sigdot * s / sigma);
    let norm = xddot.norm();
    Ok(CurvatureEval { xddot, eps_dot, norm })
}

/// Dispatch to the family-specific curvature form.
pub fn curvature(
    gm: &GaussianMixture,
    p: &Parameterization,
    x: &DVector<f64>,
    t: f64,
) -> Result<CurvatureEval> {
    match p.kind() {
        Kind::Edm => curvature_edm(gm, p, x, t),
        Kind::Vp => curvature_vp(gm, p, x, t),
        Kind::Ve => curvature_ve(gm, p, x, t),
    }
}
